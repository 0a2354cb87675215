import tempfile
import unittest
from pathlib import Path

from pydantic import ValidationError

from core.metrics import ndcg_at_k
from core.models import Document, Query
from core.pivot import OracleJudge, OraclePivotGenerator, generate_pivot, parse_grade
from core.synth import SynthPivotScorer, SynthSpec, generate_synth, grade_counts, write_synth
from utils.preprocess import estimate_tokens, split_sentences
from utils.trec_io import read_qrels, read_run


def _mean_ndcg(bundle):
    return sum(ndcg_at_k(bundle.run[q.id], bundle.qrels, 10) for q in bundle.queries) / len(bundle.queries)


class TestSynthSpec(unittest.TestCase):
    def test_distribution_must_sum_to_one(self):
        with self.assertRaises(ValidationError):
            SynthSpec(grade_distribution=(0.5, 0.5, 0.5, 0.0))
        with self.assertRaises(ValidationError):
            SynthSpec(grade_distribution=(1.1, -0.1, 0.0, 0.0))

    def test_infeasible_depth(self):
        with self.assertRaises(ValueError):
            generate_synth(SynthSpec(m=50, docs_per_query=40))

    def test_grade_counts_are_exact(self):
        self.assertEqual([50, 35, 10, 5], grade_counts((0.5, 0.35, 0.1, 0.05), 100))
        self.assertEqual([4, 2, 1, 0], grade_counts((0.5, 0.35, 0.1, 0.05), 7))
        self.assertEqual(13, sum(grade_counts((0.25, 0.25, 0.25, 0.25), 13)))


class TestGenerateSynth(unittest.TestCase):
    def test_same_seed_same_bundle(self):
        spec = SynthSpec(seed=9, num_queries=5, m=30)
        self.assertEqual(generate_synth(spec), generate_synth(spec))
        self.assertNotEqual(generate_synth(spec).run, generate_synth(spec.model_copy(update={"seed": 10})).run)

    def test_shape_and_ids(self):
        bundle = generate_synth(SynthSpec(num_queries=50, m=100))
        self.assertEqual(50, len(bundle.queries))
        self.assertEqual(5000, len(bundle.corpus))
        self.assertEqual("q00", bundle.queries[0].id)
        self.assertEqual("q00-d00", bundle.corpus[0].id)
        for query in bundle.queries:
            self.assertEqual(100, bundle.run[query.id].depth)
            self.assertEqual(15, bundle.qrels.relevant_count(query.id))

    def test_pool_larger_than_depth(self):
        bundle = generate_synth(SynthSpec(num_queries=2, m=20, docs_per_query=60))
        self.assertEqual(120, len(bundle.corpus))
        self.assertEqual(20, bundle.run["q0"].depth)
        self.assertEqual(60, len(bundle.qrels.judged("q0")))

    def test_perfect_first_stage_is_grade_sorted(self):
        bundle = generate_synth(SynthSpec(num_queries=10, m=100, first_stage_quality=1.0))
        for query in bundle.queries:
            grades = [bundle.qrels.grade(query.id, d) for d in bundle.run[query.id].doc_ids]
            self.assertEqual(sorted(grades, reverse=True), grades)

    def test_quality_controls_first_stage_ndcg(self):
        values = [
            _mean_ndcg(generate_synth(SynthSpec(seed=1, num_queries=20, m=100, first_stage_quality=q)))
            for q in (0.0, 0.5, 1.0)
        ]
        self.assertLess(values[0], values[1])
        self.assertLess(values[1], values[2])
        self.assertAlmostEqual(1.0, values[2])

    def test_quality_does_not_touch_texts_or_grades(self):
        low = generate_synth(SynthSpec(seed=4, num_queries=3, m=20, first_stage_quality=0.2))
        high = generate_synth(SynthSpec(seed=4, num_queries=3, m=20, first_stage_quality=0.8))
        self.assertEqual(low.corpus, high.corpus)
        self.assertEqual(low.qrels, high.qrels)


class TestSynthTexts(unittest.IsolatedAsyncioTestCase):
    async def test_oracle_judge_recovers_grade(self):
        bundle = generate_synth(SynthSpec(seed=3, num_queries=5, m=40))
        queries = {q.id: q for q in bundle.queries}
        judge = OracleJudge()
        for doc in bundle.corpus:
            qid = doc.id.split("-")[0]
            self.assertEqual(4, len(split_sentences(doc.text)))
            self.assertEqual(40, estimate_tokens(doc.text))
            grade = parse_grade(await judge.judge(queries[qid], doc.text))
            self.assertEqual(bundle.qrels.grade(qid, doc.id), grade)


class TestSynthPivotScorer(unittest.IsolatedAsyncioTestCase):
    async def asyncSetUp(self):
        self.query = Query(id="q0", text="q0t0 q0t1 q0t2")
        self.on = "q0t0 w1 q0t1 w2."
        self.off = "q0t2 w3 w4 w5."

    async def test_score_follows_pivot_text(self):
        scorer = SynthPivotScorer(1.0)
        two = Document(id="p", text=" ".join([self.on, self.on, self.off, self.off]))
        three = Document(id="p", text=" ".join([self.on, self.on, self.on, self.off]))
        self.assertEqual(1.7505, await scorer.score_pivot(self.query, two))
        self.assertEqual(2.7505, await scorer.score_pivot(self.query, three))
        self.assertEqual(-0.2495, await scorer.score_pivot(self.query, Document(id="p", text="")))

    async def test_noise_is_per_query_and_deterministic(self):
        scorer = SynthPivotScorer(0.5, seed=7)
        pivot = Document(id="p", text=" ".join([self.on, self.on, self.off, self.off]))
        other = Query(id="q1", text=self.query.text)
        first = await scorer.score_pivot(self.query, pivot)
        self.assertEqual(first, await SynthPivotScorer(0.5, seed=7).score_pivot(self.query, pivot))
        self.assertNotEqual(first, await scorer.score_pivot(other, pivot))
        for score in (first, await scorer.score_pivot(other, pivot)):
            self.assertGreaterEqual(score, 0.8755)
            self.assertLessEqual(score, 2.3755)

    async def test_dyn_threshold_varies_across_synth_queries(self):
        bundle = generate_synth(SynthSpec(seed=5, num_queries=5, m=20, first_stage_quality=0.5))
        generator = OraclePivotGenerator(bundle.qrels, bundle.corpus)
        scorer = SynthPivotScorer(0.5, seed=5)
        scores = set()
        for query in bundle.queries:
            pivot = (await generate_pivot(generator, query)).as_document()
            scores.add(await scorer.score_pivot(query, pivot))
        self.assertGreater(len(scores), 1)


class TestWriteSynth(unittest.TestCase):
    def test_files_round_trip(self):
        bundle = generate_synth(SynthSpec(seed=2, num_queries=3, m=10))
        with tempfile.TemporaryDirectory() as td:
            paths = write_synth(bundle, td)
            self.assertEqual({"corpus", "queries", "qrels", "run"}, set(paths))
            self.assertEqual(bundle.qrels, read_qrels(paths["qrels"]))
            self.assertEqual(bundle.run["q0"].doc_ids, read_run(paths["run"])["q0"].doc_ids)
            lines = Path(paths["corpus"]).read_text(encoding="utf-8").splitlines()
            self.assertEqual(30, len(lines))

            again = Path(td) / "again"
            write_synth(generate_synth(SynthSpec(seed=2, num_queries=3, m=10)), again)
            self.assertEqual(Path(paths["run"]).read_bytes(), (again / "run.txt").read_bytes())


if __name__ == "__main__":
    unittest.main()
