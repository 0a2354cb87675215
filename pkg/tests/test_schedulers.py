import asyncio
import unittest

from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from core.bm25 import PivotRank
from core.metrics import ndcg_at_k
from core.models import Document, Qrels, Query, RankedList, pivot_doc_id
from core.rerankers import InferenceLedger, NoiseModel, OracleReranker
from core.schedulers import (
    SchedulerError,
    WindowSpec,
    baseline_trace,
    call_bound,
    gptd_part,
    next_stride,
    run_scheduler,
    sliding_schedule,
    sliding_window,
    snow,
    td_part,
    vs_sliding,
)
from core.synth import SynthSpec, generate_synth

SPEC = WindowSpec(w=20, stride=10)
QUERY = Query(id="q1", text="solar energy")
PIVOT = Document(id=pivot_doc_id("q1"), text="pivot")


def _fixture(grades):
    ids = [f"d{i:03d}" for i in range(len(grades))]
    ranked = RankedList.from_ids("q1", ids)
    qrels = Qrels(grades={"q1": dict(zip(ids, grades))})
    ledger = InferenceLedger()
    return ranked, qrels, OracleReranker(qrels, {"q1": ranked}, ledger), ledger


class FailingRanker:
    ledger = InferenceLedger()

    async def rank_window(self, query, window):
        raise RuntimeError("backend down")


class TestWindowSpec(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ValidationError):
            WindowSpec(w=10, stride=11)
        with self.assertRaises(ValidationError):
            WindowSpec(w=10, stride=5, s_max=11)

    def test_sliding_schedule_covers_list_bottom_up(self):
        spans = sliding_schedule(100, SPEC)
        self.assertEqual(9, len(spans))
        self.assertEqual((80, 100), spans[0])
        self.assertEqual((0, 20), spans[-1])
        self.assertEqual([(0, 15)], sliding_schedule(15, SPEC))
        self.assertEqual([], sliding_schedule(0, SPEC))

    def test_baseline_trace(self):
        trace = baseline_trace("q1", 100, SPEC)
        self.assertEqual(9, trace.listwise_calls)
        self.assertEqual([1] * 9, trace.serial_batches)

    def test_call_bound(self):
        self.assertEqual((9, True), call_bound("sliding", 100, SPEC))
        self.assertEqual((6, True), call_bound("snow", 100, SPEC))
        self.assertEqual((81, False), call_bound("vs-sliding", 100, SPEC))
        self.assertEqual((1, True), call_bound("vs-sliding", 20, SPEC))
        self.assertEqual((33, False), call_bound("tdpart", 100, SPEC))
        self.assertEqual((0, True), call_bound("gptd-part", 0, SPEC))
        with self.assertRaises(ValueError):
            call_bound("bubble", 100, SPEC)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(min_value=2, max_value=40), st.data())
    def test_next_stride_stays_in_range(self, w, data):
        s_max = data.draw(st.one_of(st.none(), st.integers(min_value=1, max_value=w)))
        spec = WindowSpec(w=w, stride=1, s_max=s_max)
        n_above = data.draw(st.integers(min_value=0, max_value=w))
        stride = next_stride(n_above, spec)
        self.assertGreaterEqual(stride, 1)
        self.assertLessEqual(stride, spec.max_stride)
        if n_above < w:
            # beförderte Dokumente bleiben im nächsten Fenster
            self.assertLessEqual(stride, w - n_above)


class TestCallCounts(unittest.IsolatedAsyncioTestCase):
    async def asyncSetUp(self):
        # 20 Top-Dokumente mit Grad 3, darunter nur Grad 0
        self.ranked, self.qrels, self.oracle, self.ledger = _fixture([3] * 20 + [0] * 80)

    async def test_sliding(self):
        out, trace = await sliding_window(self.oracle, self.ranked, SPEC, QUERY, {})
        self.assertEqual(9, trace.listwise_calls)
        self.assertEqual(9, self.ledger.count("q1", "listwise"))
        self.assertEqual(self.ranked.doc_ids, out.doc_ids)

    async def test_snow_runs_two_batches(self):
        out, trace = await snow(self.oracle, self.ranked, PIVOT, SPEC, QUERY, {})
        self.assertEqual(6, trace.listwise_calls)
        self.assertEqual([5, 1], trace.serial_batches)
        self.assertEqual(2, trace.parallelizable_batches)
        self.assertEqual([20, 0, 0, 0, 0], [w.n_above for w in trace.windows[:5]])
        self.assertNotIn(PIVOT.id, out.doc_ids)

    async def test_vs_sliding_without_promotions_uses_full_stride(self):
        _, trace = await vs_sliding(self.oracle, self.ranked, PIVOT, SPEC, QUERY, {})
        self.assertEqual(5, trace.listwise_calls)
        self.assertEqual([20, 20, 20, 20, None], [w.stride_used for w in trace.windows])

    async def test_vs_sliding_with_promotions_shrinks_stride(self):
        ranked, _, oracle, _ = _fixture([0] * 20 + [0] * 60 + [3] * 5 + [0] * 15)
        out, trace = await vs_sliding(oracle, ranked, PIVOT, SPEC, QUERY, {})
        self.assertEqual(5, trace.windows[0].n_above)
        self.assertEqual(15, trace.windows[0].stride_used)
        self.assertEqual([f"d{i:03d}" for i in range(80, 85)], out.doc_ids[:5])

    async def test_tdpart_without_promotions(self):
        out, trace = await td_part(self.oracle, self.ranked, SPEC, QUERY, {}, anchor_k=10)
        self.assertEqual(6, trace.listwise_calls)
        self.assertEqual([1, 5], trace.serial_batches)
        self.assertEqual(self.ranked.doc_ids, out.doc_ids)

    async def test_tdpart_anchor_at_window_end_terminates(self):
        # alle tiefen Dokumente schlagen den Anker, die Liste muss trotzdem schrumpfen
        ranked, qrels, oracle, _ = _fixture([0] * 20 + [3] * 80)
        out, trace = await td_part(oracle, ranked, SPEC, QUERY, {}, anchor_k=20)
        self.assertEqual(sorted(ranked.doc_ids), sorted(out.doc_ids))
        self.assertEqual([3] * 20, [qrels.grade("q1", d) for d in out.doc_ids[:20]])
        self.assertEqual([0] * 20, [qrels.grade("q1", d) for d in out.doc_ids[-20:]])
        self.assertLessEqual(trace.listwise_calls, call_bound("tdpart", 100, SPEC, anchor_k=20)[0])

    async def test_tdpart_rejects_bad_anchor(self):
        with self.assertRaises(ValueError):
            await td_part(self.oracle, self.ranked, SPEC, QUERY, {}, anchor_k=21)

    async def test_gptd_part_keeps_tail_beyond_pivot_rank(self):
        ranked, _, oracle, _ = _fixture([0] * 60 + [3] * 40)
        out, trace = await gptd_part(
            oracle, ranked, PIVOT, PivotRank(position=40, pivot_score=1.0), SPEC, QUERY, {}
        )
        # Tiefe Fenster nur über Ränge 21..40
        self.assertEqual(1 + 2, trace.listwise_calls)
        self.assertEqual(ranked.doc_ids[40:], out.doc_ids[40:])

    async def test_failure_reports_window(self):
        with self.assertRaises(SchedulerError) as ctx:
            await sliding_window(FailingRanker(), self.ranked, SPEC, QUERY, {})
        self.assertEqual((81, 100), ctx.exception.position)

    async def test_pivot_methods_need_pivot(self):
        with self.assertRaises(ValueError):
            await run_scheduler("snow", self.oracle, self.ranked, QUERY, {}, SPEC)
        with self.assertRaises(ValueError):
            await run_scheduler("gptd-part", self.oracle, self.ranked, QUERY, {}, SPEC, pivot=PIVOT)

    async def test_empty_list(self):
        empty = RankedList(query_id="q1")
        for method in ("sliding", "snow", "vs-sliding", "tdpart"):
            out, trace = await run_scheduler(method, self.oracle, empty, QUERY, {}, SPEC, pivot=PIVOT)
            self.assertEqual([], out.doc_ids)
            self.assertEqual(0, trace.listwise_calls)


class TestOracleEquivalence(unittest.IsolatedAsyncioTestCase):
    async def test_all_schedulers_match_full_oracle_sort(self):
        bundle = generate_synth(SynthSpec(seed=42, num_queries=50, m=100, first_stage_quality=0.5))
        docs = {d.id: d for d in bundle.corpus}
        ledger = InferenceLedger()
        oracle = OracleReranker(bundle.qrels, bundle.run, ledger)

        for query in bundle.queries:
            ranked = bundle.run[query.id]
            ideal = sorted(ranked.doc_ids, key=lambda d: oracle.sort_key(query.id, d))
            expected = ndcg_at_k(RankedList.from_ids(query.id, ideal), bundle.qrels, 10)
            pivot = Document(id=pivot_doc_id(query.id), text="pivot")

            for method in ("sliding", "snow", "vs-sliding", "tdpart", "gptd-part"):
                out, trace = await run_scheduler(
                    method,
                    oracle,
                    ranked,
                    query,
                    docs,
                    SPEC,
                    pivot=pivot,
                    pivot_rank=PivotRank(position=ranked.depth, pivot_score=0.0),
                )
                self.assertAlmostEqual(expected, ndcg_at_k(out, bundle.qrels, 10), delta=1e-9, msg=method)
                self.assertEqual(sorted(ranked.doc_ids), sorted(out.doc_ids))
                if method == "snow":
                    self.assertEqual(6, trace.listwise_calls)
                if method == "sliding":
                    self.assertEqual(9, trace.listwise_calls)

    async def test_vs_sliding_is_cheaper_at_comparable_ndcg(self):
        bundle = generate_synth(SynthSpec(seed=5, num_queries=50, m=100, first_stage_quality=0.9))
        oracle = OracleReranker(bundle.qrels, bundle.run, InferenceLedger())
        vs_calls, vs_ndcg, sw_calls, sw_ndcg = [], [], [], []
        for query in bundle.queries:
            ranked = bundle.run[query.id]
            pivot = Document(id=pivot_doc_id(query.id), text="pivot")
            out, trace = await vs_sliding(oracle, ranked, pivot, SPEC, query, {})
            vs_calls.append(trace.listwise_calls)
            vs_ndcg.append(ndcg_at_k(out, bundle.qrels, 10))
            out, trace = await sliding_window(oracle, ranked, SPEC, query, {})
            sw_calls.append(trace.listwise_calls)
            sw_ndcg.append(ndcg_at_k(out, bundle.qrels, 10))

        self.assertLess(sum(vs_calls) / 50, sum(sw_calls) / 50)
        self.assertGreaterEqual(sum(vs_ndcg) / 50, sum(sw_ndcg) / 50 - 0.01)


class ScriptedPivotRanker:
    """Setzt den Pivot (letzter Platz im Fenster) an vorgegebene Positionen, Rest bleibt stehen."""

    def __init__(self, pattern):
        self.pattern = pattern
        self.calls = 0
        self.ledger = InferenceLedger()

    async def rank_window(self, query, window):
        n = len(window)
        pos = self.pattern[self.calls % len(self.pattern)] % n
        self.calls += 1
        return list(range(pos)) + [n - 1] + list(range(pos, n - 1))


class TestVsSlidingSafety(unittest.TestCase):
    @settings(max_examples=10_000, deadline=None)
    @given(
        st.integers(min_value=1, max_value=60),
        st.integers(min_value=2, max_value=25),
        st.data(),
    )
    def test_strides_positions_and_coverage(self, m, w, data):
        stride = data.draw(st.integers(min_value=1, max_value=w))
        s_max = data.draw(st.one_of(st.none(), st.integers(min_value=1, max_value=w)))
        pattern = data.draw(st.lists(st.integers(min_value=0, max_value=25), min_size=1, max_size=8))
        spec = WindowSpec(w=w, stride=stride, s_max=s_max)
        ids = [f"d{i:03d}" for i in range(m)]

        out, trace = asyncio.run(
            vs_sliding(ScriptedPivotRanker(pattern), RankedList.from_ids("q1", ids), PIVOT, spec, QUERY, {})
        )

        self.assertEqual(sorted(ids), sorted(out.doc_ids))
        ends = [win.end for win in trace.windows]
        self.assertEqual(ends, sorted(set(ends), reverse=True))
        self.assertEqual(1, trace.windows[-1].start)
        for win in trace.windows[:-1]:
            self.assertGreaterEqual(win.stride_used, 1)
            self.assertLessEqual(win.stride_used, spec.max_stride)
        covered = set()
        for win in trace.windows:
            covered.update(range(win.start, win.end + 1))
        self.assertEqual(set(range(1, m + 1)), covered)


class TestNoisyPermutation(unittest.TestCase):
    @settings(max_examples=50, deadline=None)
    @given(
        st.sampled_from(["sliding", "snow", "vs-sliding", "tdpart"]),
        st.lists(st.integers(min_value=0, max_value=3), min_size=1, max_size=70),
        st.integers(min_value=0, max_value=1000),
    )
    def test_output_is_always_a_permutation(self, method, grades, seed):
        ids = [f"d{i:03d}" for i in range(len(grades))]
        ranked = RankedList.from_ids("q1", ids)
        qrels = Qrels(grades={"q1": dict(zip(ids, grades))})
        oracle = OracleReranker(qrels, {"q1": ranked}, InferenceLedger(), NoiseModel(epsilon=0.3, seed=seed))
        out, _ = asyncio.run(run_scheduler(method, oracle, ranked, QUERY, {}, SPEC, pivot=PIVOT))
        self.assertEqual(sorted(ids), sorted(out.doc_ids))


if __name__ == "__main__":
    unittest.main()
