import unittest
from unittest.mock import AsyncMock, MagicMock

from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from core.models import Document, Qrels, Query, RankedList, pivot_doc_id
from core.rerankers import (
    HttpListwiseReranker,
    HttpPairwiseReranker,
    HttpPointwiseReranker,
    InferenceLedger,
    ListwiseParseError,
    ListwisePermutation,
    NoiseModel,
    OracleReranker,
    StageReranker,
    listwise_rank,
    pairwise_prefer,
    pairwise_rerank,
    pointwise_score,
    repair_permutation,
)

QUERY = Query(id="q1", text="solar energy")
GRADES = {"a": 0, "b": 3, "c": 1, "d": 2, "e": 3}
DOCS = [Document(id=d, text=f"text of {d}") for d in "abcde"]


def _oracle(ledger=None, noise=None):
    first_stage = {"q1": RankedList.from_ids("q1", [d.id for d in DOCS])}
    return OracleReranker(Qrels(grades={"q1": GRADES}), first_stage, ledger or InferenceLedger(), noise)


def _client(outputs):
    client = MagicMock()
    client.config.max_retries = 3
    client.config.model = "test-model"
    client.complete = AsyncMock(side_effect=list(outputs))
    return client


class TestLedger(unittest.TestCase):
    def test_counts_and_totals(self):
        ledger = InferenceLedger()
        ledger.record("q1", "pointwise", 10)
        ledger.record("q2", "pointwise", 20)
        ledger.record("q1", "pivot_gen")
        self.assertEqual(30, ledger.count(kind="pointwise"))
        self.assertEqual(11, ledger.count("q1"))
        self.assertEqual(30, ledger.total(["q1", "q2"], ["pointwise"]))
        self.assertEqual({"q1": {"pivot_gen": 1, "pointwise": 10}, "q2": {"pointwise": 20}}, ledger.snapshot())

    def test_rejects_unknown_kind_and_negative(self):
        ledger = InferenceLedger()
        with self.assertRaises(ValueError):
            ledger.record("q1", "magic")
        with self.assertRaises(ValueError):
            ledger.record("q1", "listwise", -1)


class TestPermutation(unittest.TestCase):
    def test_rejects_non_permutation(self):
        with self.assertRaises(ValidationError):
            ListwisePermutation(order=(0, 0, 1))

    def test_repair_appends_missing_and_drops_invalid(self):
        order, repaired = repair_permutation("[3] > [1] > [3] > [9]", 4)
        self.assertEqual([2, 0, 1, 3], order)
        self.assertTrue(repaired)

    def test_clean_output_is_not_marked_repaired(self):
        self.assertEqual(([1, 0], False), repair_permutation("[2] > [1]", 2))

    def test_unusable_output(self):
        self.assertEqual((None, False), repair_permutation("I cannot rank these.", 3))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=1, max_value=30), st.lists(st.integers(min_value=-5, max_value=40), max_size=60))
    def test_repair_always_yields_permutation_or_none(self, n, ids):
        raw = " > ".join(f"[{i}]" for i in ids)
        order, _ = repair_permutation(raw, n)
        if order is not None:
            self.assertEqual(list(range(n)), sorted(order))


class TestOracleReranker(unittest.IsolatedAsyncioTestCase):
    async def test_pointwise_score_orders_by_grade_then_first_stage(self):
        oracle = _oracle()
        scores = {d.id: await pointwise_score(oracle, QUERY, d) for d in DOCS}
        ranked = sorted(scores, key=lambda d: -scores[d])
        self.assertEqual(["b", "e", "d", "c", "a"], ranked)
        self.assertEqual(5, oracle.ledger.count("q1", "pointwise"))

    async def test_pivot_sits_between_grades(self):
        oracle = _oracle()
        pivot = Document(id=pivot_doc_id("q1"), text="pivot")
        self.assertEqual(1.75, await oracle.score(QUERY, pivot))
        order = await oracle.rank_window(QUERY, [DOCS[0], pivot, DOCS[3], DOCS[2]])
        self.assertEqual([2, 1, 3, 0], order)

    async def test_listwise_rank_counts_one_call(self):
        ledger = InferenceLedger()
        permutation = await listwise_rank(_oracle(ledger), QUERY, DOCS)
        self.assertEqual(["b", "e", "d", "c", "a"], [d.id for d in permutation.apply(DOCS)])
        self.assertEqual(1, ledger.count("q1", "listwise"))

    async def test_listwise_rejects_empty_window(self):
        with self.assertRaises(ValueError):
            await listwise_rank(_oracle(), QUERY, [])

    async def test_noise_is_deterministic(self):
        noise = NoiseModel(epsilon=0.5, seed=3, passes=2)
        first = await _oracle(noise=noise).rank_window(QUERY, DOCS)
        second = await _oracle(noise=noise).rank_window(QUERY, DOCS)
        self.assertEqual(first, second)
        self.assertEqual(list(range(5)), sorted(first))

    async def test_pairwise_prefer_and_self_comparison(self):
        oracle = _oracle()
        winner = await pairwise_prefer(oracle, QUERY, DOCS[0], DOCS[1])
        self.assertEqual("b", winner.id)
        with self.assertRaises(ValueError):
            await pairwise_prefer(oracle, QUERY, DOCS[0], DOCS[0])

    async def test_all_pairs_counts_n_choose_2(self):
        ledger = InferenceLedger()
        ranked = await pairwise_rerank(_oracle(ledger), QUERY, DOCS, "all-pairs")
        self.assertEqual(["b", "e", "d", "c", "a"], ranked.doc_ids)
        self.assertEqual(10, ledger.count("q1", "pairwise"))

    async def test_single_pass_counts_n_minus_1_and_lifts_best(self):
        ledger = InferenceLedger()
        ranked = await pairwise_rerank(_oracle(ledger), QUERY, DOCS, "single-pass")
        self.assertEqual("b", ranked.doc_ids[0])
        self.assertEqual(4, ledger.count("q1", "pairwise"))

    async def test_stage_reranker_pointwise(self):
        stage = StageReranker(_oracle(), "pointwise")
        result = await stage.rerank(QUERY, DOCS)
        self.assertEqual(["b", "e", "d", "c", "a"], [d for d, _ in result])
        self.assertEqual([], await stage.rerank(QUERY, []))

    def test_stage_reranker_rejects_listwise(self):
        with self.assertRaises(ValueError):
            StageReranker(_oracle(), "listwise")


class TestHttpRerankers(unittest.IsolatedAsyncioTestCase):
    async def test_listwise_parses_and_repairs(self):
        ledger = InferenceLedger()
        reranker = HttpListwiseReranker(_client(["[2] > [1]"]), ledger)
        permutation = await listwise_rank(reranker, QUERY, DOCS[:3])
        self.assertEqual((1, 0, 2), permutation.order)
        self.assertEqual(1, ledger.count("q1", "listwise"))

    async def test_listwise_retries_then_fails(self):
        client = _client(["nope", "still nope", "never"])
        reranker = HttpListwiseReranker(client, InferenceLedger())
        with self.assertRaises(ListwiseParseError) as ctx:
            await reranker.rank_window(QUERY, DOCS[:2])
        self.assertEqual("never", ctx.exception.raw)
        self.assertEqual(3, client.complete.await_count)

    async def test_listwise_prompt_lists_passages(self):
        client = _client(["[1] > [2]"])
        await HttpListwiseReranker(client, InferenceLedger()).rank_window(QUERY, DOCS[:2])
        prompt = client.complete.await_args.args[0][0]["content"]
        self.assertIn("[1] text of a", prompt)
        self.assertIn("[2] text of b", prompt)
        self.assertIn("Search Query: solar energy.", prompt)

    async def test_pointwise_takes_last_number(self):
        reranker = HttpPointwiseReranker(_client(["Grade 1... final: 2.5"]), InferenceLedger())
        self.assertEqual(2.5, await reranker.score(QUERY, DOCS[0]))

    async def test_pairwise_parses_letter(self):
        reranker = HttpPairwiseReranker(_client(["B"]), InferenceLedger())
        self.assertFalse(await reranker.prefer(QUERY, DOCS[0], DOCS[1]))


if __name__ == "__main__":
    unittest.main()
