import json
import tempfile
import unittest
from pathlib import Path

from config.settings_loader import ConfigError
from core.experiment import (
    build_config,
    compare,
    load_experiment_config,
    load_report,
    plan,
    run_experiment,
    split_queries,
    stability,
)
from core.metrics import MetricReport
from core.report_builder import FAILED_MARKER
from core.truncation import StageError

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SYNTH = {"kind": "synth", "synth": {"seed": 42, "num_queries": 10, "m": 40, "first_stage_quality": 1.0}}


def _config(policy, **overrides):
    raw = {"name": overrides.pop("name", policy["name"]), "first_stage": SYNTH, "policy": policy}
    raw.update(overrides)
    return build_config(raw, settings={})


def _report(name, qids, gain="exponential"):
    return MetricReport(
        name=name,
        per_query={q: {"ndcg@10": 0.5} for q in qids},
        aggregates={"nDCG@10": 0.5},
        evaluated_count=len(qids),
        config={"ks": [10], "map_k": 100, "threshold": 2, "gain": gain},
    )


class TestConfigLoading(unittest.TestCase):
    def test_shipped_experiment_file(self):
        config = load_experiment_config(PROJECT_ROOT / "config" / "experiments" / "psi-avg.yaml")
        self.assertEqual("psi-avg", config.name)
        self.assertEqual("psi-avg", config.policy.name)
        self.assertEqual(20, config.policy.w)
        self.assertEqual(0.2, config.policy.calibration_fraction)
        self.assertTrue(config.policy.needs_calibration)

    def test_settings_are_defaults_and_experiment_wins(self):
        settings = {"schedulers": {"w": 30, "stride": 15}, "metrics": {"ks": [5, 10]}}
        config = build_config({"name": "x", "policy": {"name": "sliding", "stride": 5}}, settings=settings)
        self.assertEqual(30, config.policy.w)
        self.assertEqual(5, config.policy.stride)
        self.assertEqual([5, 10], config.metrics.ks)

    def test_invalid_configs(self):
        bad = [
            {"name": "has space", "policy": {"name": "sliding"}},
            {"name": "x", "policy": {"name": "cascade"}},
            {"name": "x", "policy": {"name": "sliding", "w": 10, "stride": 11}},
            {"name": "x", "policy": {"name": "tdpart", "w": 10, "anchor_k": 11}},
            {"name": "x", "policy": {"name": "cascade", "stages": [{"mode": "Dyn", "scorer": "reranker"}]}},
            {
                "name": "x",
                "policy": {
                    "name": "cascade",
                    "stages": [{"mode": "Fixed", "k": 50, "reranker": "pairwise"}, {"mode": "Dyn", "scorer": "reranker"}],
                },
            },
            {"name": "x", "first_stage": {"kind": "bm25"}, "policy": {"name": "fixed-k"}},
            {"name": "x", "policy": {"name": "cascade", "stages": [{"mode": "Dyn"}, {"mode": "Dyn"}]}},
            {"name": "x", "policy": {"name": "cascade", "stages": [{"mode": "Dyn"}, {"mode": "Avg"}]}},
        ]
        for raw in bad:
            with self.assertRaises(ConfigError, msg=str(raw)):
                build_config(raw, settings={})

    def test_later_fixed_stage_may_keep_first_stage_scorer(self):
        config = build_config(
            {"name": "x", "policy": {"name": "cascade", "stages": [{"mode": "Dyn"}, {"mode": "Fixed", "k": 10}]}},
            settings={},
        )
        self.assertEqual(["Dyn", "Fixed"], [s.mode for s in config.policy.stage_configs])

    def test_missing_experiment_file(self):
        with self.assertRaises(FileNotFoundError):
            load_experiment_config(PROJECT_ROOT / "config" / "experiments" / "nope.yaml")

    def test_split_queries(self):
        self.assertEqual((["a", "b"], ["c", "d", "e", "f", "g", "h", "i", "j"]), split_queries(list("jihgfedcba"), 0.2))
        self.assertEqual(([], ["a", "b"]), split_queries(["b", "a"], 0.2))


class TestRunExperiment(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_fixed_k_full_depth_equals_oracle(self):
        result = run_experiment(_config({"name": "fixed-k", "k": 40}), self.out / "fixed")
        self.assertEqual(8, result.report.evaluated_count)
        self.assertAlmostEqual(1.0, result.report.aggregates["nDCG@10"])
        self.assertEqual(40.0, result.report.aggregates["IPQ"])
        self.assertNotIn("SU", result.report.aggregates)
        for name in ("run.txt", "trace.json", "report.json", "table.txt", "cutoffs.csv"):
            self.assertTrue((self.out / "fixed" / name).exists(), name)

    def test_psi_dyn_reranks_only_relevant_docs(self):
        result = run_experiment(_config({"name": "psi-dyn"}), self.out / "dyn")
        self.assertAlmostEqual(1.0, result.report.aggregates["nDCG@10"])
        # 40 Dokumente, davon 6 mit Grad >= 2
        self.assertEqual(6.0, result.report.aggregates["IPQ"])
        self.assertEqual([6] * 8, [d.cut_depth for d in result.decisions])

        with_pivot = run_experiment(
            _config({"name": "psi-dyn"}, metrics={"include_pivot_scoring": True}), self.out / "dyn-pivot"
        )
        self.assertEqual(7.0, with_pivot.report.aggregates["IPQ"])

    def test_psi_avg_calibrates_on_held_out_queries(self):
        result = run_experiment(_config({"name": "psi-avg"}), self.out / "avg")
        self.assertEqual(2, result.report.config["calibration_queries"])
        calibration_ids = ["q0", "q1"]
        for qid in calibration_ids:
            self.assertNotIn(qid, result.report.per_query)
            self.assertEqual(1, result.ledger.count(qid, "pivot_score"))
        self.assertAlmostEqual(1.0, result.report.aggregates["nDCG@10"])

    def test_cascade_on_reranker_scale(self):
        policy = {
            "name": "cascade",
            "stages": [
                {"mode": "Fixed", "k": 20, "reranker": "pointwise"},
                {"mode": "Dyn", "scorer": "reranker", "reranker": "pairwise"},
            ],
        }
        result = run_experiment(_config(policy), self.out / "cascade")
        self.assertEqual(16, len(result.decisions))
        self.assertEqual([20, 6], [d.cut_depth for d in result.decisions[:2]])
        # 20 Pointwise + C(6, 2) Pairwise pro Query
        self.assertEqual(35.0, result.report.aggregates["IPQ"])

    def test_schedulers_report_speedup(self):
        for name in ("sliding", "snow", "vs-sliding", "tdpart", "gptd-part"):
            result = run_experiment(_config({"name": name}), self.out / name)
            self.assertAlmostEqual(1.0, result.report.aggregates["nDCG@10"], msg=name)
            self.assertIn("SU", result.report.aggregates)
            if name == "sliding":
                self.assertEqual(3.0, result.report.aggregates["IPQ"])
                self.assertEqual(1.0, result.report.aggregates["SU"])

    def test_ipq_matches_trace_ledger(self):
        result = run_experiment(_config({"name": "snow"}), self.out / "snow")
        trace = json.loads((self.out / "snow" / "trace.json").read_text(encoding="utf-8"))
        qids = sorted(result.report.per_query)
        calls = sum(trace["ledger"][q].get("listwise", 0) for q in qids)
        self.assertAlmostEqual(result.report.aggregates["IPQ"], calls / len(qids))
        self.assertNotIn("batch_seconds", trace["traces"][qids[0]])
        self.assertEqual(3, trace["traces"][qids[0]]["listwise_calls"])

    def test_output_independent_of_concurrency(self):
        outputs = []
        for concurrency in (1, 8):
            config = _config(
                {"name": "vs-sliding"},
                name="det",
                first_stage={**SYNTH, "synth": {**SYNTH["synth"], "first_stage_quality": 0.5}},
                performance={"max_concurrent_queries": concurrency, "max_concurrent_windows": concurrency},
            )
            target = self.out / f"c{concurrency}"
            run_experiment(config, target)
            outputs.append([(target / f).read_bytes() for f in ("report.json", "run.txt", "trace.json")])
        self.assertEqual(outputs[0], outputs[1])

    def test_missing_qrels_fails_in_load_stage(self):
        (self.out / "run.txt").write_text("q1 Q0 d1 1 1.0 bm25\n", encoding="utf-8")
        (self.out / "queries.jsonl").write_text('{"id": "q1", "text": "solar"}\n', encoding="utf-8")
        config = build_config(
            {
                "name": "broken",
                "first_stage": {
                    "kind": "run-file",
                    "run": str(self.out / "run.txt"),
                    "queries": str(self.out / "queries.jsonl"),
                },
                "qrels": str(self.out / "missing.txt"),
                "policy": {"name": "sliding"},
            },
            settings={},
        )
        with self.assertRaises(StageError) as ctx:
            run_experiment(config, self.out / "broken")
        self.assertEqual("load", ctx.exception.stage)
        marker = (self.out / "broken" / FAILED_MARKER).read_text(encoding="utf-8")
        self.assertTrue(marker.startswith("stage: load\n"))
        self.assertFalse((self.out / "broken" / "report.json").exists())

    def test_success_clears_failed_marker(self):
        target = self.out / "again"
        target.mkdir()
        (target / FAILED_MARKER).write_text("stage: policy\n", encoding="utf-8")
        run_experiment(_config({"name": "sliding"}), target)
        self.assertFalse((target / FAILED_MARKER).exists())

    def test_report_round_trip_and_compare(self):
        run_experiment(_config({"name": "sliding"}), self.out / "a")
        run_experiment(_config({"name": "snow"}), self.out / "b")
        reports = [load_report(self.out / "a"), load_report(self.out / "b" / "report.json")]
        table = compare(reports)
        self.assertTrue(table.startswith("Pipeline"))
        self.assertIn("sliding", table)
        self.assertIn("snow", table)

    def test_stability_over_pivot_seeds(self):
        summary = stability(_config({"name": "psi-dyn"}), [1, 2], self.out / "stab")
        self.assertEqual([1, 2], summary["seeds"])
        self.assertEqual(2, len(summary["values"]))
        self.assertEqual(0.0, summary["spread"])
        self.assertTrue((self.out / "stab" / "stability.json").exists())
        self.assertTrue((self.out / "stab" / "seed-2" / "report.json").exists())
        with self.assertRaises(ConfigError):
            stability(_config({"name": "sliding"}), [1])


class TestCompare(unittest.TestCase):
    def test_rejects_different_query_sets(self):
        with self.assertRaises(ValueError):
            compare([_report("a", ["q1", "q2"]), _report("b", ["q1"])])

    def test_rejects_different_metric_settings(self):
        with self.assertRaises(ValueError):
            compare([_report("a", ["q1"]), _report("b", ["q1"], gain="linear")])

    def test_skipped_queries_count_towards_query_set(self):
        skipped = _report("b", ["q1"])
        skipped.skipped_query_ids.append("q2")
        self.assertIn("b", compare([_report("a", ["q1", "q2"]), skipped]))


class TestPlan(unittest.TestCase):
    def test_fixed_k_is_exact(self):
        result = plan(_config({"name": "fixed-k", "k": 30}))
        self.assertEqual("exact", result["bound"])
        self.assertEqual(8, result["test_queries"])
        self.assertEqual({"pointwise": 30}, result["per_query"]["q2"])
        self.assertEqual({"pointwise": 240}, result["totals"])

    def test_snow_without_verification_is_exact(self):
        result = plan(_config({"name": "snow"}, pivot={"verify": False}))
        self.assertEqual("exact", result["bound"])
        self.assertEqual({"pivot_gen": 1, "listwise": 3}, result["per_query"]["q2"])

    def test_dynamic_policies_are_upper_bounds(self):
        result = plan(_config({"name": "psi-avg"}))
        self.assertEqual("upper_bound", result["bound"])
        self.assertEqual(2, result["calibration_pivot_scores"])
        self.assertEqual({"pivot_gen": 3, "judge": 3, "pointwise": 40}, result["per_query"]["q2"])


if __name__ == "__main__":
    unittest.main()
