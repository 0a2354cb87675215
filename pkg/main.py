import argparse
import asyncio
import json
import sys
import time
from pathlib import Path

from loguru import logger

from config.settings_loader import load_settings, section
from core.bm25 import Bm25Params, build_index, load_index, retrieve, save_index
from core.experiment import (
    PipelineData,
    build_config,
    compare,
    load_experiment_config,
    load_report,
    make_pivots,
    plan,
    run_experiment,
    stability,
)
from core.metrics import MetricReport, evaluate_run, format_table
from core.models import Qrels
from core.report_builder import write_json
from core.rerankers import InferenceLedger
from core.synth import SynthSpec, generate_synth, write_synth
from utils.cache import PivotCache
from utils.preprocess import estimate_tokens
from utils.trec_io import read_documents, read_qrels, read_queries, read_run, write_run

# Logging-Konfiguration: Logs in Datei speichern
log_dir = Path(__file__).parent / "logs"
log_dir.mkdir(exist_ok=True)
logger.add(
    log_dir / "pivot_rerank.log",
    rotation="1 day",      # Täglich neue Datei
    retention="7 days",    # Alte Logs nach 7 Tagen löschen
    compression="zip",     # Alte Logs komprimieren
    encoding="utf-8",
    level="DEBUG",
)


# ---------------------------------------------------------
# Sub-Commands
# ---------------------------------------------------------
def cmd_index(args, settings):
    bm25 = section(settings, "bm25", {"k1": 0.9, "b": 0.4})
    params = Bm25Params(k1=args.k1 or bm25["k1"], b=args.b if args.b is not None else bm25["b"])
    index = build_index(read_documents(args.corpus), params)
    save_index(index, args.out)


def cmd_retrieve(args, settings):
    depth = args.depth or section(settings, "bm25", {"depth": 100})["depth"]
    index = load_index(args.index)
    run = {q.id: retrieve(index, q, depth) for q in read_queries(args.queries)}
    path = write_run(args.out, run, args.tag)
    logger.info(f"💾 Run ({len(run)} Queries, Tiefe {depth}) gespeichert unter: {path}")


def cmd_pivot(args, settings):
    overrides = {k: v for k, v in {"source": args.source, "tau": args.tau, "seed": args.seed}.items() if v is not None}
    if args.no_verify:
        overrides["verify"] = False
    config = build_config({"name": "pivot", "policy": {"name": "psi-dyn"}, "pivot": overrides}, settings)

    queries = {q.id: q for q in read_queries(args.queries)}
    corpus = read_documents(args.corpus) if args.corpus else []
    if config.pivot.source == "oracle" and not args.qrels:
        raise SystemExit("Oracle-Pivots brauchen --qrels")
    qrels = read_qrels(args.qrels) if args.qrels else Qrels()
    lengths = [estimate_tokens(d.text) for d in corpus]
    data = PipelineData(
        queries=queries,
        documents={d.id: d for d in corpus},
        qrels=qrels,
        run={},
        scorer=None,
        avgdl=sum(lengths) / len(lengths) if lengths else 0.0,
    )
    ledger = InferenceLedger()
    pivots = asyncio.run(make_pivots(config, data, sorted(queries), ledger, PivotCache(args.out)))
    verified = sum(1 for p in pivots.values() if p.verified_grade == config.pivot.tau)
    logger.info(f"📝 {len(pivots)} Pivots in {args.out} ({verified} mit Zielgrad {config.pivot.tau})")


def _pipeline_config(args, policy: dict) -> dict:
    first_stage = {"kind": "run-file", "run": args.run, "queries": args.queries}
    if args.corpus:
        first_stage["corpus"] = args.corpus
    return {
        "name": args.name,
        "first_stage": first_stage,
        "qrels": args.qrels,
        "policy": policy,
        "output_dir": args.out,
    }


def cmd_truncate(args, settings):
    policy = {"name": args.policy}
    if args.k is not None:
        policy["k"] = args.k
    if args.reranker:
        policy["reranker_kind"] = args.reranker
    config = build_config(_pipeline_config(args, policy), settings)
    result = run_experiment(config)
    print(format_table([result.report]), end="")


def cmd_rerank(args, settings):
    policy = {"name": args.method}
    for key in ("w", "stride", "s_max", "anchor_k"):
        value = getattr(args, key)
        if value is not None:
            policy[key] = value
    config = build_config(_pipeline_config(args, policy), settings)
    result = run_experiment(config)
    print(format_table([result.report]), end="")


def cmd_evaluate(args, settings):
    metrics = section(settings, "metrics", {"ks": [10], "map_k": 100, "threshold": 2, "gain": "exponential"})
    ks = args.k or metrics["ks"]
    map_k = args.map_k or metrics["map_k"]
    threshold = args.threshold if args.threshold is not None else metrics["threshold"]
    gain = args.gain or metrics["gain"]

    run = read_run(args.run)
    per_query, aggregates, skipped = evaluate_run(run, read_qrels(args.qrels), ks, map_k, threshold, gain)
    report = MetricReport(
        name=args.name or Path(args.run).stem,
        per_query=per_query,
        aggregates=aggregates,
        evaluated_count=len(per_query),
        skipped_query_ids=skipped,
        config={"ks": list(ks), "map_k": map_k, "threshold": threshold, "gain": gain},
    )
    if args.out:
        write_json(Path(args.out), report.model_dump())
    print(format_table([report]), end="")


def cmd_synth(args, settings):
    updates = {
        "seed": args.seed,
        "num_queries": args.num_queries,
        "m": args.m,
        "first_stage_quality": args.quality,
    }
    spec = SynthSpec(**{k: v for k, v in updates.items() if v is not None})
    write_synth(generate_synth(spec), args.out)


def cmd_experiment(args, settings):
    reports = []
    for path in args.configs:
        config = load_experiment_config(path, args.settings)
        if args.dry_run:
            print(json.dumps(plan(config), indent=2, sort_keys=True))
            continue
        if args.stability:
            summary = stability(config, args.stability)
            print(json.dumps(summary, indent=2, sort_keys=True))
            continue

        start_time = time.time()
        reports.append(run_experiment(config).report)
        logger.info(f"⏱️ {config.name} abgeschlossen, Dauer: {time.time() - start_time:.2f} Sekunden")

    if reports:
        print(format_table(reports), end="")


def cmd_compare(args, settings):
    print(compare([load_report(p) for p in args.reports]), end="")


# ---------------------------------------------------------
# Argumente
# ---------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Pivot-geführtes Truncation- und Listwise-Reranking")
    parser.add_argument("--settings", default=None, help="Pfad zu settings.yaml")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="BM25-Index aus JSONL-Korpus bauen")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="Top-m BM25-Retrieval als TREC-Run")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--depth", type=int)
    p.add_argument("--tag", default="bm25")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("pivot", help="Pivots erzeugen und verifizieren (JSONL-Cache)")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus")
    p.add_argument("--qrels")
    p.add_argument("--source", choices=["oracle", "http"])
    p.add_argument("--tau", type=int, choices=[0, 1, 2, 3])
    p.add_argument("--seed", type=int)
    p.add_argument("--no-verify", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pivot)

    for name, help_text in (("truncate", "PSI-Rank / Fixed-k auf einem Run"), ("rerank", "Listwise-Scheduler auf einem Run")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--run", required=True)
        p.add_argument("--queries", required=True)
        p.add_argument("--qrels", required=True)
        p.add_argument("--corpus")
        p.add_argument("--name", default=name)
        p.add_argument("--out", default="outputs")
        if name == "truncate":
            p.add_argument("--policy", choices=["fixed-k", "psi-dyn", "psi-avg"], default="psi-dyn")
            p.add_argument("--k", type=int)
            p.add_argument("--reranker", choices=["pointwise", "pairwise"])
            p.set_defaults(func=cmd_truncate)
        else:
            p.add_argument("--method", choices=["sliding", "snow", "vs-sliding", "tdpart", "gptd-part"], default="snow")
            p.add_argument("--w", type=int)
            p.add_argument("--stride", type=int)
            p.add_argument("--s-max", dest="s_max", type=int)
            p.add_argument("--anchor-k", dest="anchor_k", type=int)
            p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", help="nDCG/MAP für einen TREC-Run")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, action="append")
    p.add_argument("--map-k", dest="map_k", type=int)
    p.add_argument("--threshold", type=int, choices=[0, 1, 2, 3])
    p.add_argument("--gain", choices=["exponential", "linear"])
    p.add_argument("--name")
    p.add_argument("--out", help="MetricReport als JSON speichern")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="Synthetischen Benchmark erzeugen")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-queries", dest="num_queries", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--quality", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experiment", help="Experiment(e) aus YAML ausführen")
    p.add_argument("configs", nargs="+")
    p.add_argument("--dry-run", action="store_true", help="Nur geplante Backend-Aufrufe ausgeben")
    p.add_argument("--stability", type=int, nargs="+", metavar="SEED", help="Pivot-Stabilität über Seeds")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("compare", help="Reports als Tabelle vergleichen")
    p.add_argument("reports", nargs="+", help="report.json oder Experiment-Verzeichnis")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    settings = load_settings(args.settings)
    try:
        args.func(args, settings)
    except Exception as e:
        logger.exception(f"❌ {args.command} fehlgeschlagen: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
