import asyncio
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config.settings_loader import ConfigError, deep_merge, load_settings, section
from core.bm25 import Bm25Params, Bm25Scorer, build_index, insert_rank, load_index, retrieve
from core.llm_client import ChatBackendConfig, ChatClient
from core.metrics import CostModel, MetricReport, evaluate_run, format_table, ipq, speedup_over, wall_clock_speedup
from core.models import Document, Qrels, Query, RankedList
from core.pivot import (
    HttpJudge,
    HttpPivotGenerator,
    OracleJudge,
    OraclePivotGenerator,
    PivotDocument,
    generate_pivot,
    generate_verified_pivot,
    max_token_bound,
)
from core.report_builder import (
    clear_failed,
    mark_failed,
    write_histogram,
    write_json,
    write_report,
    write_table,
    write_traces,
)
from core.rerankers import (
    HttpListwiseReranker,
    HttpPairwiseReranker,
    HttpPointwiseReranker,
    InferenceLedger,
    NoiseModel,
    OracleReranker,
    StageReranker,
)
from core.schedulers import (
    METHODS,
    PIVOT_METHODS,
    ScheduleTrace,
    WindowSpec,
    baseline_trace,
    call_bound,
    run_scheduler,
)
from core.synth import SynthPivotScorer, SynthSpec, generate_synth
from core.truncation import (
    CalibrationStats,
    CascadeStage,
    RerankerScorer,
    StageError,
    TruncationDecision,
    calibrate_avg,
    cascade,
    cutoff_stats,
)
from utils.cache import PivotCache
from utils.preprocess import estimate_tokens
from utils.trec_io import read_documents, read_qrels, read_queries, read_run, write_run

TRUNCATION_POLICIES = ("fixed-k", "psi-dyn", "psi-avg", "cascade")
POLICIES = TRUNCATION_POLICIES + METHODS
PIVOT_LEDGER_KINDS = ("pivot_gen", "judge", "pivot_score")


# ---------------------------------------------------------
# Konfiguration
# ---------------------------------------------------------
class FirstStageConfig(BaseModel):
    kind: Literal["synth", "bm25", "run-file"] = "synth"
    corpus: Optional[str] = None
    queries: Optional[str] = None
    run: Optional[str] = None
    index: Optional[str] = None
    depth: int = Field(default=100, ge=1)
    k1: float = Field(default=0.9, gt=0)
    b: float = Field(default=0.4, ge=0, le=1)
    synth: SynthSpec = Field(default_factory=SynthSpec)

    @model_validator(mode="after")
    def _check_files(self) -> "FirstStageConfig":
        required = {"bm25": ("corpus", "queries"), "run-file": ("run", "queries")}.get(self.kind, ())
        for key in required:
            value = getattr(self, key)
            if not value:
                raise ValueError(f"first_stage.{key} fehlt für kind={self.kind}")
            if not Path(value).exists():
                raise ValueError(f"first_stage.{key} existiert nicht: {value}")
        return self


class PivotConfig(BaseModel):
    source: Literal["oracle", "http"] = "oracle"
    tau: int = Field(default=2, ge=0, le=3)
    min_len: int = Field(default=200, ge=1)
    max_len: int = Field(default=512, ge=1)
    max_attempts: int = Field(default=3, ge=1)
    verify: bool = True
    judge: Literal["oracle", "http"] = "oracle"
    temperature: float = Field(default=0.7, ge=0)
    top_p: float = Field(default=0.9, gt=0, le=1)
    seed: int = 42
    cache_path: Optional[str] = None


class StageConfig(BaseModel):
    mode: Literal["Dyn", "Avg", "Fixed"]
    scorer: Literal["first-stage", "reranker"] = "first-stage"
    reranker: Literal["pointwise", "pairwise"] = "pointwise"
    scheme: Literal["all-pairs", "single-pass"] = "all-pairs"
    k: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "StageConfig":
        if self.mode == "Fixed" and self.k is None:
            raise ValueError("Fixed-Stufe braucht k")
        return self


class PolicyConfig(BaseModel):
    name: Literal[POLICIES]
    k: int = Field(default=100, ge=0)
    reranker_kind: Literal["pointwise", "pairwise"] = "pointwise"
    pairwise_scheme: Literal["all-pairs", "single-pass"] = "all-pairs"
    stages: List[StageConfig] = Field(default_factory=list)
    w: int = Field(default=20, ge=2)
    stride: int = Field(default=10, ge=1)
    s_max: Optional[int] = None
    anchor_k: int = Field(default=10, ge=1)
    calibration_fraction: float = Field(default=0.2, ge=0, lt=1)

    @model_validator(mode="after")
    def _check(self) -> "PolicyConfig":
        if self.name == "cascade" and not self.stages:
            raise ValueError("cascade braucht mindestens eine Stufe")
        for idx, stage in enumerate(self.stage_configs):
            if stage.scorer == "reranker":
                if idx == 0:
                    raise ValueError("Die erste Stufe muss auf der Erststufen-Skala schneiden")
                if self.stage_configs[idx - 1].reranker != "pointwise":
                    raise ValueError(f"Stufe {idx}: Reranker-Skala braucht einen Pointwise-Reranker davor")
            elif idx > 0 and stage.mode != "Fixed":
                # nach psi_rank tragen die Scores nur noch Rangpositionen
                raise ValueError(f"Stufe {idx}: {stage.mode} braucht scorer=reranker")
        if self.name in METHODS:
            self.window_spec()
            if self.anchor_k > self.w:
                raise ValueError(f"anchor_k {self.anchor_k} größer als w {self.w}")
        return self

    @property
    def stage_configs(self) -> List[StageConfig]:
        single = {"fixed-k": "Fixed", "psi-dyn": "Dyn", "psi-avg": "Avg"}
        if self.name in single:
            return [
                StageConfig(
                    mode=single[self.name],
                    reranker=self.reranker_kind,
                    scheme=self.pairwise_scheme,
                    k=self.k if self.name == "fixed-k" else None,
                )
            ]
        return list(self.stages) if self.name == "cascade" else []

    @property
    def needs_pivot(self) -> bool:
        return self.name in PIVOT_METHODS or any(s.mode in ("Dyn", "Avg") for s in self.stage_configs)

    @property
    def needs_calibration(self) -> bool:
        return any(s.mode == "Avg" for s in self.stage_configs)

    def window_spec(self) -> WindowSpec:
        return WindowSpec(w=self.w, stride=self.stride, s_max=self.s_max)


class BackendSettings(BaseModel):
    kind: Literal["oracle", "http"] = "oracle"
    oracle: NoiseModel = Field(default_factory=NoiseModel)
    http: ChatBackendConfig = Field(default_factory=ChatBackendConfig)


class MetricsConfig(BaseModel):
    ks: List[int] = Field(default_factory=lambda: [10])
    map_k: int = Field(default=100, ge=1)
    threshold: int = Field(default=2, ge=0, le=3)
    gain: Literal["exponential", "linear"] = "exponential"
    include_pivot_scoring: bool = False
    su_mode: Literal["modeled", "wall_clock"] = "modeled"

    @model_validator(mode="after")
    def _check(self) -> "MetricsConfig":
        if not self.ks or any(k < 1 for k in self.ks):
            raise ValueError(f"ks müssen >= 1 sein: {self.ks}")
        return self


class PerformanceConfig(BaseModel):
    max_concurrent_queries: int = Field(default=4, ge=1)
    max_concurrent_windows: int = Field(default=8, ge=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.-]+$")
    first_stage: FirstStageConfig = Field(default_factory=FirstStageConfig)
    qrels: Optional[str] = None
    pivot: PivotConfig = Field(default_factory=PivotConfig)
    policy: PolicyConfig
    backend: BackendSettings = Field(default_factory=BackendSettings)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    cost_model: CostModel = Field(default_factory=CostModel)
    performance: PerformanceConfig = Field(default_factory=PerformanceConfig)
    output_dir: str = "outputs"


def settings_defaults(settings: Mapping[str, Any]) -> Dict[str, Any]:
    """Übersetzt settings.yaml in die Struktur von ExperimentConfig."""
    bm25 = section(settings, "bm25")
    schedulers = section(settings, "schedulers")
    truncation = section(settings, "truncation")
    return {
        "first_stage": {k: bm25[k] for k in ("k1", "b", "depth") if k in bm25},
        "pivot": section(settings, "pivot"),
        "policy": {
            **{k: schedulers[k] for k in ("w", "stride", "s_max", "anchor_k") if k in schedulers},
            **{k: truncation[k] for k in ("reranker_kind", "pairwise_scheme", "calibration_fraction") if k in truncation},
            **({"k": truncation["fixed_k"]} if "fixed_k" in truncation else {}),
        },
        "backend": section(settings, "backends"),
        "metrics": section(settings, "metrics"),
        "cost_model": section(settings, "cost_model"),
        "performance": section(settings, "performance"),
        "output_dir": section(settings, "paths").get("output_dir", "outputs"),
    }


def build_config(raw: Mapping[str, Any], settings: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    settings = load_settings() if settings is None else settings
    merged = deep_merge(settings_defaults(settings), raw)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Ungültige Experiment-Konfiguration: {e}") from e


def load_experiment_config(path: Union[str, Path], settings_path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Experiment-Konfiguration fehlt: {path}")
    with path.open("r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} muss ein YAML-Mapping enthalten")
    raw.setdefault("name", path.stem)
    return build_config(raw, load_settings(settings_path))


# ---------------------------------------------------------
# Daten der ersten Stufe
# ---------------------------------------------------------
@dataclass
class PipelineData:
    queries: Dict[str, Query]
    documents: Dict[str, Document]
    qrels: Qrels
    run: Dict[str, RankedList]
    scorer: Any
    avgdl: float


def load_data(config: ExperimentConfig) -> PipelineData:
    fs = config.first_stage
    if fs.kind == "synth":
        bundle = generate_synth(fs.synth)
        documents = {d.id: d for d in bundle.corpus}
        return PipelineData(
            queries={q.id: q for q in bundle.queries},
            documents=documents,
            qrels=bundle.qrels,
            run=bundle.run,
            scorer=SynthPivotScorer(fs.synth.first_stage_quality, fs.synth.seed),
            avgdl=_avgdl(documents.values()),
        )

    # Qrels vor jedem Backend-Aufruf prüfen
    if not config.qrels or not Path(config.qrels).exists():
        raise FileNotFoundError(f"Qrels fehlen: {config.qrels}")
    qrels = read_qrels(config.qrels)
    queries = {q.id: q for q in read_queries(fs.queries)}

    if fs.kind == "bm25":
        corpus = read_documents(fs.corpus)
        if fs.index and Path(fs.index).exists():
            index = load_index(fs.index)
        else:
            index = build_index(corpus, Bm25Params(k1=fs.k1, b=fs.b))
        run = {qid: retrieve(index, q, fs.depth) for qid, q in sorted(queries.items())}
        logger.info(f"🔎 BM25-Retrieval: {len(run)} Queries, Tiefe {fs.depth}")
        return PipelineData(queries, {d.id: d for d in corpus}, qrels, run, Bm25Scorer(index), index.avgdl)

    run = {
        qid: RankedList(query_id=qid, entries=lst.entries[: fs.depth], diagnostics=lst.diagnostics)
        for qid, lst in read_run(fs.run).items()
        if qid in queries
    }
    corpus = read_documents(fs.corpus) if fs.corpus else []
    scorer = Bm25Scorer(build_index(corpus, Bm25Params(k1=fs.k1, b=fs.b))) if corpus else None
    return PipelineData(queries, {d.id: d for d in corpus}, qrels, run, scorer, _avgdl(corpus))


def _avgdl(documents) -> float:
    lengths = [estimate_tokens(d.text) for d in documents]
    return sum(lengths) / len(lengths) if lengths else 0.0


def split_queries(query_ids: Sequence[str], fraction: float) -> Tuple[List[str], List[str]]:
    """Die ersten `fraction` der sortierten IDs kalibrieren, der Rest wird getestet."""
    ids = sorted(query_ids)
    n_cal = math.floor(fraction * len(ids))
    return ids[:n_cal], ids[n_cal:]


# ---------------------------------------------------------
# Backends
# ---------------------------------------------------------
def build_backends(config: ExperimentConfig, data: PipelineData, ledger: InferenceLedger) -> Dict[str, Any]:
    if config.backend.kind == "oracle":
        oracle = OracleReranker(
            data.qrels, data.run, ledger, noise=config.backend.oracle, pivot_grade=config.pivot.tau - 0.25
        )
        return {"pointwise": oracle, "pairwise": oracle, "listwise": oracle}

    client = ChatClient(config.backend.http)
    return {
        "pointwise": HttpPointwiseReranker(client, ledger),
        "pairwise": HttpPairwiseReranker(client, ledger),
        "listwise": HttpListwiseReranker(client, ledger),
    }


def build_pivot_components(config: ExperimentConfig, data: PipelineData, seed: Optional[int] = None):
    pc = config.pivot
    seed = pc.seed if seed is None else seed
    if pc.source == "oracle":
        generator = OraclePivotGenerator(data.qrels, list(data.documents.values()), seed=seed)
    else:
        generator = HttpPivotGenerator(ChatClient(config.backend.http), pc.temperature, pc.top_p, seed)
    judge = OracleJudge() if pc.judge == "oracle" else HttpJudge(ChatClient(config.backend.http))
    return generator, judge


async def make_pivots(
    config: ExperimentConfig,
    data: PipelineData,
    query_ids: Sequence[str],
    ledger: InferenceLedger,
    cache: Optional[PivotCache] = None,
    seed: Optional[int] = None,
) -> Dict[str, PivotDocument]:
    pc = config.pivot
    generator, judge = build_pivot_components(config, data, seed)
    length_hint = max_token_bound(data.avgdl, pc.min_len, pc.max_len)
    semaphore = asyncio.Semaphore(config.performance.max_concurrent_queries)

    async def _one(qid: str) -> PivotDocument:
        query = data.queries[qid]

        async def _factory() -> PivotDocument:
            if pc.verify:
                return await generate_verified_pivot(
                    generator, judge, query, pc.tau, pc.max_attempts, length_hint, ledger
                )
            return await generate_pivot(generator, query, pc.tau, length_hint, ledger)

        async with semaphore:
            if cache is None:
                return await _factory()
            return await cache.get_or_create(qid, pc.tau, generator.generator_id, _factory)

    pivots = await asyncio.gather(*(_one(q) for q in query_ids))
    logger.info(f"📝 {len(pivots)} Pivots bereit ({generator.generator_id})")
    return dict(zip(query_ids, pivots))


# ---------------------------------------------------------
# Policies
# ---------------------------------------------------------
def _stage_scorer(stage: StageConfig, data: PipelineData, backends: Mapping[str, Any]):
    if stage.scorer == "reranker":
        return RerankerScorer(backends["pointwise"])
    if data.scorer is None:
        raise ConfigError("Pivot-Scoring auf Erststufen-Skala braucht einen Korpus (first_stage.corpus)")
    return data.scorer


async def calibrate_stages(
    config: ExperimentConfig,
    data: PipelineData,
    scorers: Sequence[Any],
    pivots: Mapping[str, PivotDocument],
    cal_ids: Sequence[str],
    test_ids: Sequence[str],
    ledger: InferenceLedger,
) -> List[Optional[CalibrationStats]]:
    stats: List[Optional[CalibrationStats]] = []
    for stage, scorer in zip(config.policy.stage_configs, scorers):
        if stage.mode != "Avg":
            stats.append(None)
            continue
        scores = {}
        for qid in cal_ids:
            scores[qid] = await scorer.score_pivot(data.queries[qid], pivots[qid].as_document())
            ledger.record(qid, "pivot_score")
        stats.append(calibrate_avg(cal_ids, scores, scorer.scorer_id, test_ids))
    return stats


@dataclass
class PolicyOutcome:
    run: Dict[str, RankedList] = field(default_factory=dict)
    traces: Dict[str, ScheduleTrace] = field(default_factory=dict)
    decisions: List[TruncationDecision] = field(default_factory=list)


async def run_policy(
    config: ExperimentConfig,
    data: PipelineData,
    test_ids: Sequence[str],
    backends: Mapping[str, Any],
    pivots: Mapping[str, PivotDocument],
    calibration: Sequence[Optional[CalibrationStats]] = (),
) -> PolicyOutcome:
    policy = config.policy
    query_sem = asyncio.Semaphore(config.performance.max_concurrent_queries)
    window_sem = asyncio.Semaphore(config.performance.max_concurrent_windows)
    outcome = PolicyOutcome()

    stages_cfg = policy.stage_configs
    scorers = [_stage_scorer(s, data, backends) for s in stages_cfg]
    calibration = list(calibration) or [None] * len(stages_cfg)

    async def _truncate(qid: str):
        stages = [
            CascadeStage(
                scorer,
                s.mode,
                StageReranker(backends[s.reranker], s.reranker, s.scheme),
                calibration=cal,
                k=s.k,
            )
            for s, scorer, cal in zip(stages_cfg, scorers, calibration)
        ]
        pivot = pivots[qid].as_document() if qid in pivots else None
        return await cascade(data.run[qid], stages, data.queries[qid], data.documents, pivot)

    async def _schedule(qid: str):
        query = data.queries[qid]
        ranked = data.run[qid]
        pivot = pivots[qid].as_document() if policy.name in PIVOT_METHODS else None
        pivot_rank = None
        if policy.name == "gptd-part":
            if data.scorer is None:
                raise ConfigError("gptd-part braucht einen Erststufen-Scorer für die Pivot-Position")
            threshold = await data.scorer.score_pivot(query, pivot)
            backends["listwise"].ledger.record(qid, "pivot_score")
            pivot_rank = insert_rank(ranked, threshold)
        return await run_scheduler(
            policy.name,
            backends["listwise"],
            ranked,
            query,
            data.documents,
            policy.window_spec(),
            pivot,
            pivot_rank,
            policy.anchor_k,
            window_sem,
        )

    async def _one(qid: str):
        async with query_sem:
            if policy.name in TRUNCATION_POLICIES:
                return await _truncate(qid)
            return await _schedule(qid)

    results = await asyncio.gather(*(_one(q) for q in test_ids))
    # Einsammeln nach Query-ID, nicht nach Fertigstellung
    for qid, (ranked, extra) in zip(test_ids, results):
        outcome.run[qid] = ranked
        if policy.name in TRUNCATION_POLICIES:
            outcome.decisions.extend(extra)
        else:
            outcome.traces[qid] = extra
    return outcome


# ---------------------------------------------------------
# Experiment
# ---------------------------------------------------------
@dataclass
class ExperimentResult:
    report: MetricReport
    out_dir: Path
    run: Dict[str, RankedList]
    traces: Dict[str, ScheduleTrace]
    decisions: List[TruncationDecision]
    ledger: InferenceLedger


def _metrics_echo(config: ExperimentConfig, cal_ids: Sequence[str]) -> Dict[str, Any]:
    return {
        "policy": config.policy.name,
        "ks": list(config.metrics.ks),
        "map_k": config.metrics.map_k,
        "threshold": config.metrics.threshold,
        "gain": config.metrics.gain,
        "include_pivot_scoring": config.metrics.include_pivot_scoring,
        "su_mode": config.metrics.su_mode,
        "cost_model": config.cost_model.model_dump(),
        "calibration_queries": len(cal_ids),
    }


def _pivot_cost(ledger: InferenceLedger, query_ids: Sequence[str], cost: CostModel) -> float:
    return sum(ledger.count(q, k) * cost.weight(k) for q in query_ids for k in PIVOT_LEDGER_KINDS)


async def run_experiment_async(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    out_dir = Path(out_dir) if out_dir else Path(config.output_dir) / config.name
    clear_failed(out_dir)
    ledger = InferenceLedger(cost_units=config.cost_model.weights)
    outcome = PolicyOutcome()
    policy = config.policy

    stage = "load"
    try:
        data = load_data(config)
        qids = sorted(set(data.run) & set(data.queries))
        cal_ids, test_ids = split_queries(qids, policy.calibration_fraction)
        if policy.needs_calibration and not cal_ids:
            raise ConfigError("Avg-Stufe braucht Kalibrierungsqueries (calibration_fraction > 0)")
        if not test_ids:
            raise ConfigError("Keine Testqueries übrig")

        stage = "pivot"
        pivots: Dict[str, PivotDocument] = {}
        pivot_seconds = 0.0
        if policy.needs_pivot:
            need = sorted(set(test_ids) | (set(cal_ids) if policy.needs_calibration else set()))
            cache = PivotCache(config.pivot.cache_path) if config.pivot.cache_path else None
            started = time.perf_counter()
            pivots = await make_pivots(config, data, need, ledger, cache)
            pivot_seconds = time.perf_counter() - started

        backends = build_backends(config, data, ledger)

        stage = "calibration"
        calibration: List[Optional[CalibrationStats]] = []
        if policy.needs_calibration:
            scorers = [_stage_scorer(s, data, backends) for s in policy.stage_configs]
            calibration = await calibrate_stages(config, data, scorers, pivots, cal_ids, test_ids, ledger)

        stage = "policy"
        logger.info(f"🚀 {config.name}: {policy.name} auf {len(test_ids)} Queries")
        outcome = await run_policy(config, data, test_ids, backends, pivots, calibration)

        stage = "evaluate"
        m = config.metrics
        per_query, aggregates, skipped = evaluate_run(
            outcome.run, data.qrels, m.ks, m.map_k, m.threshold, m.gain, query_ids=test_ids
        )
        evaluated = sorted(per_query)
        if not evaluated:
            raise ValueError("Keine Testquery hat Qrels")
        aggregates["IPQ"] = ipq(ledger, evaluated, include_pivot_scoring=m.include_pivot_scoring)
        if policy.name in METHODS:
            aggregates["SU"] = await _speedup(config, data, evaluated, outcome, ledger, pivot_seconds)

        report = MetricReport(
            name=config.name,
            per_query=per_query,
            aggregates=aggregates,
            evaluated_count=len(evaluated),
            skipped_query_ids=skipped,
            config=_metrics_echo(config, cal_ids),
        )
        if skipped:
            logger.warning(f"⚠️ {len(skipped)} Queries ohne Qrels übersprungen")

        stage = "write"
        _write_artifacts(config, out_dir, outcome, ledger)
        write_report(out_dir, report)
        write_table(out_dir, [report])
    except Exception as exc:
        logger.error(f"❌ {config.name}: Stufe '{stage}' fehlgeschlagen: {exc}")
        try:
            _write_artifacts(config, out_dir, outcome, ledger)
        except Exception as e:
            logger.error(f"Teilartefakte konnten nicht geschrieben werden: {e}")
        mark_failed(out_dir, stage, exc)
        raise StageError(f"Stufe '{stage}' fehlgeschlagen: {exc}", stage) from exc

    summary = ", ".join(f"{k}={v:.4f}" for k, v in aggregates.items() if v is not None)
    logger.info(f"✅ {config.name}: {summary}")
    return ExperimentResult(report, out_dir, outcome.run, outcome.traces, outcome.decisions, ledger)


def run_experiment(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    return asyncio.run(run_experiment_async(config, out_dir))


async def _speedup(
    config: ExperimentConfig,
    data: PipelineData,
    query_ids: Sequence[str],
    outcome: PolicyOutcome,
    ledger: InferenceLedger,
    pivot_seconds: float,
) -> float:
    method_traces = [outcome.traces[q] for q in query_ids]
    uses_pivot = config.policy.name in PIVOT_METHODS

    if config.metrics.su_mode == "modeled":
        spec = config.policy.window_spec()
        baseline = [baseline_trace(q, data.run[q].depth, spec) for q in query_ids]
        pivot_cost = _pivot_cost(ledger, query_ids, config.cost_model) if uses_pivot else 0.0
        return speedup_over(method_traces, baseline, config.cost_model, pivot_cost)

    # Wall-Clock: Baseline real ausführen, mit eigenem Ledger
    baseline_backends = build_backends(config, data, InferenceLedger())
    sliding_cfg = config.model_copy(update={"policy": config.policy.model_copy(update={"name": "sliding"})})
    baseline = await run_policy(sliding_cfg, data, query_ids, baseline_backends, {})
    return wall_clock_speedup(
        method_traces, [baseline.traces[q] for q in query_ids], pivot_seconds if uses_pivot else 0.0
    )


def _write_artifacts(config: ExperimentConfig, out_dir: Path, outcome: PolicyOutcome, ledger: InferenceLedger) -> None:
    if outcome.run:
        write_run(out_dir / "run.txt", outcome.run, config.name)
    cutoffs = cutoff_stats(outcome.decisions) if outcome.decisions else None
    write_traces(
        out_dir,
        outcome.traces,
        ledger.snapshot(),
        decisions=cutoffs["per_query"] if cutoffs else None,
        include_timing=config.metrics.su_mode == "wall_clock",
    )
    if cutoffs:
        write_histogram(out_dir, cutoffs)


# ---------------------------------------------------------
# Vergleich, Dry-Run, Stabilität
# ---------------------------------------------------------
_COMPARED_KEYS = ("ks", "map_k", "threshold", "gain")


def compare(reports: Sequence[MetricReport]) -> str:
    if not reports:
        raise ValueError("Keine Reports zum Vergleichen")
    first = reports[0]
    query_set = set(first.per_query) | set(first.skipped_query_ids)
    for r in reports[1:]:
        if set(r.per_query) | set(r.skipped_query_ids) != query_set:
            raise ValueError(f"Report {r.name!r} hat eine andere Querymenge als {first.name!r}")
        for key in _COMPARED_KEYS:
            if r.config.get(key) != first.config.get(key):
                raise ValueError(f"Report {r.name!r}: Metrik-Konfiguration '{key}' weicht ab")
    return format_table(reports)


def load_report(path: Union[str, Path]) -> MetricReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"Report fehlt: {path}")
    return MetricReport.model_validate_json(path.read_text(encoding="utf-8"))


def _rerank_calls(kind: str, scheme: str, n: int) -> int:
    if kind == "pointwise":
        return n
    if scheme == "single-pass":
        return max(0, n - 1)
    return n * (n - 1) // 2


def plan(config: ExperimentConfig) -> Dict[str, Any]:
    """Geplante Backend-Aufrufe pro Query, ohne ein Backend anzufassen."""
    data = load_data(config)
    policy = config.policy
    qids = sorted(set(data.run) & set(data.queries))
    cal_ids, test_ids = split_queries(qids, policy.calibration_fraction)
    exact = True
    per_query: Dict[str, Dict[str, int]] = {}

    for qid in test_ids:
        depth = data.run[qid].depth
        counts: Dict[str, int] = {}
        if policy.needs_pivot:
            attempts = config.pivot.max_attempts if config.pivot.verify else 1
            counts["pivot_gen"] = attempts
            if config.pivot.verify:
                counts["judge"] = attempts
                exact = exact and attempts == 1

        if policy.name in METHODS:
            calls, is_exact = call_bound(policy.name, depth, policy.window_spec(), policy.anchor_k)
            counts["listwise"] = calls
            exact = exact and is_exact
            if policy.name == "gptd-part":
                counts["pivot_score"] = 1
        else:
            n = depth
            for stage in policy.stage_configs:
                if stage.mode == "Fixed":
                    n = min(stage.k, n)
                else:
                    exact = False
                    if stage.mode == "Dyn":
                        counts["pivot_score"] = counts.get("pivot_score", 0) + 1
                counts[stage.reranker] = counts.get(stage.reranker, 0) + _rerank_calls(stage.reranker, stage.scheme, n)
        per_query[qid] = counts

    totals: Dict[str, int] = {}
    for counts in per_query.values():
        for kind, n in counts.items():
            totals[kind] = totals.get(kind, 0) + n
    calibration_calls = len(cal_ids) if policy.needs_calibration else 0

    return {
        "name": config.name,
        "policy": policy.name,
        "bound": "exact" if exact else "upper_bound",
        "test_queries": len(test_ids),
        "calibration_queries": len(cal_ids),
        "calibration_pivot_scores": calibration_calls * sum(1 for s in policy.stage_configs if s.mode == "Avg"),
        "per_query": per_query,
        "totals": totals,
    }


def stability(config: ExperimentConfig, seeds: Sequence[int], out_dir: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Dieselbe Pipeline mit verschiedenen Pivot-Seeds; Streuung von nDCG@k."""
    if not config.policy.needs_pivot:
        raise ConfigError(f"Policy {config.policy.name} nutzt keinen Pivot")
    if not seeds:
        raise ValueError("Mindestens ein Seed nötig")

    base = Path(out_dir) if out_dir else Path(config.output_dir) / f"{config.name}-stability"
    metric = f"nDCG@{config.metrics.ks[0]}"
    values = []
    for seed in seeds:
        seeded = config.model_copy(update={"pivot": config.pivot.model_copy(update={"seed": seed})})
        result = run_experiment(seeded, base / f"seed-{seed}")
        values.append(result.report.aggregates[metric])
        logger.info(f"🎲 Seed {seed}: {metric}={values[-1]:.4f}")

    summary = {
        "metric": metric,
        "seeds": list(seeds),
        "values": values,
        "mean": statistics.fmean(values),
        "stdev": statistics.pstdev(values),
        "spread": max(values) - min(values),
    }
    write_json(base / "stability.json", summary)
    return summary
