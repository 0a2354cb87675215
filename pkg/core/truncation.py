import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.models import Document, Query, RankedList, ScoredDoc
from core.rerankers import StageReranker

Mode = Literal["Dyn", "Avg", "Fixed"]


class StageError(RuntimeError):
    def __init__(self, message: str, stage: str, stage_index: Optional[int] = None):
        super().__init__(message)
        self.stage = stage
        self.stage_index = stage_index


class TruncationDecision(BaseModel):
    model_config = ConfigDict(frozen=True)

    query_id: str
    mode: Mode
    threshold: float
    cut_depth: int = Field(ge=0)
    d_plus_ids: Tuple[str, ...]
    d_minus_ids: Tuple[str, ...]

    @model_validator(mode="after")
    def _check(self) -> "TruncationDecision":
        if self.cut_depth != len(self.d_plus_ids):
            raise ValueError("cut_depth muss |d_plus| entsprechen")
        if set(self.d_plus_ids) & set(self.d_minus_ids):
            raise ValueError("d_plus und d_minus überschneiden sich")
        return self


class CalibrationStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    theta_bar: float
    scorer_id: str
    calibration_query_ids: Tuple[str, ...]
    per_query_scores: Dict[str, float]

    @model_validator(mode="after")
    def _check(self) -> "CalibrationStats":
        if not self.per_query_scores:
            raise ValueError("Kalibrierung ohne Queries")
        if set(self.calibration_query_ids) != set(self.per_query_scores):
            raise ValueError("calibration_query_ids passen nicht zu per_query_scores")
        mean = sum(self.per_query_scores.values()) / len(self.per_query_scores)
        if not math.isclose(mean, self.theta_bar, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"theta_bar {self.theta_bar} ist nicht der Mittelwert {mean}")
        return self


# ---------------------------------------------------------
# Partitionierung
# ---------------------------------------------------------
def partition_dyn(ranked: RankedList, pivot_score: float, mode: str = "Dyn") -> TruncationDecision:
    """Score >= Schwelle landet in d_plus (Gleichstand zählt als oberhalb)."""
    d_plus = [e.doc_id for e in ranked.entries if e.score >= pivot_score]
    d_minus = [e.doc_id for e in ranked.entries if e.score < pivot_score]
    return TruncationDecision(
        query_id=ranked.query_id,
        mode=mode,
        threshold=pivot_score,
        cut_depth=len(d_plus),
        d_plus_ids=tuple(d_plus),
        d_minus_ids=tuple(d_minus),
    )


def partition_avg(ranked: RankedList, stats: CalibrationStats, scorer_id: Optional[str] = None) -> TruncationDecision:
    if scorer_id is not None and scorer_id != stats.scorer_id:
        raise ValueError(f"Kalibrierung für Scorer {stats.scorer_id!r}, nicht für {scorer_id!r}")
    return partition_dyn(ranked, stats.theta_bar, mode="Avg")


def fixed_k(ranked: RankedList, k: int) -> TruncationDecision:
    if k < 0:
        raise ValueError(f"k muss >= 0 sein, erhalten: {k}")
    ids = ranked.doc_ids
    return TruncationDecision(
        query_id=ranked.query_id,
        mode="Fixed",
        threshold=math.inf,
        cut_depth=min(k, len(ids)),
        d_plus_ids=tuple(ids[:k]),
        d_minus_ids=tuple(ids[k:]),
    )


# ---------------------------------------------------------
# Kalibrierung (PSI-Rank Avg)
# ---------------------------------------------------------
def calibrate_avg(
    calibration_ids: Iterable[str],
    pivot_scores: Mapping[str, float],
    scorer_id: str = "bm25",
    test_query_ids: Iterable[str] = (),
) -> CalibrationStats:
    ids = sorted(set(calibration_ids))
    if not ids:
        raise ValueError("Leere Kalibrierungsmenge")
    overlap = set(ids) & set(test_query_ids)
    if overlap:
        raise ValueError(f"Kalibrierungs- und Testqueries überschneiden sich: {sorted(overlap)[:5]}")
    missing = [q for q in ids if q not in pivot_scores]
    if missing:
        raise ValueError(f"Pivot-Scores fehlen für Kalibrierungsqueries: {missing[:5]}")

    scores = {q: float(pivot_scores[q]) for q in ids}
    theta_bar = sum(scores.values()) / len(scores)
    logger.info(f"📏 Kalibrierung ({scorer_id}): theta_bar={theta_bar:.4f} über {len(ids)} Queries")
    return CalibrationStats(
        theta_bar=theta_bar,
        scorer_id=scorer_id,
        calibration_query_ids=tuple(ids),
        per_query_scores=scores,
    )


def save_calibration(stats: CalibrationStats, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stats.model_dump(), indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_calibration(path: Union[str, Path]) -> CalibrationStats:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Kalibrierungsdatei fehlt: {path}")
    return CalibrationStats.model_validate(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------
# Reranking von d_plus
# ---------------------------------------------------------
async def psi_rank(
    ranked: RankedList,
    decision: TruncationDecision,
    reranker: StageReranker,
    query: Query,
    documents: Mapping[str, Document],
) -> RankedList:
    """Z = rerank(d_plus), Ausgabe Z + d_minus mit synthetischen Scores m..1."""
    if decision.query_id != ranked.query_id or sorted(decision.d_plus_ids + decision.d_minus_ids) != sorted(
        ranked.doc_ids
    ):
        raise ValueError(f"Entscheidung passt nicht zur Liste {ranked.query_id}")
    if decision.cut_depth == 0:
        return ranked

    docs = [documents.get(d) or Document(id=d) for d in decision.d_plus_ids]
    reranked = await reranker.rerank(query, docs)

    diagnostics = {k: v for k, v in ranked.diagnostics.items() if k != "reranker_score"}
    diagnostics["reranker_score"] = {d: s for d, s in reranked}
    ids = [d for d, _ in reranked] + list(decision.d_minus_ids)
    return RankedList.from_ids(ranked.query_id, ids, diagnostics)


# ---------------------------------------------------------
# Kaskade
# ---------------------------------------------------------
class RerankerScorer:
    """Stage-Scorer auf Reranker-Skala; Dokument-Scores stammen aus der Vorstufe."""

    def __init__(self, backend):
        self.backend = backend
        self.scorer_id = f"reranker:{backend.backend_id}"

    async def score_pivot(self, query: Query, pivot: Document) -> float:
        return await self.backend.score(query, pivot)

    def doc_scores(self, ranked: RankedList) -> Dict[str, float]:
        return dict(ranked.diagnostics.get("reranker_score", {}))


class CascadeStage:
    def __init__(
        self,
        scorer,
        mode: str,
        reranker: StageReranker,
        calibration: Optional[CalibrationStats] = None,
        k: Optional[int] = None,
    ):
        if mode not in ("Dyn", "Avg", "Fixed"):
            raise ValueError(f"Unbekannter Modus: {mode}")
        if mode == "Avg" and calibration is None:
            raise ValueError("Avg-Stufe braucht CalibrationStats")
        if mode == "Fixed" and k is None:
            raise ValueError("Fixed-Stufe braucht k")
        self.scorer = scorer
        self.mode = mode
        self.reranker = reranker
        self.calibration = calibration
        self.k = k


async def decide(
    stage: CascadeStage, current: RankedList, query: Query, pivot: Optional[Document]
) -> TruncationDecision:
    scores = stage.scorer.doc_scores(current)
    # stabil nach Score, Gleichstand behält die Listenreihenfolge
    pairs = sorted(((d, scores[d]) for d in current.doc_ids if d in scores), key=lambda x: -x[1])
    scored = RankedList(query_id=current.query_id, entries=tuple(ScoredDoc(doc_id=d, score=s) for d, s in pairs))

    if stage.mode == "Fixed":
        decision = fixed_k(scored, stage.k)
    elif stage.mode == "Avg":
        decision = partition_avg(scored, stage.calibration, stage.scorer.scorer_id)
    else:
        if pivot is None:
            raise ValueError(f"Dyn-Stufe ohne Pivot für Query {query.id}")
        threshold = await stage.scorer.score_pivot(query, pivot)
        stage.reranker.ledger.record(query.id, "pivot_score")
        decision = partition_dyn(scored, threshold)

    # nicht bewertete Dokumente (Tail der Vorstufe) bleiben unterhalb
    plus = set(decision.d_plus_ids)
    return decision.model_copy(update={"d_minus_ids": tuple(d for d in current.doc_ids if d not in plus)})


async def cascade(
    ranked: RankedList,
    stages: Sequence[CascadeStage],
    query: Query,
    documents: Mapping[str, Document],
    pivot: Optional[Document] = None,
) -> Tuple[RankedList, List[TruncationDecision]]:
    if not stages:
        raise ValueError("Kaskade braucht mindestens eine Stufe")
    for idx, stage in enumerate(stages[1:], start=1):
        if stage.mode != "Fixed" and not isinstance(stage.scorer, RerankerScorer):
            raise ValueError(f"Kaskadenstufe {idx} ({stage.mode}) braucht einen RerankerScorer")

    current = ranked
    decisions = []
    for idx, stage in enumerate(stages):
        try:
            decision = await decide(stage, current, query, pivot)
            current = await psi_rank(current, decision, stage.reranker, query, documents)
        except Exception as exc:
            raise StageError(f"Kaskadenstufe {idx} ({stage.mode}) fehlgeschlagen: {exc}", "cascade", idx) from exc
        decisions.append(decision)
        logger.debug(f"✂️ {query.id} Stufe {idx} {stage.mode}: n={decision.cut_depth}")
    return current, decisions


# ---------------------------------------------------------
# Cutoff-Verteilung
# ---------------------------------------------------------
def cutoff_stats(decisions: Sequence[TruncationDecision], bin_width: int = 10) -> Dict:
    per_query = {}
    for d in decisions:
        per_query.setdefault(d.query_id, []).append(
            {"mode": d.mode, "n": d.cut_depth, "threshold": d.threshold if math.isfinite(d.threshold) else None}
        )

    # Histogramm über die Tiefe der ersten Stufe
    first_cuts = [stages[0]["n"] for stages in per_query.values()]
    histogram = []
    if first_cuts:
        for lo in range(0, max(first_cuts) + 1, bin_width):
            hi = lo + bin_width - 1
            histogram.append({"bin": f"{lo}-{hi}", "count": sum(1 for n in first_cuts if lo <= n <= hi)})

    return {
        "per_query": {q: per_query[q] for q in sorted(per_query)},
        "mean_cutoff": sum(first_cuts) / len(first_cuts) if first_cuts else 0.0,
        "histogram": histogram,
    }
