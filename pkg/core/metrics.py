import math
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from core.models import Qrels, RankedList
from core.rerankers import RERANKER_KINDS, InferenceLedger

LOWER_IS_BETTER = ("IPQ",)


class CostModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    weights: Dict[str, float] = Field(
        default_factory=lambda: {
            "listwise": 1.0,
            "pointwise": 0.1,
            "pairwise": 0.1,
            "pivot_gen": 1.0,
            "judge": 0.5,
            "pivot_score": 0.1,
        }
    )
    parallelism: int = Field(default=5, ge=1)

    @field_validator("weights")
    @classmethod
    def _positive(cls, value: Dict[str, float]) -> Dict[str, float]:
        bad = {k: v for k, v in value.items() if not v > 0}
        if bad:
            raise ValueError(f"Kostengewichte müssen > 0 sein: {bad}")
        return value

    def weight(self, kind: str) -> float:
        return self.weights.get(kind, 1.0)


class MetricReport(BaseModel):
    name: str = "run"
    per_query: Dict[str, Dict[str, float]]
    aggregates: Dict[str, Optional[float]]
    evaluated_count: int
    skipped_query_ids: List[str] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)


# ---------------------------------------------------------
# Effektivität
# ---------------------------------------------------------
def _gain(grade: int, gain: str) -> float:
    if gain == "exponential":
        return 2.0 ** grade - 1.0
    if gain == "linear":
        return float(grade)
    raise ValueError(f"Unbekannte Gain-Funktion: {gain}")


def ndcg_at_k(ranked: RankedList, qrels: Qrels, k: int, gain: str = "exponential") -> float:
    """Nur die Reihenfolge der Liste zählt, nicht die Scores."""
    if k < 1:
        raise ValueError(f"k muss >= 1 sein, erhalten: {k}")

    judged = qrels.judged(ranked.query_id)
    dcg = sum(
        _gain(judged.get(doc_id, 0), gain) / math.log2(i + 1)
        for i, doc_id in enumerate(ranked.doc_ids[:k], start=1)
    )
    ideal = sorted(judged.values(), reverse=True)[:k]
    idcg = sum(_gain(g, gain) / math.log2(i + 1) for i, g in enumerate(ideal, start=1))
    return dcg / idcg if idcg > 0 else 0.0


def map_at_k(ranked: RankedList, qrels: Qrels, k: int = 100, threshold: int = 2) -> float:
    if not 0 <= threshold <= 3:
        raise ValueError(f"Schwelle muss in [0,3] liegen, erhalten: {threshold}")

    judged = qrels.judged(ranked.query_id)
    total_relevant = sum(1 for g in judged.values() if g >= threshold)
    if total_relevant == 0:
        return 0.0

    hits = 0
    precision_sum = 0.0
    for i, doc_id in enumerate(ranked.doc_ids[:k], start=1):
        if doc_id in judged and judged[doc_id] >= threshold:
            hits += 1
            precision_sum += hits / i
    return precision_sum / total_relevant


# ---------------------------------------------------------
# Effizienz
# ---------------------------------------------------------
def ipq(
    ledger: InferenceLedger,
    query_ids: Iterable[str],
    kinds: Iterable[str] = RERANKER_KINDS,
    include_pivot_scoring: bool = False,
) -> float:
    qids = sorted(set(query_ids))
    if not qids:
        raise ValueError("IPQ braucht mindestens eine Query")
    kinds = set(kinds)
    if include_pivot_scoring:
        kinds.add("pivot_score")
    return ledger.total(qids, kinds) / len(qids)


def modeled_time(trace, cost: CostModel, kind: str = "listwise") -> float:
    """Summe über serielle Batches: ceil(Aufrufe / Parallelität) * Gewicht."""
    return sum(math.ceil(n / cost.parallelism) * cost.weight(kind) for n in trace.serial_batches if n > 0)


def speedup(trace_method, trace_baseline, cost: CostModel, pivot_cost: float = 0.0) -> float:
    return speedup_over([trace_method], [trace_baseline], cost, pivot_cost)


def speedup_over(
    method_traces: Sequence,
    baseline_traces: Sequence,
    cost: CostModel,
    pivot_cost: float = 0.0,
) -> float:
    """SU über eine Querymenge; pivot_cost ist die Gesamtzeit aller Pivot-Generierungen."""
    method_time = sum(modeled_time(t, cost) for t in method_traces) + pivot_cost
    if method_time <= 0:
        raise ZeroDivisionError("Modellierte Laufzeit der Methode ist 0")
    return sum(modeled_time(t, cost) for t in baseline_traces) / method_time


def wall_clock_speedup(method_traces: Sequence, baseline_traces: Sequence, pivot_seconds: float = 0.0) -> float:
    method_time = sum(sum(t.batch_seconds) for t in method_traces) + pivot_seconds
    if method_time <= 0:
        raise ZeroDivisionError("Gemessene Laufzeit der Methode ist 0")
    return sum(sum(t.batch_seconds) for t in baseline_traces) / method_time


# ---------------------------------------------------------
# Auswertung eines Runs
# ---------------------------------------------------------
def evaluate_run(
    run: Mapping[str, RankedList],
    qrels: Qrels,
    ks: Sequence[int] = (10,),
    map_k: int = 100,
    threshold: int = 2,
    gain: str = "exponential",
    query_ids: Optional[Iterable[str]] = None,
) -> Tuple[Dict[str, Dict[str, float]], Dict[str, Optional[float]], List[str]]:
    """Liefert (per_query, Mittelwerte, übersprungene Queries ohne Qrels)."""
    qids = sorted(query_ids) if query_ids is not None else sorted(run)
    evaluated = [q for q in qids if qrels.has_query(q)]
    skipped = [q for q in qids if not qrels.has_query(q)]

    per_query = {}
    for qid in evaluated:
        ranked = run.get(qid) or RankedList(query_id=qid)
        row = {f"ndcg@{k}": ndcg_at_k(ranked, qrels, k, gain) for k in ks}
        row[f"ap@{map_k}"] = map_at_k(ranked, qrels, map_k, threshold)
        per_query[qid] = row

    aggregates: Dict[str, Optional[float]] = {}
    for k in ks:
        aggregates[f"nDCG@{k}"] = _mean([r[f"ndcg@{k}"] for r in per_query.values()])
    aggregates[f"MAP@{map_k}"] = _mean([r[f"ap@{map_k}"] for r in per_query.values()])
    return per_query, aggregates, skipped


def _mean(values: List[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


# ---------------------------------------------------------
# Tabelle im Stil der Ergebnistabellen
# ---------------------------------------------------------
def _fmt(column: str, value: Optional[float]) -> str:
    if value is None:
        return "-"
    if column == "IPQ":
        return f"{value:.1f}"
    if column == "SU":
        return f"{value:.2f}"
    return f"{value:.3f}"


def format_table(reports: Sequence[MetricReport], columns: Optional[Sequence[str]] = None) -> str:
    """Bester Wert mit `*`, zweitbester mit `_` markiert (ab zwei Zeilen)."""
    if not reports:
        return ""
    if columns is None:
        columns = [
            c
            for c in reports[0].aggregates
            if any(r.aggregates.get(c) is not None for r in reports)
        ]

    marks: Dict[Tuple[int, str], str] = {}
    if len(reports) > 1:
        for col in columns:
            values = sorted(
                {round(r.aggregates[col], 9) for r in reports if r.aggregates.get(col) is not None},
                reverse=col not in LOWER_IS_BETTER,
            )
            for idx, r in enumerate(reports):
                v = r.aggregates.get(col)
                if v is None:
                    continue
                if values and round(v, 9) == values[0]:
                    marks[(idx, col)] = "*"
                elif len(values) > 1 and round(v, 9) == values[1]:
                    marks[(idx, col)] = "_"

    header = ["Pipeline"] + list(columns)
    rows = [
        [r.name] + [_fmt(c, r.aggregates.get(c)) + marks.get((i, c), "") for c in columns]
        for i, r in enumerate(reports)
    ]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]

    def _line(cells: List[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [cell.rjust(widths[i + 1]) for i, cell in enumerate(cells[1:])]
        return "  ".join([first] + rest).rstrip()

    out = [_line(header), "  ".join("-" * w for w in widths)]
    out.extend(_line(row) for row in rows)
    return "\n".join(out) + "\n"
