import asyncio
import math
import time
from typing import List, Mapping, Optional, Sequence, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.bm25 import PivotRank
from core.models import Document, Query, RankedList
from core.rerankers import ListwisePermutation, listwise_rank

METHODS = ("sliding", "snow", "vs-sliding", "tdpart", "gptd-part")
PIVOT_METHODS = ("snow", "vs-sliding", "gptd-part")


class SchedulerError(RuntimeError):
    def __init__(self, message: str, position: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.position = position


class WindowSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    w: int = Field(default=20, ge=1)
    stride: int = Field(default=10, ge=1)
    s_max: Optional[int] = None

    @model_validator(mode="after")
    def _check(self) -> "WindowSpec":
        if self.stride > self.w:
            raise ValueError(f"Stride {self.stride} größer als Fenster {self.w}")
        if self.s_max is not None and not 1 <= self.s_max <= self.w:
            raise ValueError(f"s_max {self.s_max} muss in [1, {self.w}] liegen")
        return self

    @property
    def max_stride(self) -> int:
        return self.s_max if self.s_max is not None else self.w


class WindowRecord(BaseModel):
    """Ein verarbeitetes Fenster, Ränge 1-basiert und inklusiv."""

    start: int
    end: int
    n_above: Optional[int] = None
    stride_used: Optional[int] = None
    depth: int = 0


class WindowResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    above_pivot: Tuple[str, ...]
    below_pivot: Tuple[str, ...]
    permutation: ListwisePermutation


class ScheduleTrace(BaseModel):
    method: str
    query_id: str
    windows: List[WindowRecord] = Field(default_factory=list)
    listwise_calls: int = 0
    parallelizable_batches: int = 0
    serial_batches: List[int] = Field(default_factory=list)
    batch_seconds: List[float] = Field(default_factory=list)


def _dedupe(ids: Sequence[str]) -> List[str]:
    return list(dict.fromkeys(ids))


# ---------------------------------------------------------
# Gemeinsamer Fenster-Runner
# ---------------------------------------------------------
class _WindowRunner:
    def __init__(
        self,
        method: str,
        ranker,
        query: Query,
        documents: Mapping[str, Document],
        window_semaphore: Optional[asyncio.Semaphore] = None,
        pivot: Optional[Document] = None,
    ):
        self.ranker = ranker
        self.query = query
        self.documents = documents
        self.pivot = pivot
        self.semaphore = window_semaphore or asyncio.Semaphore(8)
        self.trace = ScheduleTrace(method=method, query_id=query.id)

    def _doc(self, doc_id: str) -> Document:
        if self.pivot is not None and doc_id == self.pivot.id:
            return self.pivot
        return self.documents.get(doc_id) or Document(id=doc_id)

    async def _rank(self, ids: List[str]) -> List[str]:
        async with self.semaphore:
            permutation = await listwise_rank(self.ranker, self.query, [self._doc(d) for d in ids])
        return permutation.apply(ids)

    async def batch(self, windows: List[List[str]], spans: List[Tuple[int, int]]) -> List[List[str]]:
        """Ein Batch unabhängiger Fenster; Ergebnisse in Fensterreihenfolge."""
        started = time.perf_counter()
        try:
            results = await asyncio.gather(*(self._rank(ids) for ids in windows))
        except Exception as exc:
            raise SchedulerError(
                f"{self.trace.method} {self.query.id}: Fenster {spans[0]} fehlgeschlagen ({exc})", spans[0]
            ) from exc
        self.trace.serial_batches.append(len(windows))
        self.trace.batch_seconds.append(time.perf_counter() - started)
        return results

    async def single(self, ids: List[str], span: Tuple[int, int]) -> List[str]:
        return (await self.batch([ids], [span]))[0]

    def split(self, index: int, window: List[str], order: List[str]) -> WindowResult:
        if self.pivot.id not in order:
            raise SchedulerError(f"Pivot fehlt in Fensterausgabe ({self.query.id})")
        pos = order.index(self.pivot.id)
        slot = {d: i for i, d in enumerate(window)}
        return WindowResult(
            index=index,
            above_pivot=tuple(order[:pos]),
            below_pivot=tuple(order[pos + 1 :]),
            permutation=ListwisePermutation(order=tuple(slot[d] for d in order)),
        )

    def record(self, start: int, end: int, n_above=None, stride=None, depth: int = 0) -> None:
        self.trace.windows.append(
            WindowRecord(start=start, end=end, n_above=n_above, stride_used=stride, depth=depth)
        )

    def finish(self, query_id: str, ids: List[str], original: RankedList) -> Tuple[RankedList, ScheduleTrace]:
        if sorted(ids) != sorted(original.doc_ids):
            raise SchedulerError(f"{self.trace.method} {query_id}: Ausgabe ist keine Permutation der Eingabe")
        self.trace.listwise_calls = sum(self.trace.serial_batches)
        self.trace.parallelizable_batches = len(self.trace.serial_batches)
        logger.debug(
            f"🔁 {self.trace.method} {query_id}: {self.trace.listwise_calls} Listwise-Aufrufe "
            f"in {self.trace.parallelizable_batches} Batches"
        )
        return RankedList.from_ids(query_id, ids, original.diagnostics), self.trace


# ---------------------------------------------------------
# Sliding Window (Baseline)
# ---------------------------------------------------------
def sliding_schedule(m: int, spec: WindowSpec) -> List[Tuple[int, int]]:
    """Fensterspannen (0-basiert, end exklusiv) von unten nach oben."""
    spans = []
    p = m
    while m > 0:
        start = max(0, p - spec.w)
        spans.append((start, p))
        if start == 0:
            break
        p = max(p - spec.stride, min(spec.w, m))
    return spans


def baseline_trace(query_id: str, m: int, spec: WindowSpec) -> ScheduleTrace:
    """Trace des Sliding-Window-Baselines ohne Backend-Aufruf (Aufrufzahl hängt nicht vom Inhalt ab)."""
    spans = sliding_schedule(m, spec)
    return ScheduleTrace(
        method="sliding",
        query_id=query_id,
        windows=[WindowRecord(start=s + 1, end=e, stride_used=spec.stride) for s, e in spans],
        listwise_calls=len(spans),
        parallelizable_batches=len(spans),
        serial_batches=[1] * len(spans),
    )


async def sliding_window(
    ranker,
    ranked: RankedList,
    spec: WindowSpec,
    query: Query,
    documents: Mapping[str, Document],
    window_semaphore: Optional[asyncio.Semaphore] = None,
) -> Tuple[RankedList, ScheduleTrace]:
    run = _WindowRunner("sliding", ranker, query, documents, window_semaphore)
    ids = ranked.doc_ids
    for start, end in sliding_schedule(len(ids), spec):
        ids[start:end] = await run.single(ids[start:end], (start + 1, end))
        run.record(start + 1, end, stride=spec.stride)
    return run.finish(ranked.query_id, ids, ranked)


# ---------------------------------------------------------
# SNOW: disjunkte Fenster + Pivot, danach ein Abschlussfenster
# ---------------------------------------------------------
async def snow(
    ranker,
    ranked: RankedList,
    pivot: Document,
    spec: WindowSpec,
    query: Query,
    documents: Mapping[str, Document],
    window_semaphore: Optional[asyncio.Semaphore] = None,
) -> Tuple[RankedList, ScheduleTrace]:
    run = _WindowRunner("snow", ranker, query, documents, window_semaphore, pivot)
    ids = ranked.doc_ids
    m = len(ids)
    if m == 0:
        return run.finish(ranked.query_id, ids, ranked)

    k = math.ceil(m / spec.w)
    chunks = [ids[j * spec.w : (j + 1) * spec.w] for j in range(k)]
    spans = [(j * spec.w + 1, j * spec.w + len(c)) for j, c in enumerate(chunks)]
    orders = await run.batch([c + [pivot.id] for c in chunks], spans)
    d_plus, d_minus = [], []
    for j, ((start, end), order) in enumerate(zip(spans, orders)):
        result = run.split(j, chunks[j] + [pivot.id], order)
        d_plus.extend(result.above_pivot)
        d_minus.extend(result.below_pivot)
        run.record(start, end, n_above=len(result.above_pivot))

    merged = d_plus + d_minus
    head_len = min(spec.w, len(merged))
    head = await run.single(merged[:head_len], (1, head_len))
    run.record(1, head_len)
    return run.finish(ranked.query_id, head + merged[head_len:], ranked)


# ---------------------------------------------------------
# VS-Sliding: Schrittweite aus der Zahl der Promotions
# ---------------------------------------------------------
def next_stride(n_above: int, spec: WindowSpec) -> int:
    return max(1, min(spec.max_stride, spec.w - n_above))


async def vs_sliding(
    ranker,
    ranked: RankedList,
    pivot: Document,
    spec: WindowSpec,
    query: Query,
    documents: Mapping[str, Document],
    window_semaphore: Optional[asyncio.Semaphore] = None,
) -> Tuple[RankedList, ScheduleTrace]:
    run = _WindowRunner("vs-sliding", ranker, query, documents, window_semaphore, pivot)
    ids = ranked.doc_ids
    m = len(ids)
    p = m

    step = 0
    while m > 0:
        start = max(0, p - spec.w)
        window = ids[start:p] + [pivot.id]
        result = run.split(step, window, await run.single(window, (start + 1, p)))
        n_above = len(result.above_pivot)
        ids[start:p] = list(result.above_pivot + result.below_pivot)

        if start == 0:
            run.record(1, p, n_above=n_above)
            break
        stride = next_stride(n_above, spec)
        run.record(start + 1, p, n_above=n_above, stride=stride)
        p = max(p - stride, min(spec.w, m))
        step += 1

    return run.finish(ranked.query_id, ids, ranked)


# ---------------------------------------------------------
# TDPart (Baseline) und GPTD-Part
# ---------------------------------------------------------
async def _deep_windows(
    run: _WindowRunner, docs: List[str], anchor: str, size: int, offset: int, depth: int
) -> List[str]:
    """Docs in Fenster zu size-1 plus Anker; liefert alle Docs oberhalb des Ankers in Fensterreihenfolge."""
    chunks = [docs[i : i + size - 1] for i in range(0, len(docs), size - 1)]
    if not chunks:
        return []
    spans = []
    pos = offset
    for c in chunks:
        spans.append((pos + 1, pos + len(c)))
        pos += len(c)

    orders = await run.batch([c + [anchor] for c in chunks], spans)
    candidates = []
    for (start, end), order in zip(spans, orders):
        cut = order.index(anchor)
        candidates.extend(order[:cut])
        run.record(start, end, n_above=cut, depth=depth)
    return candidates


async def _td_partition(run: _WindowRunner, ids: List[str], spec: WindowSpec, anchor_k: int, depth: int) -> List[str]:
    """
    Top-down-Partitionierung als Schleife. Der Anker steht höchstens auf Rang w-1,
    damit schrumpft die Liste pro Ebene um mindestens ein Dokument.
    """
    k = min(anchor_k, spec.w - 1)
    suffix: List[str] = []
    while len(ids) > spec.w:
        top = await run.single(ids[: spec.w], (1, spec.w))
        run.record(1, spec.w, depth=depth)
        anchor = top[k - 1]
        rest = ids[spec.w :]

        candidates = await _deep_windows(run, rest, anchor, spec.w, spec.w, depth)
        promoted = set(candidates)
        tail = [d for d in rest if d not in promoted]
        if not candidates:
            return _dedupe(top + tail + suffix)

        suffix = top[k:] + tail + suffix
        ids = top[:k] + candidates
        depth += 1

    run.record(1, len(ids), depth=depth)
    head = await run.single(ids, (1, len(ids)))
    return _dedupe(head + suffix)


async def td_part(
    ranker,
    ranked: RankedList,
    spec: WindowSpec,
    query: Query,
    documents: Mapping[str, Document],
    anchor_k: int = 10,
    window_semaphore: Optional[asyncio.Semaphore] = None,
) -> Tuple[RankedList, ScheduleTrace]:
    if not 1 <= anchor_k <= spec.w:
        raise ValueError(f"anchor_k {anchor_k} muss in [1, {spec.w}] liegen")
    if spec.w < 2:
        raise ValueError("TDPart braucht w >= 2")

    run = _WindowRunner("tdpart", ranker, query, documents, window_semaphore)
    ids = ranked.doc_ids
    if ids:
        ids = await _td_partition(run, ids, spec, anchor_k, 0)
    return run.finish(ranked.query_id, ids, ranked)


async def gptd_part(
    ranker,
    ranked: RankedList,
    pivot: Document,
    pivot_rank: PivotRank,
    spec: WindowSpec,
    query: Query,
    documents: Mapping[str, Document],
    anchor_k: int = 10,
    window_semaphore: Optional[asyncio.Semaphore] = None,
) -> Tuple[RankedList, ScheduleTrace]:
    """
    TDPart mit dem Pivot als Anker. Tiefe Fenster nur über Ränge w+1..max(k_p, w),
    Dokumente hinter k_p behalten ihre Erststufen-Reihenfolge.
    """
    if spec.w < 2:
        raise ValueError("GPTD-Part braucht w >= 2")

    run = _WindowRunner("gptd-part", ranker, query, documents, window_semaphore, pivot)
    ids = ranked.doc_ids
    m = len(ids)
    if m == 0:
        return run.finish(ranked.query_id, ids, ranked)

    top_len = min(spec.w, m)
    w_top = ids[:top_len] + [pivot.id]
    top = run.split(0, w_top, await run.single(w_top, (1, top_len)))
    above_top, below_top = list(top.above_pivot), list(top.below_pivot)
    run.record(1, top_len, n_above=len(above_top))

    depth_end = min(max(pivot_rank.position, spec.w), m)
    deep = ids[spec.w : depth_end]
    beyond = ids[depth_end:]

    candidates = await _deep_windows(run, deep, pivot.id, spec.w, spec.w, 0)
    promoted = set(candidates)
    deep_rest = [d for d in deep if d not in promoted]
    if not candidates:
        return run.finish(ranked.query_id, above_top + below_top + deep_rest + beyond, ranked)

    merged = above_top + candidates
    if len(merged) <= spec.w:
        merge_order = await run.single(merged + [pivot.id], (1, len(merged)))
        head = [d for d in merge_order if d != pivot.id]
        run.record(1, len(merged), n_above=merge_order.index(pivot.id), depth=1)
    else:
        # der Pivot trennt hier nichts mehr, interner Anker wie bei TDPart
        head = await _td_partition(run, merged, spec, min(anchor_k, spec.w), 1)

    return run.finish(ranked.query_id, _dedupe(head + below_top + deep_rest + beyond), ranked)


# ---------------------------------------------------------
# Aufrufzahlen ohne Backend (für --dry-run)
# ---------------------------------------------------------
def _td_bound(n: int, spec: WindowSpec, anchor_k: int) -> int:
    """Obergrenze: jede Ebene befördert alle tiefen Dokumente."""
    k = min(anchor_k, spec.w - 1)
    calls = 0
    while n > spec.w:
        calls += 1 + math.ceil((n - spec.w) / (spec.w - 1))
        n = k + (n - spec.w)
    return calls + 1


def call_bound(method: str, m: int, spec: WindowSpec, anchor_k: int = 10) -> Tuple[int, bool]:
    """(Listwise-Aufrufe, exakt?) für eine Liste der Tiefe m."""
    if method not in METHODS:
        raise ValueError(f"Unbekannter Scheduler: {method}")
    if m == 0:
        return 0, True
    if method == "sliding":
        return len(sliding_schedule(m, spec)), True
    if method == "snow":
        return math.ceil(m / spec.w) + 1, True
    if method == "vs-sliding":
        return len(sliding_schedule(m, spec.model_copy(update={"stride": 1}))), m <= spec.w
    if method == "tdpart":
        return _td_bound(m, spec, anchor_k), m <= spec.w
    if m <= spec.w:
        return 1, True
    deep = math.ceil((m - spec.w) / (spec.w - 1))
    return 1 + deep + _td_bound(m, spec, min(anchor_k, spec.w)), False


# ---------------------------------------------------------
# Dispatch
# ---------------------------------------------------------
async def run_scheduler(
    method: str,
    ranker,
    ranked: RankedList,
    query: Query,
    documents: Mapping[str, Document],
    spec: WindowSpec,
    pivot: Optional[Document] = None,
    pivot_rank: Optional[PivotRank] = None,
    anchor_k: int = 10,
    window_semaphore: Optional[asyncio.Semaphore] = None,
) -> Tuple[RankedList, ScheduleTrace]:
    if method not in METHODS:
        raise ValueError(f"Unbekannter Scheduler: {method} (erlaubt: {', '.join(METHODS)})")
    if method in PIVOT_METHODS and pivot is None:
        raise ValueError(f"{method} braucht einen Pivot ({query.id})")

    if method == "sliding":
        return await sliding_window(ranker, ranked, spec, query, documents, window_semaphore)
    if method == "snow":
        return await snow(ranker, ranked, pivot, spec, query, documents, window_semaphore)
    if method == "vs-sliding":
        return await vs_sliding(ranker, ranked, pivot, spec, query, documents, window_semaphore)
    if method == "tdpart":
        return await td_part(ranker, ranked, spec, query, documents, anchor_k, window_semaphore)

    if pivot_rank is None:
        raise ValueError(f"gptd-part braucht die Einfügeposition des Pivots ({query.id})")
    return await gptd_part(ranker, ranked, pivot, pivot_rank, spec, query, documents, anchor_k, window_semaphore)
