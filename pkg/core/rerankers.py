import asyncio
import math
import random
import re
import threading
from collections import defaultdict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.llm_client import BackendError, ChatClient
from core.models import Document, Qrels, Query, RankedList, ScoredDoc, is_pivot_id
from utils.preprocess import limit_length
from utils.prompt_loader import fill_placeholders, load_prompt, render_prompt_template

LEDGER_KINDS = ("pointwise", "pairwise", "listwise", "pivot_gen", "judge", "pivot_score")
RERANKER_KINDS = ("pointwise", "pairwise", "listwise")
PAIRWISE_SCHEMES = ("all-pairs", "single-pass")

MAX_PASSAGE_CHARS = 1200


class ResponseParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class ListwiseParseError(ResponseParseError):
    pass


# ---------------------------------------------------------
# Inferenz-Buchhaltung
# ---------------------------------------------------------
class InferenceLedger:
    """Zähler (query_id, kind) -> Aufrufe. Thread-sicher, nur monoton steigend."""

    def __init__(self, cost_units: Optional[Mapping[str, float]] = None):
        self._lock = threading.Lock()
        self._counts: Dict[Tuple[str, str], int] = defaultdict(int)
        self.cost_units = dict(cost_units or {})

    def record(self, query_id: str, kind: str, n: int = 1) -> None:
        if kind not in LEDGER_KINDS:
            raise ValueError(f"Unbekannte Inferenzart: {kind}")
        if n < 0:
            raise ValueError("Ledger-Zähler dürfen nicht sinken")
        with self._lock:
            self._counts[(query_id, kind)] += n

    def count(self, query_id: Optional[str] = None, kind: Optional[str] = None) -> int:
        with self._lock:
            return sum(
                c
                for (qid, k), c in self._counts.items()
                if (query_id is None or qid == query_id) and (kind is None or k == kind)
            )

    def total(self, query_ids: Iterable[str], kinds: Iterable[str]) -> int:
        qids, kinds = set(query_ids), set(kinds)
        with self._lock:
            return sum(c for (qid, k), c in self._counts.items() if qid in qids and k in kinds)

    def cost(self, query_id: str, kinds: Iterable[str]) -> float:
        return sum(self.count(query_id, k) * self.cost_units.get(k, 1.0) for k in kinds)

    def snapshot(self) -> Dict[str, Dict[str, int]]:
        with self._lock:
            items = sorted(self._counts.items())
        out: Dict[str, Dict[str, int]] = {}
        for (qid, kind), c in items:
            out.setdefault(qid, {})[kind] = c
        return out


class ListwisePermutation(BaseModel):
    model_config = ConfigDict(frozen=True)

    order: Tuple[int, ...]

    @model_validator(mode="after")
    def _is_permutation(self) -> "ListwisePermutation":
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError(f"Keine Permutation von 0..{len(self.order) - 1}: {self.order}")
        return self

    def apply(self, items: Sequence) -> List:
        if len(items) != len(self.order):
            raise ValueError("Fensterlänge passt nicht zur Permutation")
        return [items[i] for i in self.order]


class NoiseModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(default=0.0, ge=0, le=1)
    seed: int = 42
    passes: int = Field(default=1, ge=1)


# ---------------------------------------------------------
# Listwise-Ausgabe reparieren
# ---------------------------------------------------------
def repair_permutation(raw: str, n: int) -> Tuple[Optional[List[int]], bool]:
    """
    [i]-Kennungen (1-basiert) in Reihenfolge; ungültige und doppelte fallen weg,
    fehlende werden in Fensterreihenfolge angehängt.
    Gibt (None, False) zurück, wenn keine einzige Kennung brauchbar ist.
    """
    ids = [int(x) - 1 for x in re.findall(r"\[(\d+)\]", raw or "")]
    order: List[int] = []
    for i in ids:
        if 0 <= i < n and i not in order:
            order.append(i)
    if not order:
        return None, False

    repaired = len(order) != len(ids) or len(order) != n
    order.extend(i for i in range(n) if i not in order)
    return order, repaired


# ---------------------------------------------------------
# Oracle-Backend (alle drei Arten, Ground Truth aus Qrels)
# ---------------------------------------------------------
class OracleReranker:
    """
    Ordnung nach (Grad absteigend, Erststufen-Rang, Doc-ID).
    Der Pivot bekommt den effektiven Grad `pivot_grade` (Standard tau - 0.25),
    liegt also strikt zwischen Grad tau und tau-1.
    """

    backend_id = "oracle"

    def __init__(
        self,
        qrels: Qrels,
        first_stage: Mapping[str, RankedList],
        ledger: InferenceLedger,
        noise: Optional[NoiseModel] = None,
        pivot_grade: float = 1.75,
    ):
        self.qrels = qrels
        self.ledger = ledger
        self.noise = noise or NoiseModel()
        self.pivot_grade = pivot_grade
        self._ranks = {
            qid: {doc_id: pos for pos, doc_id in enumerate(lst.doc_ids, start=1)}
            for qid, lst in first_stage.items()
        }

    def effective_grade(self, query_id: str, doc_id: str) -> float:
        if is_pivot_id(doc_id):
            return self.pivot_grade
        return float(self.qrels.grade(query_id, doc_id))

    def first_stage_rank(self, query_id: str, doc_id: str) -> float:
        return self._ranks.get(query_id, {}).get(doc_id, math.inf)

    def sort_key(self, query_id: str, doc_id: str) -> Tuple[float, float, str]:
        return (-self.effective_grade(query_id, doc_id), self.first_stage_rank(query_id, doc_id), doc_id)

    def _rng(self, query_id: str, first_id: str, length: int) -> random.Random:
        return random.Random(f"{self.noise.seed}:{query_id}:{first_id}:{length}")

    async def score(self, query: Query, doc: Document) -> float:
        grade = self.effective_grade(query.id, doc.id)
        if is_pivot_id(doc.id):
            return grade
        return grade + 1.0 / (1.0 + self.first_stage_rank(query.id, doc.id))

    async def prefer(self, query: Query, a: Document, b: Document) -> bool:
        a_wins = self.sort_key(query.id, a.id) < self.sort_key(query.id, b.id)
        if self.noise.epsilon > 0:
            rng = self._rng(query.id, f"{a.id}|{b.id}", 2)
            if rng.random() < self.noise.epsilon:
                a_wins = not a_wins
        return a_wins

    async def rank_window(self, query: Query, window: Sequence[Document]) -> List[int]:
        order = sorted(range(len(window)), key=lambda i: self.sort_key(query.id, window[i].id))
        n = len(order)
        if self.noise.epsilon > 0 and n > 1:
            rng = self._rng(query.id, window[0].id, n)
            for _ in range(self.noise.passes * n):
                i = rng.randrange(n - 1)
                if rng.random() < self.noise.epsilon:
                    order[i], order[i + 1] = order[i + 1], order[i]
        return order


# ---------------------------------------------------------
# HTTP-Backends (Chat-Completions)
# ---------------------------------------------------------
class HttpListwiseReranker:
    backend_id = "http-listwise"

    def __init__(self, client: ChatClient, ledger: InferenceLedger, max_attempts: Optional[int] = None):
        self.client = client
        self.ledger = ledger
        self.max_attempts = max_attempts or client.config.max_retries

    async def rank_window(self, query: Query, window: Sequence[Document]) -> List[int]:
        prompt = render_prompt_template(
            "listwise_rank",
            query=query.text,
            passages=[limit_length(d.text, MAX_PASSAGE_CHARS) for d in window],
        )
        raw = ""
        for attempt in range(1, self.max_attempts + 1):
            raw = await self.client.complete([{"role": "user", "content": prompt}])
            order, repaired = repair_permutation(raw, len(window))
            if order is not None:
                if repaired:
                    logger.warning(f"🩹 Listwise-Ausgabe für {query.id} repariert: {raw[:80]!r}")
                return order
            logger.warning(f"⚠️ Listwise-Ausgabe unbrauchbar (Versuch {attempt}) für {query.id}: {raw[:80]!r}")
        raise ListwiseParseError(f"Keine gültige Rangfolge nach {self.max_attempts} Versuchen", raw)


class HttpPointwiseReranker:
    backend_id = "http-pointwise"

    def __init__(self, client: ChatClient, ledger: InferenceLedger):
        self.client = client
        self.ledger = ledger
        self._template = load_prompt("pointwise_grade")

    async def score(self, query: Query, doc: Document) -> float:
        prompt = fill_placeholders(
            self._template, {"query": query.text, "passage": limit_length(doc.text, MAX_PASSAGE_CHARS)}
        )
        raw = await self.client.complete([{"role": "user", "content": prompt}], max_tokens=8)
        numbers = re.findall(r"-?\d+(?:\.\d+)?", raw or "")
        if not numbers:
            raise ResponseParseError(f"Keine Zahl in Pointwise-Antwort für {doc.id}", raw)
        return float(numbers[-1])


class HttpPairwiseReranker:
    backend_id = "http-pairwise"

    def __init__(self, client: ChatClient, ledger: InferenceLedger):
        self.client = client
        self.ledger = ledger
        self._template = load_prompt("pairwise_prefer")

    async def prefer(self, query: Query, a: Document, b: Document) -> bool:
        prompt = fill_placeholders(
            self._template,
            {
                "query": query.text,
                "passage_a": limit_length(a.text, MAX_PASSAGE_CHARS),
                "passage_b": limit_length(b.text, MAX_PASSAGE_CHARS),
            },
        )
        raw = await self.client.complete([{"role": "user", "content": prompt}], max_tokens=4)
        match = re.search(r"\b([AB])\b", raw or "")
        if not match:
            raise ResponseParseError("Pairwise-Antwort enthält weder A noch B", raw)
        return match.group(1) == "A"


# ---------------------------------------------------------
# Operationen (jede zählt genau einen Ledger-Eintrag)
# ---------------------------------------------------------
async def pointwise_score(backend, query: Query, doc: Document, kind: str = "pointwise") -> float:
    score = await backend.score(query, doc)
    if not math.isfinite(score):
        raise BackendError(f"Nicht-endlicher Score für {doc.id}: {score}")
    backend.ledger.record(query.id, kind)
    return score


async def pairwise_prefer(backend, query: Query, a: Document, b: Document) -> Document:
    if a.id == b.id:
        raise ValueError(f"Paarvergleich mit identischem Dokument {a.id}")
    a_wins = await backend.prefer(query, a, b)
    backend.ledger.record(query.id, "pairwise")
    return a if a_wins else b


async def pairwise_rerank(backend, query: Query, docs: Sequence[Document], scheme: str = "all-pairs") -> RankedList:
    if scheme not in PAIRWISE_SCHEMES:
        raise ValueError(f"Unbekanntes Pairwise-Schema: {scheme}")
    if not docs:
        raise ValueError("pairwise_rerank braucht mindestens ein Dokument")

    if scheme == "single-pass":
        order = list(docs)
        # ein Durchlauf von unten, der Sieger wandert nach oben
        for i in range(len(order) - 2, -1, -1):
            winner = await pairwise_prefer(backend, query, order[i], order[i + 1])
            if winner.id == order[i + 1].id:
                order[i], order[i + 1] = order[i + 1], order[i]
        return RankedList.from_ids(query.id, [d.id for d in order])

    pairs = [(i, j) for i in range(len(docs)) for j in range(i + 1, len(docs))]
    winners = await asyncio.gather(*(pairwise_prefer(backend, query, docs[i], docs[j]) for i, j in pairs))
    wins = defaultdict(int)
    for winner in winners:
        wins[winner.id] += 1

    ranked = sorted(range(len(docs)), key=lambda i: (-wins[docs[i].id], i))
    return RankedList(
        query_id=query.id,
        entries=tuple(ScoredDoc(doc_id=docs[i].id, score=float(wins[docs[i].id])) for i in ranked),
    )


async def listwise_rank(backend, query: Query, window: Sequence[Document]) -> ListwisePermutation:
    if not window:
        raise ValueError("Leeres Listwise-Fenster")
    order = await backend.rank_window(query, window)
    permutation = ListwisePermutation(order=tuple(order))
    backend.ledger.record(query.id, "listwise")
    return permutation


class StageReranker:
    """Reranker einer PSI-Stufe: Pointwise sortiert nach Score, Pairwise nach Siegen."""

    def __init__(self, backend, kind: str = "pointwise", scheme: str = "all-pairs"):
        if kind not in ("pointwise", "pairwise"):
            raise ValueError(f"PSI-Reranker muss pointwise oder pairwise sein, nicht {kind}")
        if scheme not in PAIRWISE_SCHEMES:
            raise ValueError(f"Unbekanntes Pairwise-Schema: {scheme}")
        self.backend = backend
        self.kind = kind
        self.scheme = scheme

    @property
    def ledger(self) -> InferenceLedger:
        return self.backend.ledger

    async def rerank(self, query: Query, docs: Sequence[Document]) -> List[Tuple[str, float]]:
        if not docs:
            return []
        if self.kind == "pairwise":
            ranked = await pairwise_rerank(self.backend, query, docs, self.scheme)
            return [(e.doc_id, e.score) for e in ranked.entries]

        scores = await asyncio.gather(*(pointwise_score(self.backend, query, d) for d in docs))
        order = sorted(range(len(docs)), key=lambda i: (-scores[i], i))
        return [(docs[i].id, scores[i]) for i in order]
