import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from core.models import Document, Query, RankedList
from utils.preprocess import tokenize

INDEX_FORMAT = "bm25-json"
INDEX_VERSION = 1


class EmptyCorpusError(ValueError):
    pass


class Bm25Params(BaseModel):
    model_config = ConfigDict(frozen=True)

    k1: float = Field(default=0.9, gt=0)
    b: float = Field(default=0.4, ge=0, le=1)


class PivotRank(BaseModel):
    model_config = ConfigDict(frozen=True)

    position: int = Field(ge=1)
    pivot_score: float


@dataclass(frozen=True)
class Bm25Index:
    """
    In-Memory Inverted Index.
    Ordinalzahlen folgen der sortierten Doc-ID, damit der Index
    unabhängig von der Einfügereihenfolge identisch ist.
    """

    postings: Mapping[str, Tuple[Tuple[int, int], ...]]
    doc_ids: Tuple[str, ...]
    doc_lengths: Tuple[int, ...]
    avgdl: float
    params: Bm25Params

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


# ---------------------------------------------------------
# Index bauen
# ---------------------------------------------------------
def build_index(corpus: Sequence[Document], params: Bm25Params = None) -> Bm25Index:
    params = params or Bm25Params()
    if not corpus:
        raise EmptyCorpusError("Korpus ist leer - kein Index möglich")

    docs = sorted(corpus, key=lambda d: d.id)
    postings: Dict[str, List[Tuple[int, int]]] = defaultdict(list)
    lengths = []

    for ordinal, doc in enumerate(docs):
        if ordinal and docs[ordinal - 1].id == doc.id:
            raise ValueError(f"Doc-ID doppelt im Korpus: {doc.id}")
        tokens = tokenize(doc.text)
        lengths.append(len(tokens))
        for term, tf in sorted(Counter(tokens).items()):
            postings[term].append((ordinal, tf))

    avgdl = sum(lengths) / len(lengths)
    logger.info(f"🗂️ BM25-Index gebaut: {len(docs)} Dokumente, {len(postings)} Terme, avgdl={avgdl:.2f}")
    return Bm25Index(
        postings={t: tuple(p) for t, p in postings.items()},
        doc_ids=tuple(d.id for d in docs),
        doc_lengths=tuple(lengths),
        avgdl=avgdl,
        params=params,
    )


def _query_terms(query: Union[Query, str]) -> List[str]:
    text = query.text if isinstance(query, Query) else query
    return sorted(set(tokenize(text)))


def _term_weight(index: Bm25Index, idf: float, tf: int, dl: int) -> float:
    k1, b = index.params.k1, index.params.b
    # avgdl = 0 nur bei Korpus aus leeren Texten
    norm = 1.0 - b + b * (dl / index.avgdl) if index.avgdl > 0 else 1.0
    return idf * tf * (k1 + 1.0) / (tf + k1 * norm)


# ---------------------------------------------------------
# Top-m Retrieval
# ---------------------------------------------------------
def retrieve(index: Bm25Index, query: Query, m: int) -> RankedList:
    if m < 1:
        raise ValueError(f"m muss >= 1 sein, erhalten: {m}")

    scores: Dict[int, float] = defaultdict(float)
    for term in _query_terms(query):
        idf = index.idf(term)
        for ordinal, tf in index.postings.get(term, ()):
            scores[ordinal] += _term_weight(index, idf, tf, index.doc_lengths[ordinal])

    pairs = [(index.doc_ids[o], s) for o, s in scores.items() if s > 0]
    pairs.sort(key=lambda x: (-x[1], x[0]))
    return RankedList.from_pairs(query.id, pairs[:m])


def score_text(index: Bm25Index, query: Union[Query, str], text: str) -> float:
    """BM25-Score eines korpusfremden Textes (z.B. Pivot) mit idf/avgdl des Index."""
    tf = Counter(tokenize(text))
    dl = sum(tf.values())
    score = 0.0
    for term in _query_terms(query):
        if tf[term]:
            score += _term_weight(index, index.idf(term), tf[term], dl)
    return score


def insert_rank(ranked: RankedList, pivot_score: float) -> PivotRank:
    """
    Einfügeposition des Pivots (1-basiert). Dokumente mit gleichem Score
    stehen vor dem Pivot, passend zur Tie-Regel der Truncation.
    """
    above = sum(1 for s in ranked.scores if s >= pivot_score)
    return PivotRank(position=above + 1, pivot_score=pivot_score)


class Bm25Scorer:
    """Stage-Scorer auf Retriever-Skala: Dokument-Scores kommen aus der Liste selbst."""

    scorer_id = "bm25"

    def __init__(self, index: Bm25Index):
        self.index = index

    def score_text(self, query: Query, text: str) -> float:
        return score_text(self.index, query, text)

    def score(self, query: Query, doc: Document) -> float:
        return score_text(self.index, query, doc.text)

    async def score_pivot(self, query: Query, pivot: Document) -> float:
        return self.score_text(query, pivot.text)

    def doc_scores(self, ranked: RankedList) -> Dict[str, float]:
        return ranked.score_map()


# ---------------------------------------------------------
# Persistenz (versioniertes JSON)
# ---------------------------------------------------------
def save_index(index: Bm25Index, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "params": index.params.model_dump(),
        "doc_ids": list(index.doc_ids),
        "doc_lengths": list(index.doc_lengths),
        "postings": {t: [list(p) for p in plist] for t, plist in index.postings.items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    tmp.replace(path)
    logger.info(f"💾 Index gespeichert: {path}")
    return path


def load_index(path: Union[str, Path]) -> Bm25Index:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Index-Datei fehlt: {path}")

    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("format") != INDEX_FORMAT or payload.get("version") != INDEX_VERSION:
        raise ValueError(
            f"Unbekanntes Indexformat {payload.get('format')!r} v{payload.get('version')!r}"
        )

    lengths = tuple(int(x) for x in payload["doc_lengths"])
    if not lengths:
        raise EmptyCorpusError(f"Index {path} enthält keine Dokumente")
    return Bm25Index(
        postings={t: tuple((int(o), int(tf)) for o, tf in plist) for t, plist in payload["postings"].items()},
        doc_ids=tuple(payload["doc_ids"]),
        doc_lengths=lengths,
        avgdl=sum(lengths) / len(lengths),
        params=Bm25Params(**payload["params"]),
    )
