import math
from typing import Annotated, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Vierstufige Relevanzskala 0..3
RelevanceGrade = Annotated[int, Field(ge=0, le=3)]

GRADE_VALUES = (0, 1, 2, 3)

# Reservierter Präfix für das generierte Referenzdokument (Pivot)
PIVOT_ID_PREFIX = "__pivot__:"


def pivot_doc_id(query_id: str) -> str:
    return f"{PIVOT_ID_PREFIX}{query_id}"


def is_pivot_id(doc_id: str) -> bool:
    return doc_id.startswith(PIVOT_ID_PREFIX)


class Query(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    text: str = Field(min_length=1)


class Document(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    text: str = ""


class ScoredDoc(BaseModel):
    model_config = ConfigDict(frozen=True)

    doc_id: str = Field(min_length=1)
    score: float

    @field_validator("score")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError(f"Score muss endlich sein, erhalten: {value}")
        return value


class RankedList(BaseModel):
    """
    Geordnete Kandidatenliste einer Query.
    Scores absteigend, Doc-IDs eindeutig - wird bei jeder Konstruktion geprüft.
    `diagnostics` ist ein Seitenkanal (z.B. trec_rank, reranker_score) und nimmt
    an der Ordnung nicht teil.
    """

    model_config = ConfigDict(frozen=True)

    query_id: str = Field(min_length=1)
    entries: Tuple[ScoredDoc, ...] = ()
    diagnostics: Dict[str, Dict[str, float]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_order(self) -> "RankedList":
        seen = set()
        previous = math.inf
        for pos, entry in enumerate(self.entries, start=1):
            if entry.doc_id in seen:
                raise ValueError(f"Doppelte Doc-ID {entry.doc_id!r} in Liste {self.query_id!r}")
            if entry.score > previous:
                raise ValueError(
                    f"Liste {self.query_id!r} nicht absteigend sortiert (Position {pos})"
                )
            seen.add(entry.doc_id)
            previous = entry.score
        return self

    @property
    def depth(self) -> int:
        return len(self.entries)

    @property
    def doc_ids(self) -> List[str]:
        return [e.doc_id for e in self.entries]

    @property
    def scores(self) -> List[float]:
        return [e.score for e in self.entries]

    def score_map(self) -> Dict[str, float]:
        return {e.doc_id: e.score for e in self.entries}

    @classmethod
    def from_pairs(
        cls,
        query_id: str,
        pairs: Iterable[Tuple[str, float]],
        diagnostics: Optional[Mapping[str, Mapping[str, float]]] = None,
    ) -> "RankedList":
        """Sortiert (doc_id, score)-Paare nach Score absteigend, Gleichstand nach Doc-ID."""
        ordered = sorted(pairs, key=lambda x: (-x[1], x[0]))
        return cls(
            query_id=query_id,
            entries=tuple(ScoredDoc(doc_id=d, score=s) for d, s in ordered),
            diagnostics={k: dict(v) for k, v in (diagnostics or {}).items()},
        )

    @classmethod
    def from_ids(
        cls,
        query_id: str,
        doc_ids: Sequence[str],
        diagnostics: Optional[Mapping[str, Mapping[str, float]]] = None,
    ) -> "RankedList":
        """Reihenfolge bleibt erhalten, Scores werden synthetisch m, m-1, ..., 1."""
        m = len(doc_ids)
        return cls(
            query_id=query_id,
            entries=tuple(ScoredDoc(doc_id=d, score=float(m - i)) for i, d in enumerate(doc_ids)),
            diagnostics={k: dict(v) for k, v in (diagnostics or {}).items()},
        )


class Qrels(BaseModel):
    """Relevanzurteile query_id -> doc_id -> Grad (0..3)."""

    model_config = ConfigDict(frozen=True)

    grades: Dict[str, Dict[str, RelevanceGrade]] = Field(default_factory=dict)

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.grades.get(query_id, {}).get(doc_id, 0)

    def judged(self, query_id: str) -> Dict[str, int]:
        return dict(self.grades.get(query_id, {}))

    def has_query(self, query_id: str) -> bool:
        return bool(self.grades.get(query_id))

    @property
    def query_ids(self) -> List[str]:
        return sorted(self.grades)

    def relevant_count(self, query_id: str, threshold: int = 2) -> int:
        return sum(1 for g in self.grades.get(query_id, {}).values() if g >= threshold)
