import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from core.models import Document, Qrels, Query, RankedList
from core.pivot import is_on_topic, query_terms
from utils.preprocess import split_sentences
from utils.trec_io import write_jsonl, write_qrels, write_run

QUERY_TERMS = 3
CLUSTER_TERMS = 5
SENTENCES_PER_DOC = 4
# Pivot liegt knapp unter seinem Textgrad, zwischen den Graden tau-1 und tau
PIVOT_GRADE_OFFSET = 0.25


class SynthSpec(BaseModel):
    """
    Parameter des synthetischen Benchmarks.
    `doc_length` ist die Tokenzahl pro Dokument (vier Sätze gleicher Länge).
    """

    model_config = ConfigDict(frozen=True)

    seed: int = 42
    num_queries: int = Field(default=50, ge=1)
    m: int = Field(default=100, ge=1)
    docs_per_query: Optional[int] = Field(default=None, ge=1)
    grade_distribution: Tuple[float, float, float, float] = (0.5, 0.35, 0.1, 0.05)
    first_stage_quality: float = Field(default=0.5, ge=0, le=1)
    vocab_size: int = Field(default=2000, ge=16)
    doc_length: int = Field(default=40, ge=16)

    @field_validator("grade_distribution")
    @classmethod
    def _distribution(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(p < 0 for p in value):
            raise ValueError(f"Negative Wahrscheinlichkeit in {value}")
        if not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError(f"grade_distribution muss sich zu 1 summieren, ist {sum(value)}")
        return value

    @property
    def pool_size(self) -> int:
        return self.docs_per_query if self.docs_per_query is not None else self.m


@dataclass(frozen=True)
class SynthBundle:
    corpus: List[Document]
    queries: List[Query]
    qrels: Qrels
    run: Dict[str, RankedList]


# ---------------------------------------------------------
# Hilfsfunktionen
# ---------------------------------------------------------
def grade_counts(distribution: Tuple[float, ...], n: int) -> List[int]:
    """Exakte Anteile per Largest-Remainder, bei Gleichstand der niedrigere Grad zuerst."""
    raw = [p * n for p in distribution]
    counts = [math.floor(r) for r in raw]
    rest = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda g: (-(raw[g] - counts[g]), g))
    for g in order[:rest]:
        counts[g] += 1
    return counts


def _query_vocab(q_index: int) -> Tuple[List[str], List[str]]:
    terms = [f"q{q_index}t{j}" for j in range(QUERY_TERMS)]
    cluster = [f"q{q_index}c{j}" for j in range(CLUSTER_TERMS)]
    return terms, cluster


def _sentence(words: List[str], rng: random.Random) -> str:
    rng.shuffle(words)
    return " ".join(words) + "."


def _doc_text(grade: int, terms: List[str], cluster: List[str], spec: SynthSpec, rng: random.Random) -> str:
    words_per_sentence = spec.doc_length // SENTENCES_PER_DOC
    sentences = []
    # On-topic: zwei verschiedene Query-Terme + ein Cluster-Term
    for _ in range(grade):
        words = rng.sample(terms, 2) + [rng.choice(cluster)]
        words += [f"w{rng.randrange(spec.vocab_size)}" for _ in range(words_per_sentence - len(words))]
        sentences.append(_sentence(words, rng))
    # Off-topic: genau ein Query-Term, sonst Hintergrund
    for _ in range(SENTENCES_PER_DOC - grade):
        words = [rng.choice(terms)]
        words += [f"w{rng.randrange(spec.vocab_size)}" for _ in range(words_per_sentence - 1)]
        sentences.append(_sentence(words, rng))
    rng.shuffle(sentences)
    return " ".join(sentences)


def first_stage_score(grade: int, quality: float, u: float, v: float) -> float:
    return round(quality * grade + (1 - quality) * 3 * u + 0.001 * v, 6)


# ---------------------------------------------------------
# Generator
# ---------------------------------------------------------
def generate_synth(spec: SynthSpec) -> SynthBundle:
    if spec.m > spec.pool_size:
        raise ValueError(f"Nicht erfüllbar: m={spec.m} > {spec.pool_size} Dokumente pro Query")

    width = len(str(spec.num_queries - 1))
    doc_width = len(str(spec.pool_size - 1))
    corpus: List[Document] = []
    queries: List[Query] = []
    grades: Dict[str, Dict[str, int]] = {}
    run: Dict[str, RankedList] = {}

    for qi in range(spec.num_queries):
        qid = f"q{qi:0{width}d}"
        terms, cluster = _query_vocab(qi)
        queries.append(Query(id=qid, text=" ".join(terms)))

        # getrennte Zufallsströme, damit der Qualitätsregler Texte und Grade nicht verändert
        rng_grades = random.Random(f"{spec.seed}:grades:{qid}")
        rng_scores = random.Random(f"{spec.seed}:scores:{qid}")

        pool = [g for g, c in enumerate(grade_counts(spec.grade_distribution, spec.pool_size)) for _ in range(c)]
        rng_grades.shuffle(pool)

        pairs = []
        grades[qid] = {}
        for di, grade in enumerate(pool):
            doc_id = f"{qid}-d{di:0{doc_width}d}"
            rng_text = random.Random(f"{spec.seed}:text:{doc_id}")
            corpus.append(Document(id=doc_id, text=_doc_text(grade, terms, cluster, spec, rng_text)))
            grades[qid][doc_id] = grade
            u, v = rng_scores.random(), rng_scores.random()
            pairs.append((doc_id, first_stage_score(grade, spec.first_stage_quality, u, v)))

        full = RankedList.from_pairs(qid, pairs)
        run[qid] = RankedList(query_id=qid, entries=full.entries[: spec.m])

    logger.info(
        f"🧪 Synthetischer Benchmark: {len(queries)} Queries, {len(corpus)} Dokumente, "
        f"Qualität {spec.first_stage_quality}"
    )
    return SynthBundle(corpus=corpus, queries=queries, qrels=Qrels(grades=grades), run=run)


def write_synth(bundle: SynthBundle, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {
        "corpus": write_jsonl(out_dir / "corpus.jsonl", ({"id": d.id, "text": d.text} for d in bundle.corpus)),
        "queries": write_jsonl(out_dir / "queries.jsonl", ({"id": q.id, "text": q.text} for q in bundle.queries)),
        "qrels": write_qrels(out_dir / "qrels.txt", bundle.qrels),
        "run": write_run(out_dir / "run.txt", bundle.run, "synth"),
    }
    logger.info(f"💾 Synthetischer Benchmark gespeichert unter {out_dir}")
    return paths


class SynthPivotScorer:
    """
    Stage-Scorer auf der Skala des synthetischen Erststufen-Scores.
    Der Pivot wird wie ein Dokument bewertet: Grad = On-topic-Sätze seines Textes minus 0.25,
    gemischt mit dem Erststufen-Rauschen aus einem eigenen Strom pro Query.
    """

    scorer_id = "synth"

    def __init__(self, quality: float, seed: int = 42):
        self.quality = quality
        self.seed = seed

    @staticmethod
    def pivot_grade(query: Query, text: str) -> float:
        terms = query_terms(query)
        on_topic = min(3, sum(1 for s in split_sentences(text) if is_on_topic(s, terms)))
        return on_topic - PIVOT_GRADE_OFFSET

    async def score_pivot(self, query: Query, pivot: Document) -> float:
        u = random.Random(f"{self.seed}:pivot:{query.id}").random()
        grade = self.pivot_grade(query, pivot.text)
        return round(self.quality * grade + (1 - self.quality) * 3 * u + 0.0005, 6)

    def doc_scores(self, ranked: RankedList) -> Dict[str, float]:
        return ranked.score_map()
