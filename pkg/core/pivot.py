import random
import re
from typing import Dict, List, Optional, Sequence, Set, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from core.llm_client import ChatClient
from core.models import Document, Qrels, Query, RelevanceGrade, pivot_doc_id
from core.rerankers import InferenceLedger
from utils.preprocess import estimate_tokens, limit_length, limit_tokens, split_sentences, tokenize
from utils.prompt_loader import fill_placeholders, load_prompt

DEFAULT_TAU = 2
SENTENCES_PER_PIVOT = 4

# Fallback-Sätze, falls der Korpus keine passenden Sätze liefert
_FILLER_SENTENCES = (
    "This overview collects general background material.",
    "Several loosely connected remarks follow in no particular order.",
    "Readers may find further context in related sources.",
    "The remaining notes describe tangential circumstances.",
)


class EmptyCompletionError(RuntimeError):
    pass


class JudgeParseError(ValueError):
    def __init__(self, raw: str):
        super().__init__(f"Judge-Ausgabe ohne Grad 0-3: {raw[:120]!r}")
        self.raw = raw


class PivotPrompt(BaseModel):
    model_config = ConfigDict(frozen=True)

    system: str
    user: str
    tau: RelevanceGrade


class JudgeVerdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    grade: RelevanceGrade
    raw: str


class PivotDocument(BaseModel):
    model_config = ConfigDict(frozen=True)

    query_id: str = Field(min_length=1)
    text: str
    tau: RelevanceGrade = DEFAULT_TAU
    verified_grade: Optional[RelevanceGrade] = None
    generator_id: str = Field(min_length=1)
    token_estimate: int = Field(ge=0)

    @field_validator("text")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("Pivot-Text darf nicht leer sein")
        return value

    def as_document(self) -> Document:
        return Document(id=pivot_doc_id(self.query_id), text=self.text)

    def cache_key(self) -> Tuple[str, int, str]:
        return (self.query_id, self.tau, self.generator_id)


# ---------------------------------------------------------
# Prompt + Hilfsfunktionen
# ---------------------------------------------------------
def render_prompt(query: Query, tau: int = DEFAULT_TAU) -> PivotPrompt:
    if tau not in (0, 1, 2, 3):
        raise ValueError(f"tau muss in 0..3 liegen, erhalten: {tau}")
    user = fill_placeholders(load_prompt("pivot_user"), {"Q": query.text, "tau": str(tau)})
    return PivotPrompt(system=load_prompt("pivot_system"), user=user, tau=tau)


def max_token_bound(avgdl: float, lo: int = 200, hi: int = 512) -> int:
    return int(min(hi, max(lo, round(2 * avgdl))))


def make_generator_id(kind: str, model: str, temperature: float, top_p: float, seed: Optional[int]) -> str:
    return f"{kind}:{model}:t{temperature:g}:p{top_p:g}:s{seed}"


def parse_grade(raw: str) -> int:
    """Letzte ganze Zahl aus {0,1,2,3} in der Ausgabe."""
    matches = re.findall(r"(?<!\d)[0-3](?!\d)", raw or "")
    if not matches:
        raise JudgeParseError(raw or "")
    return int(matches[-1])


def query_terms(query: Query) -> Set[str]:
    return set(tokenize(query.text))


def is_on_topic(sentence: str, terms: Set[str]) -> bool:
    """On-topic = mindestens zwei verschiedene Query-Terme (bei Ein-Wort-Queries einer)."""
    if not terms:
        return False
    hits = terms.intersection(tokenize(sentence))
    return len(hits) >= min(2, len(terms))


def _terminated(sentence: str) -> str:
    sentence = sentence.strip()
    return sentence if sentence[-1:] in ".!?" else sentence + "."


# ---------------------------------------------------------
# Generatoren
# ---------------------------------------------------------
class HttpPivotGenerator:
    """Pivot über Chat-Completions. Der Seed wird pro Versuch weitergezählt."""

    def __init__(self, client: ChatClient, temperature: float = 0.7, top_p: float = 0.9, seed: Optional[int] = 42):
        self.client = client
        self.temperature = temperature
        self.top_p = top_p
        self.seed = seed
        self.generator_id = make_generator_id("http", client.config.model, temperature, top_p, seed)

    async def generate(self, prompt: PivotPrompt, query: Query, max_tokens: int, attempt: int = 1) -> str:
        seed = None if self.seed is None else self.seed + attempt - 1
        return await self.client.complete(
            [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            max_tokens=max_tokens,
            temperature=self.temperature,
            top_p=self.top_p,
            seed=seed,
        )


class OraclePivotGenerator:
    """
    Deterministischer Generator aus Qrels und Korpus: tau On-topic-Sätze aus
    bewerteten Dokumenten, aufgefüllt mit tangentialen Sätzen.
    """

    def __init__(self, qrels: Qrels, corpus: Sequence[Document], seed: int = 42):
        self.qrels = qrels
        self.seed = seed
        self.generator_id = make_generator_id("oracle", "qrels", 0.0, 1.0, seed)
        self._corpus: Dict[str, Document] = {d.id: d for d in corpus}
        self._background: Optional[List[str]] = None

    def _sentences_of(self, doc_ids) -> List[str]:
        out = []
        for doc_id in sorted(doc_ids):
            doc = self._corpus.get(doc_id)
            if doc is not None:
                out.extend(_terminated(s) for s in split_sentences(doc.text))
        return out

    def _background_sentences(self) -> List[str]:
        if self._background is None:
            ids = sorted(self._corpus)[:500]
            self._background = self._sentences_of(ids)
        return self._background

    async def generate(self, prompt: PivotPrompt, query: Query, max_tokens: int, attempt: int = 1) -> str:
        terms = query_terms(query)
        rng = random.Random(f"{self.seed}:{query.id}:{prompt.tau}:{attempt}")
        judged = self.qrels.judged(query.id)

        on_pool = sorted({s for s in self._sentences_of(d for d, g in judged.items() if g > 0) if is_on_topic(s, terms)})
        off_pool = sorted(
            {s for s in self._sentences_of(judged) + self._background_sentences() if not is_on_topic(s, terms)}
        )

        n_on = prompt.tau
        on = rng.sample(on_pool, n_on) if len(on_pool) >= n_on else on_pool + [
            _terminated(f"{query.text} is the subject of note {i + 1}") for i in range(n_on - len(on_pool))
        ]
        n_off = SENTENCES_PER_PIVOT - n_on
        fillers = [s for s in _FILLER_SENTENCES if not is_on_topic(s, terms)]
        off = rng.sample(off_pool, n_off) if len(off_pool) >= n_off else (off_pool + fillers)[:n_off]

        sentences = on + off
        rng.shuffle(sentences)
        return " ".join(sentences)


# ---------------------------------------------------------
# Judges
# ---------------------------------------------------------
class OracleJudge:
    """Zählt On-topic-Sätze, gedeckelt bei 3."""

    judge_id = "oracle"

    async def judge(self, query: Query, text: str) -> str:
        terms = query_terms(query)
        grade = min(3, sum(1 for s in split_sentences(text) if is_on_topic(s, terms)))
        return f"score: {grade}"


class HttpJudge:
    def __init__(self, client: ChatClient):
        self.client = client
        self.judge_id = f"http:{client.config.model}"
        self._template = load_prompt("judge")

    async def judge(self, query: Query, text: str) -> str:
        prompt = fill_placeholders(self._template, {"query": query.text, "passage": limit_length(text, 4000)})
        return await self.client.complete([{"role": "user", "content": prompt}], max_tokens=16, temperature=0.0)


# ---------------------------------------------------------
# Operationen
# ---------------------------------------------------------
async def generate_pivot(
    generator,
    query: Query,
    tau: int = DEFAULT_TAU,
    length_hint: int = 512,
    ledger: Optional[InferenceLedger] = None,
    attempt: int = 1,
) -> PivotDocument:
    prompt = render_prompt(query, tau)
    raw = await generator.generate(prompt, query, length_hint, attempt)
    if ledger is not None:
        ledger.record(query.id, "pivot_gen")
    if not raw or not raw.strip():
        raise EmptyCompletionError(f"empty completion ({generator.generator_id}, Query {query.id})")

    text = limit_tokens(raw, length_hint)
    return PivotDocument(
        query_id=query.id,
        text=text,
        tau=tau,
        generator_id=generator.generator_id,
        token_estimate=estimate_tokens(text),
    )


async def verify_pivot(
    judge, query: Query, pivot: PivotDocument, ledger: Optional[InferenceLedger] = None
) -> Tuple[JudgeVerdict, PivotDocument]:
    raw = await judge.judge(query, pivot.text)
    if ledger is not None:
        ledger.record(query.id, "judge")
    verdict = JudgeVerdict(grade=parse_grade(raw), raw=raw)
    return verdict, pivot.model_copy(update={"verified_grade": verdict.grade})


async def generate_verified_pivot(
    generator,
    judge,
    query: Query,
    tau: int = DEFAULT_TAU,
    max_attempts: int = 3,
    length_hint: int = 512,
    ledger: Optional[InferenceLedger] = None,
) -> PivotDocument:
    if max_attempts < 1:
        raise ValueError("max_attempts muss >= 1 sein")

    attempts: List[PivotDocument] = []
    for attempt in range(1, max_attempts + 1):
        pivot = await generate_pivot(generator, query, tau, length_hint, ledger, attempt)
        verdict, pivot = await verify_pivot(judge, query, pivot, ledger)
        if verdict.grade == tau:
            logger.debug(f"✅ Pivot {query.id} verifiziert (Versuch {attempt}, Grad {tau})")
            return pivot
        attempts.append(pivot)

    best_idx = min(range(len(attempts)), key=lambda i: (abs(attempts[i].verified_grade - tau), i))
    best = attempts[best_idx]
    logger.warning(
        f"⚠️ Pivot {query.id}: tau={tau} nicht erreicht nach {max_attempts} Versuchen, "
        f"nutze Versuch {best_idx + 1} (Grad {best.verified_grade})"
    )
    return best
