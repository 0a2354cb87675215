import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Union

from loguru import logger

from core.models import Document, Qrels, Query, RankedList

TextSource = Union[str, Iterable[str]]


class TrecFormatError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"Zeile {line_no}: {message}")
        self.line_no = line_no


class QrelsFormatError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"Qrels Zeile {line_no}: {message}")
        self.line_no = line_no


def _lines(stream: TextSource) -> Iterable[str]:
    if isinstance(stream, str):
        return stream.splitlines()
    return stream


# ---------------------------------------------------------
# TREC Run: qid Q0 docid rank score tag
# ---------------------------------------------------------
def parse_trec_run(stream: TextSource) -> Dict[str, RankedList]:
    """
    Liest einen TREC-Run. Die Rank-Spalte bestimmt nicht die Ordnung,
    sie landet in diagnostics["trec_rank"].
    """
    rows: Dict[str, List[tuple]] = defaultdict(list)
    seen = set()

    for line_no, line in enumerate(_lines(stream), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise TrecFormatError(f"erwartet 6 Spalten, gefunden {len(parts)}", line_no)

        qid, _, docid, rank_raw, score_raw, _ = parts
        try:
            rank = int(rank_raw)
            score = float(score_raw)
        except ValueError:
            raise TrecFormatError(f"Rank/Score nicht numerisch: {rank_raw!r} {score_raw!r}", line_no)
        if not math.isfinite(score):
            raise TrecFormatError(f"Score nicht endlich: {score_raw!r}", line_no)
        if (qid, docid) in seen:
            raise TrecFormatError(f"doppeltes Paar ({qid}, {docid})", line_no)

        seen.add((qid, docid))
        rows[qid].append((docid, score, rank))

    run = {}
    for qid in sorted(rows):
        entries = rows[qid]
        run[qid] = RankedList.from_pairs(
            qid,
            [(d, s) for d, s, _ in entries],
            diagnostics={"trec_rank": {d: float(r) for d, _, r in entries}},
        )
    return run


def emit_trec_run(run: Mapping[str, RankedList], tag: str) -> str:
    lines = []
    for qid in sorted(run):
        ordered = sorted(run[qid].entries, key=lambda e: (-e.score, e.doc_id))
        for rank, entry in enumerate(ordered, start=1):
            lines.append(f"{qid} Q0 {entry.doc_id} {rank} {entry.score:.6f} {tag}")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------
# TREC Qrels: qid 0 docid grade
# ---------------------------------------------------------
def parse_qrels(stream: TextSource) -> Qrels:
    grades: Dict[str, Dict[str, int]] = defaultdict(dict)

    for line_no, line in enumerate(_lines(stream), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise QrelsFormatError(f"erwartet 4 Spalten, gefunden {len(parts)}", line_no)

        qid, _, docid, grade_raw = parts
        try:
            grade = int(grade_raw)
        except ValueError:
            raise QrelsFormatError(f"Grad nicht ganzzahlig: {grade_raw!r}", line_no)
        if grade < 0 or grade > 3:
            raise QrelsFormatError(f"Grad {grade} außerhalb von [0,3]", line_no)

        previous = grades[qid].get(docid)
        if previous is not None and previous != grade:
            raise QrelsFormatError(
                f"widersprüchliche Grade für ({qid}, {docid}): {previous} vs {grade}", line_no
            )
        grades[qid][docid] = grade

    return Qrels(grades=dict(grades))


def emit_qrels(qrels: Qrels) -> str:
    lines = []
    for qid in qrels.query_ids:
        for docid, grade in sorted(qrels.grades[qid].items()):
            lines.append(f"{qid} 0 {docid} {grade}")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------
# Datei-Helfer
# ---------------------------------------------------------
def read_run(path: Union[str, Path]) -> Dict[str, RankedList]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Run-Datei fehlt: {path}")
    with path.open("r", encoding="utf-8") as f:
        run = parse_trec_run(f)
    logger.info(f"📥 Run geladen: {path} ({len(run)} Queries)")
    return run


def write_run(path: Union[str, Path], run: Mapping[str, RankedList], tag: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(emit_trec_run(run, tag), encoding="utf-8")
    return path


def read_qrels(path: Union[str, Path]) -> Qrels:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Qrels-Datei fehlt: {path}")
    with path.open("r", encoding="utf-8") as f:
        return parse_qrels(f)


def write_qrels(path: Union[str, Path], qrels: Qrels) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(emit_qrels(qrels), encoding="utf-8")
    return path


# ---------------------------------------------------------
# JSONL (Korpus, Queries, Pivot-Cache)
# ---------------------------------------------------------
def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"JSONL-Datei fehlt: {path}")

    records = []
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path} Zeile {line_no}: kein gültiges JSON ({e})")
    return records


def write_jsonl(path: Union[str, Path], records: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_documents(path: Union[str, Path]) -> List[Document]:
    return [Document(id=str(r["id"]), text=str(r.get("text", ""))) for r in read_jsonl(path)]


def read_queries(path: Union[str, Path]) -> List[Query]:
    return [Query(id=str(r["id"]), text=str(r["text"])) for r in read_jsonl(path)]
