import csv
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

from loguru import logger

from core.metrics import MetricReport, format_table
from core.schedulers import ScheduleTrace

FAILED_MARKER = "FAILED"


def write_json(path: Path, data: Any) -> Path:
    """Stabile Bytes: sortierte Schlüssel, feste Einrückung, abschließender Zeilenumbruch."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_report(out_dir: Path, report: MetricReport) -> Path:
    path = write_json(out_dir / "report.json", report.model_dump())
    logger.info(f"📄 Report gespeichert unter: {path}")
    return path


def write_traces(
    out_dir: Path,
    traces: Mapping[str, ScheduleTrace],
    ledger_snapshot: Mapping[str, Mapping[str, int]],
    decisions: Optional[Mapping[str, Sequence[Dict[str, Any]]]] = None,
    include_timing: bool = False,
) -> Path:
    exclude = None if include_timing else {"batch_seconds"}
    payload = {
        "traces": {qid: traces[qid].model_dump(exclude=exclude) for qid in sorted(traces)},
        "ledger": {qid: dict(ledger_snapshot[qid]) for qid in sorted(ledger_snapshot)},
    }
    if decisions:
        payload["decisions"] = {qid: list(decisions[qid]) for qid in sorted(decisions)}
    return write_json(out_dir / "trace.json", payload)


def write_histogram(out_dir: Path, cutoffs: Mapping[str, Any]) -> Path:
    path = out_dir / "cutoffs.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin", "count"])
        for row in cutoffs["histogram"]:
            writer.writerow([row["bin"], row["count"]])
    return path


def write_table(out_dir: Path, reports: Sequence[MetricReport]) -> Path:
    path = out_dir / "table.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(reports), encoding="utf-8")
    return path


def mark_failed(out_dir: Path, stage: str, error: BaseException) -> Path:
    path = out_dir / FAILED_MARKER
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"stage: {stage}\nerror: {type(error).__name__}: {error}\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"FAILED-Marker konnte nicht geschrieben werden: {e}")
    return path


def clear_failed(out_dir: Path) -> None:
    (out_dir / FAILED_MARKER).unlink(missing_ok=True)
