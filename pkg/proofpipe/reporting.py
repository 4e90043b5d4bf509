"""
Tabular summaries of traces and training runs
"""

from __future__ import annotations

import logging
import pathlib
from typing import Sequence

import pandas as pd

from proofpipe.exceptions import ConfigParseError, ReportIOError
from proofpipe.training import TrainReport
from proofpipe.tts import ActionKind, ActionStats, RunTrace, TtsAction, trace_stats

logger = logging.getLogger(__name__)

# one row per action kind, in ActionKind order
STATS_COLUMNS = ["kind", "count", "median", "p25", "p75", "max"]


def stats_frame(stats: dict[ActionKind, ActionStats]) -> pd.DataFrame:
    """
    Order statistics as a table with :data:`STATS_COLUMNS`
    """
    rows = [{"kind": kind.value, **stats[kind].to_dict()} for kind in ActionKind if kind in stats]
    return pd.DataFrame(rows, columns=STATS_COLUMNS)


def _write(frame: pd.DataFrame, out_path: pathlib.Path) -> pathlib.Path:
    out_path = pathlib.Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if out_path.suffix == ".json":
            frame.to_json(out_path, orient="records", indent=2)
        else:
            frame.to_csv(out_path, index=False)
    except OSError as e:
        msg = f"Could not write {out_path}: {e}"
        raise ReportIOError(msg) from e
    logger.debug("[proofpipe] Wrote %d rows to %s", len(frame), out_path)
    return out_path


def emit_stats(
    traces: Sequence[RunTrace | TtsAction], out_path: pathlib.Path
) -> dict[ActionKind, ActionStats]:
    """
    Write per-action-kind generated token statistics

    A ``.json`` path gets a list of row objects, anything else CSV with
    the header ``kind,count,median,p25,p75,max``.

    Raises
    ------
    EmptyTraceError
        When the traces contain no actions; nothing is written
    ReportIOError
        When the file cannot be written
    """
    stats = trace_stats(traces)
    _write(stats_frame(stats), out_path)
    return stats


def read_stats(path: pathlib.Path) -> dict[ActionKind, ActionStats]:
    """
    Parse a file written by :func:`emit_stats`
    """
    path = pathlib.Path(path)
    try:
        if path.suffix == ".json":
            frame = pd.read_json(path, orient="records")
        else:
            frame = pd.read_csv(path)
    except (OSError, ValueError) as e:
        msg = f"Could not read statistics from {path}: {e}"
        raise ConfigParseError(msg) from e
    missing = set(STATS_COLUMNS).difference(frame.columns)
    if missing:
        msg = f"{path}: missing columns {', '.join(sorted(missing))}"
        raise ConfigParseError(msg)
    return {
        ActionKind(row["kind"]): ActionStats(
            count=int(row["count"]),
            median=float(row["median"]),
            p25=float(row["p25"]),
            p75=float(row["p75"]),
            max=float(row["max"]),
        )
        for row in frame.to_dict(orient="records")
    }


def train_frame(report: TrainReport) -> pd.DataFrame:
    """
    One row per step record, the initial state first
    """
    return pd.DataFrame([record.to_record() for record in report.steps]).drop(columns="type")


def emit_train_report(report: TrainReport, out_path: pathlib.Path) -> pathlib.Path:
    """
    Write the per-step training summary as CSV, or JSON for a ``.json`` path
    """
    return _write(train_frame(report), out_path)
