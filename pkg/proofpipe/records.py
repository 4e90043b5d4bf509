"""
JSONL record files
"""

from __future__ import annotations

import json
import logging
import pathlib
from typing import Any, Iterable, Iterator

from proofpipe.core import Trajectory
from proofpipe.exceptions import ConfigParseError, ReportIOError

logger = logging.getLogger(__name__)


def iter_jsonl(path: pathlib.Path) -> Iterator[dict[str, Any]]:
    """
    Yield one object per non-blank line of a JSONL file
    """
    text = pathlib.Path(path).read_text(encoding="utf-8")
    for line_number, line in enumerate(text.replace("\r\n", "\n").split("\n"), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            msg = f"{path}:{line_number}: invalid JSON record ({e.msg})"
            raise ConfigParseError(msg) from e
        if not isinstance(record, dict):
            msg = f"{path}:{line_number}: expected a JSON object"
            raise ConfigParseError(msg)
        yield record


def write_jsonl(path: pathlib.Path, records: Iterable[dict[str, Any]]) -> int:
    """
    Write records to a JSONL file, one object per line

    Returns
    -------
    int
        The number of records written
    """
    path = pathlib.Path(path)
    lines = [json.dumps(record, sort_keys=True) for record in records]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    except OSError as e:
        msg = f"Could not write {path}: {e}"
        raise ReportIOError(msg) from e
    logger.debug("[proofpipe] Wrote %d records to %s", len(lines), path)
    return len(lines)


def read_trajectories(path: pathlib.Path) -> list[Trajectory]:
    """
    Read a trajectory trace file
    """
    return [Trajectory.from_record(record) for record in iter_jsonl(path)]


def write_trajectories(path: pathlib.Path, trajectories: Iterable[Trajectory]) -> int:
    """
    Write a trajectory trace file
    """
    return write_jsonl(path, (trajectory.to_record() for trajectory in trajectories))
