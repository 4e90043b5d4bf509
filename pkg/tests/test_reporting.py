"""
Testing trace statistics and training report files
"""

from __future__ import annotations

import json

import pandas as pd
import pytest

from proofpipe.exceptions import ConfigParseError, EmptyTraceError, ReportIOError
from proofpipe.reporting import (
    STATS_COLUMNS,
    emit_stats,
    emit_train_report,
    read_stats,
    stats_frame,
    train_frame,
)
from proofpipe.training import train_sim
from proofpipe.tts import ActionKind, RunTrace, TtsAction, trace_stats
from tests.conftest import SMALL, ToyFixture, with_train

TRACES = [
    RunTrace(
        run_index=0,
        actions=[
            TtsAction(kind=ActionKind.INITIAL_SOLVE, generated_tokens=1200),
            TtsAction(kind=ActionKind.REFINEMENT, generated_tokens=900),
            TtsAction(kind=ActionKind.VERIFICATION, generated_tokens=400),
            TtsAction(kind=ActionKind.VERDICT_PARSE, generated_tokens=1, verdict="fail"),
        ],
    ),
    RunTrace(
        run_index=1,
        actions=[
            TtsAction(kind=ActionKind.INITIAL_SOLVE, generated_tokens=1500),
            TtsAction(kind=ActionKind.REFINEMENT, generated_tokens=700),
            TtsAction(kind=ActionKind.VERIFICATION, generated_tokens=300),
            TtsAction(kind=ActionKind.VERDICT_PARSE, generated_tokens=1, verdict="pass"),
        ],
    ),
]


def test_stats_frame_rows_in_kind_order() -> None:
    """
    One row per action kind present
    """
    frame = stats_frame(trace_stats(TRACES))
    assert list(frame.columns) == STATS_COLUMNS
    assert list(frame["kind"]) == [kind.value for kind in ActionKind]
    assert list(frame["count"]) == [2, 2, 2, 2]
    empty = stats_frame({})
    assert list(empty.columns) == STATS_COLUMNS
    assert empty.empty


def test_emit_stats_csv(toy: ToyFixture) -> None:
    """
    CSV output has the fixed header and reads back equal
    """
    path = toy.workspace / "reports" / "stats.csv"
    stats = emit_stats(TRACES, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "kind,count,median,p25,p75,max"
    assert [line.split(",")[0] for line in lines[1:]] == [kind.value for kind in ActionKind]
    assert stats[ActionKind.INITIAL_SOLVE].median == 1350.0
    assert stats[ActionKind.VERIFICATION].p25 == 325.0
    assert read_stats(path) == stats


def test_emit_stats_json(toy: ToyFixture) -> None:
    """
    A .json path gets a list of row objects
    """
    path = toy.workspace / "stats.json"
    stats = emit_stats(TRACES[0].actions, path)
    rows = json.loads(path.read_text(encoding="utf-8"))
    assert [row["kind"] for row in rows] == [kind.value for kind in ActionKind]
    assert all(row["count"] == 1 for row in rows)
    assert read_stats(path) == stats


def test_emit_stats_empty_writes_nothing(toy: ToyFixture) -> None:
    """
    Traces without actions raise before any file is created
    """
    path = toy.workspace / "stats.csv"
    with pytest.raises(EmptyTraceError):
        emit_stats([RunTrace(run_index=0)], path)
    assert not path.exists()


def test_emit_stats_unwritable(toy: ToyFixture) -> None:
    """
    A path below a regular file cannot be written
    """
    blocker = toy.write_text("blocker", "not a directory")
    with pytest.raises(ReportIOError):
        emit_stats(TRACES, blocker / "stats.csv")


def test_read_stats_errors(toy: ToyFixture) -> None:
    """
    Missing files and columns raise ConfigParseError
    """
    with pytest.raises(ConfigParseError, match="Could not read"):
        read_stats(toy.workspace / "missing.csv")
    partial = toy.write_text("partial.csv", "kind,count\nverification,3\n")
    with pytest.raises(ConfigParseError, match="missing columns max, median, p25, p75"):
        read_stats(partial)


def test_train_report(toy: ToyFixture) -> None:
    """
    One row per step record with every summary column
    """
    report = train_sim(with_train(SMALL, refined_steps=1), seed=0)
    frame = train_frame(report)
    assert len(frame) == len(report.steps) == 5
    assert "type" not in frame.columns
    assert list(frame["step"]) == [0, 1, 2, 3, 4]
    path = emit_train_report(report, toy.workspace / "train.csv")
    loaded = pd.read_csv(path)
    assert list(loaded.columns) == list(frame.columns)
    assert list(loaded["stage"]) == ["initial", "coarse", "coarse", "coarse", "refined"]
