"""CSV export of scenario results.

``summary.csv``: ``scenario,mode,rank,thread,finish_s,iterations`` (one row
per thread and mode).  ``timeline.csv``: ``time_s,rank,thread,event,value``
with ``thread = -1`` for process-level rows (a checkpoint, or a
``reassign`` of the whole process budget).
"""
from __future__ import annotations

import csv
from pathlib import Path

SUMMARY_HEADER = ("scenario", "mode", "rank", "thread", "finish_s", "iterations")
TIMELINE_HEADER = ("time_s", "rank", "thread", "event", "value")


def _num(x: float) -> str:
    if float(x).is_integer():
        return str(int(x))
    return f"{x:.6f}"


def summary_rows(result) -> list[tuple]:
    rows = []
    for r, (f_row, i_row) in enumerate(zip(result.thread_finish, result.thread_iterations)):
        for k, (f, n) in enumerate(zip(f_row, i_row)):
            rows.append((result.name, result.mode, r, k, f"{f:.6f}", n))
    return rows


def write_summary_csv(results, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for result in results:
            writer.writerows(summary_rows(result))
    return path


def write_timeline_csv(result, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TIMELINE_HEADER)
        for t, rank, thread, event, value in result.timeline:
            writer.writerow((f"{t:.6f}", rank, thread, event, _num(value)))
    return path
