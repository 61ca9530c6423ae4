"""Result records and their CSV files (UTF-8, LF line endings, header row)."""
from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__, kernels

Z95 = 1.96
SINGLE_TASK_WARNING = "single task: std_error undefined, reported as 0"


def build_id() -> str:
    return f"{__version__}+{kernels.BACKEND}"


def std_error(values: Sequence[float]) -> float:
    """Standard error of the mean across tasks (sample std, ddof 1); 0 for one value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("std_error of an empty sample")
    if values.size == 1:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(values.size))


@dataclass(frozen=True)
class ResultRecord:
    method: str
    task: str
    shots: int
    step_count: int
    metric: str
    mean: float
    std_error: float
    ci95: float
    n_tasks: int
    seed: int
    build_id: str
    warning: str = ""

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if not (np.isfinite(self.mean) and np.isfinite(self.std_error)):
            raise ValueError(f"non-finite result for {self.method} step {self.step_count}")


def summarize(values: Sequence[float], **meta) -> ResultRecord:
    """One record from per-task values; warns when there is a single task."""
    values = np.asarray(values, dtype=np.float64)
    se = std_error(values)
    warning = ""
    if values.size == 1:
        warning = SINGLE_TASK_WARNING
        warnings.warn(SINGLE_TASK_WARNING, RuntimeWarning, stacklevel=2)
    return ResultRecord(mean=float(values.mean()), std_error=se, ci95=Z95 * se, n_tasks=int(values.size),
                        warning=warning, **meta)


def curve_records(curves: np.ndarray, **meta) -> list[ResultRecord]:
    """Records for each column of a (n_tasks, steps + 1) curve array."""
    return [summarize(curves[:, k], step_count=k, **meta) for k in range(curves.shape[1])]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


RECORD_FIELDS = tuple(f.name for f in fields(ResultRecord))


def write_records(path: str | Path, records: Sequence[ResultRecord]) -> None:
    write_csv(path, RECORD_FIELDS, ([asdict(r)[k] for k in RECORD_FIELDS] for r in records))


def write_training_log(path: str | Path, log) -> None:
    """Per-iteration losses; wall-clock time is kept out so reruns match byte for byte."""
    write_csv(path, ("iteration", "pre_loss", "post_loss"), ((r.iteration, r.pre_loss, r.post_loss) for r in log))


def write_rl_curve(path: str | Path, curves: np.ndarray) -> None:
    """update_count, mean_return, std_error, n_tasks for each update count."""
    rows = []
    for k in range(curves.shape[1]):
        rows.append((k, float(curves[:, k].mean()), std_error(curves[:, k]), curves.shape[0]))
    write_csv(path, ("update_count", "mean_return", "std_error", "n_tasks"), rows)
