"""Order-preserving task map over an optional process pool."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_workers() -> int:
    return os.cpu_count() or 1


class TaskPool:
    """Maps a picklable function over items, returning results in item order.

    With ``workers <= 1`` everything runs in-process. Callers reduce the
    returned list sequentially, so results do not depend on the worker count.
    """

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._executor: ProcessPoolExecutor | None = None

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        if self._executor is None:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
        chunk = math.ceil(len(items) / self.workers)
        return list(self._executor.map(fn, items, chunksize=chunk))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self) -> "TaskPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
