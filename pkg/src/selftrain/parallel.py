"""Order-preserving fan-out for offline build and eval phases.

Work items run one per unit with their own derived RNG streams, so results
are assembled by index and never depend on the worker count.  torch's
intra-op threading is pinned to one thread while a pool is active; kernel
reduction order then cannot differ between worker counts.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import torch

T = TypeVar("T")
R = TypeVar("R")


class BuildError(RuntimeError):
    """Offline dataset construction failed (too many skipped examples)."""


def map_indexed(fn: Callable[[int, T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Apply ``fn(index, item)`` to every item, results in item order."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        if workers == 1:
            return [fn(i, item) for i, item in enumerate(items)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(len(items)), items))
    finally:
        torch.set_num_threads(old_threads)


def check_skip_budget(n_total: int, skipped: Iterable[tuple[str, str]], what: str) -> None:
    """Fail the build when more than 1% of examples were skipped."""
    skipped = list(skipped)
    if n_total and len(skipped) > 0.01 * n_total:
        sample = "; ".join(f"{ex_id}: {reason}" for ex_id, reason in skipped[:5])
        raise BuildError(
            f"{what}: skipped {len(skipped)} of {n_total} examples (>1%): {sample}"
        )
