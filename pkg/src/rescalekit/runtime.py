"""Worker-pool plumbing and numeric reproducibility guards.

BLAS pools are pinned to one thread on import: every matmul in this
package must produce the same bits no matter how many workers the host
allows, and letting a BLAS split reductions across a variable number of
threads would break that. Parallelism is instead exposed through
``map_in_order``, which farms out *independent* work items (tiles, model
evaluations) and reassembles results in submission order.

``RESCALEKIT_THREADS`` caps the worker count; it is read per call so
tests can vary it within one process.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

from .errors import ConfigError

_T = TypeVar("_T")
_R = TypeVar("_R")

THREADS_ENV = "RESCALEKIT_THREADS"

try:
    from threadpoolctl import threadpool_limits

    _BLAS_LIMIT = threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover - dependency is declared
    _BLAS_LIMIT = None


def worker_count() -> int:
    """Number of workers to use, capped by RESCALEKIT_THREADS."""
    cap = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return min(4, cap)
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return min(n, cap)


def map_in_order(fn: Callable[[_T], _R], items: Sequence[_T] | Iterable[_T]) -> list[_R]:
    """Apply ``fn`` to every item, results in input order.

    Items must be independent: the output is required to be identical for
    any worker count, so ``fn`` must not mutate shared state.
    """
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
