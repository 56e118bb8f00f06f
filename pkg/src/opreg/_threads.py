"""Worker-thread budget from ``OPREG_THREADS``.

Results never depend on this value: BLAS calls are deterministic per output
element and per-sample randomness is keyed by sample index.
"""

import os
from contextlib import contextmanager

from threadpoolctl import threadpool_limits


def thread_count() -> int:
    raw = os.environ.get("OPREG_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"OPREG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"OPREG_THREADS must be a positive integer, got {raw!r}")
    return n


@contextmanager
def limited_threads(n: int | None = None):
    """Cap BLAS threads for the duration of the block.

    Never above the core count: spinning BLAS workers on a shared core only
    slow each call down.
    """
    with threadpool_limits(limits=min(n or thread_count(), os.cpu_count() or 1)):
        yield
