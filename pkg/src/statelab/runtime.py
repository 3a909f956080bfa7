"""Thread and determinism control.

Normal mode lets BLAS use the machine's threads (or STATELAB_THREADS).
Strict-deterministic mode pins BLAS to a single thread: GEMM partitioning is
the only thread-sensitive reduction in this codebase, so single-threaded BLAS
makes every output independent of the host's core count.
"""

from __future__ import annotations

import os

from threadpoolctl import threadpool_limits

THREADS_ENV_VAR = "STATELAB_THREADS"

_controller = None
_strict = False


def configure(threads: int | None = None, strict_deterministic: bool = False) -> None:
    """Apply thread limits process-wide. Call once, before heavy numerics."""
    global _controller, _strict
    _strict = strict_deterministic
    if strict_deterministic:
        limit = 1
    elif threads is not None:
        limit = int(threads)
    else:
        env = os.environ.get(THREADS_ENV_VAR)
        limit = int(env) if env else None
    if limit is not None:
        _controller = threadpool_limits(limits=limit)


def strict_mode_enabled() -> bool:
    return _strict
