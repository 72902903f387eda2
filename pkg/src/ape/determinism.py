"""Strict-deterministic execution mode.

Matrix multiplies go through BLAS, which is free to parallelize internally.
Results are reproducible for a fixed thread count; strict mode pins the
thread pools to one thread so every reduction happens in a fixed order,
making runs byte-comparable across invocations on the same machine.
"""

from __future__ import annotations

import contextlib

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - declared dependency
    threadpool_limits = None

_STRICT_DEPTH = 0


def strict_enabled() -> bool:
    return _STRICT_DEPTH > 0


@contextlib.contextmanager
def strict_mode():
    """Force single-threaded BLAS reductions for the enclosed block."""
    global _STRICT_DEPTH
    _STRICT_DEPTH += 1
    try:
        if threadpool_limits is not None:
            with threadpool_limits(limits=1):
                yield
        else:  # pragma: no cover
            yield
    finally:
        _STRICT_DEPTH -= 1


@contextlib.contextmanager
def maybe_strict(enabled: bool):
    if enabled:
        with strict_mode():
            yield
    else:
        yield
