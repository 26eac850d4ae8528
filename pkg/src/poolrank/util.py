"""Small shared helpers: worker-count resolution and row normalization."""
from __future__ import annotations

import os

import numpy as np

from .errors import UsageError

THREADS_ENV = "POOLRANK_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit argument, else POOLRANK_THREADS, else 1."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return 1
        try:
            threads = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if threads < 1:
        raise UsageError(f"thread count must be >= 1, got {threads}")
    return threads


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm; all-zero rows are left as zeros."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe


def chunk_ranges(n: int, parts: int) -> list[tuple[int, int]]:
    """Split range(n) into at most ``parts`` contiguous, order-preserving spans."""
    parts = max(1, min(parts, n)) if n else 1
    step = -(-n // parts)
    return [(lo, min(lo + step, n)) for lo in range(0, n, step)]
