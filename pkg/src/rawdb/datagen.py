"""Synthetic CSV generation: uniform random integers, fully seeded."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import polars as pl


def generate_csv(
    path: Path | str,
    rows: int,
    attrs: int,
    max_value: int = 10**9,
    seed: int = 0,
    chunk_rows: int = 1 << 16,
) -> Path:
    """Write ``rows`` lines of ``attrs`` comma-separated base-10 integers,
    each drawn uniformly from [0, max_value). Same seed, same bytes.
    """
    if rows < 1 or attrs < 1:
        raise ValueError("rows and attrs must be >= 1")
    if max_value < 1:
        raise ValueError("max_value must be >= 1")
    path = Path(path)
    rng = np.random.default_rng(seed)
    with open(path, "wb") as f:
        remaining = rows
        while remaining > 0:
            n = min(chunk_rows, remaining)
            m = rng.integers(0, max_value, size=(n, attrs), dtype=np.int64)
            pl.DataFrame(m).write_csv(f, include_header=False)
            remaining -= n
    return path


def estimate_row_bytes(attrs: int, max_value: int = 10**9) -> float:
    """Expected serialized row length including the terminator."""
    # average decimal width of uniform [0, max_value)
    total = 0.0
    lo = 1
    width = 1
    while lo < max_value:
        hi = min(lo * 10, max_value)
        total += (hi - lo) * width
        lo = hi
        width += 1
    avg = (total + 1.0) / max_value  # the single value 0 has width 1
    return attrs * (avg + 1.0)


def rows_for_size(target_bytes: int, attrs: int, max_value: int = 10**9) -> int:
    return max(1, int(target_bytes / estimate_row_bytes(attrs, max_value)))
