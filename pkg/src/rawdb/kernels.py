"""Vectorized byte-level primitives for CSV navigation, parsing and hashing.

Everything in this module operates on one block's bytes at a time and is
deliberately free of engine concepts. Scalar reference implementations live
next to their vectorized counterparts; the two must agree bit-for-bit and the
test suite enforces that.
"""

from __future__ import annotations

import re

import numpy as np

SEP = 0x2C  # b','
NL = 0x0A  # b'\n'

_M64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FMIX_C1 = 0xFF51AFD7ED558CCD
_FMIX_C2 = 0xC4CEB9FE1A85EC53

_INT_RE = re.compile(rb"^-?[0-9]+$")
_FLOAT_RE = re.compile(
    rb"^[-+]?(([0-9]+\.?[0-9]*|\.[0-9]+)([eE][+-]?[0-9]+)?|nan|inf(inity)?)$",
    re.IGNORECASE,
)


def hash64(data: bytes) -> int:
    """64-bit value hash: FNV-1a folded through a 64-bit avalanche finalizer.

    This is the one hash used for statistics sketches; files produced with it
    are bit-reproducible across platforms.
    """
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _M64
    h ^= h >> 33
    h = (h * _FMIX_C1) & _M64
    h ^= h >> 33
    h = (h * _FMIX_C2) & _M64
    h ^= h >> 33
    return h


def hash64_many(mat: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """Vectorized ``hash64`` over a (n, W) uint8 matrix of padded values.

    ``widths[i]`` is the byte length of value i; columns past the width are
    ignored. Bit-identical to the scalar version.
    """
    n, cap = mat.shape
    h = np.full(n, _FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(_FNV_PRIME)
    with np.errstate(over="ignore"):
        for j in range(int(widths.max()) if n else 0):
            live = widths > j
            hj = (h ^ mat[:, j].astype(np.uint64)) * prime
            h = np.where(live, hj, h)
        h ^= h >> np.uint64(33)
        h *= np.uint64(_FMIX_C1)
        h ^= h >> np.uint64(33)
        h *= np.uint64(_FMIX_C2)
        h ^= h >> np.uint64(33)
    return h


def as_buffer(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8)


def newline_positions(buf: np.ndarray) -> np.ndarray:
    return np.flatnonzero(buf == NL)


def comma_positions(buf: np.ndarray) -> np.ndarray:
    return np.flatnonzero(buf == SEP)


def row_geometry(buf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(row_starts, row_ends) from newline scanning; row_ends point at ``\\n``."""
    ends = newline_positions(buf)
    starts = np.empty_like(ends)
    if len(ends):
        starts[0] = 0
        starts[1:] = ends[:-1] + 1
    return starts.astype(np.int64), ends.astype(np.int64)


def gather(buf: np.ndarray, starts: np.ndarray, width: int, pad: int = NL) -> np.ndarray:
    """(n, width) window copy starting at each position, padded past the end."""
    idx = starts[:, None] + np.arange(width, dtype=np.int64)[None, :]
    over = idx >= len(buf)
    out = buf[np.minimum(idx, len(buf) - 1)]
    if over.any():
        out[over] = pad
    return out


def skip_seps_forward(
    buf: np.ndarray, origins: np.ndarray, count: int, limits: np.ndarray, est_field: int
) -> tuple[np.ndarray, np.ndarray]:
    """Position after crossing ``count`` separators forward from each origin.

    ``limits`` are absolute row-end positions (the row's ``\\n``); separators
    at or past the limit do not count. Returns (positions, found_mask);
    callers resolve misses with the scalar path.
    """
    if count == 0:
        return origins.copy(), np.ones(len(origins), dtype=bool)
    pos = np.zeros(len(origins), dtype=np.int64)
    found = np.zeros(len(origins), dtype=bool)
    pending = np.arange(len(origins))
    for width in (count * est_field + 16, count * 4 * est_field + 64):
        win = gather(buf, origins[pending], width)
        inside = np.arange(width)[None, :] < (limits[pending] - origins[pending])[:, None]
        hits = np.cumsum((win == SEP) & inside, axis=1)
        ok = hits[:, -1] >= count
        at = np.argmax(hits == count, axis=1)
        rows = pending[ok]
        pos[rows] = origins[rows] + at[ok] + 1
        found[rows] = True
        pending = pending[~ok]
        if not len(pending):
            break
    return pos, found


def skip_seps_backward(
    buf: np.ndarray,
    origins: np.ndarray,
    count: int,
    floors: np.ndarray,
    est_field: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Position after the ``count``-th separator scanning backward.

    ``origins`` point at an attribute's first byte (so ``origins - 1`` is a
    separator, which is not counted); ``floors`` are row-start positions.
    """
    pos = np.zeros(len(origins), dtype=np.int64)
    found = np.zeros(len(origins), dtype=bool)
    pending = np.arange(len(origins))
    for width in (count * est_field + 16, count * 4 * est_field + 64):
        lo = np.maximum(origins[pending] - 1 - width, floors[pending])
        span = origins[pending] - 1 - lo  # bytes in [lo, origin-1)
        win = gather(buf, lo, width, pad=NL)
        col = np.arange(width)[None, :]
        inside = col < span[:, None]
        mask = (win == SEP) & inside
        # count separators from the right edge of the window
        rev = mask[:, ::-1]
        hits = np.cumsum(rev, axis=1)
        ok = hits[:, -1] >= count
        at_rev = np.argmax(hits == count, axis=1)
        at = width - 1 - at_rev
        rows = pending[ok]
        pos[rows] = lo[ok] + at[ok] + 1
        found[rows] = True
        # a window that already reached the row start but lacks separators
        # means the caller's distance was wrong; leave it for the fallback
        pending = pending[~ok]
        if not len(pending):
            break
    return pos, found


def field_ends(
    buf: np.ndarray, starts: np.ndarray, limits: np.ndarray, est_field: int
) -> np.ndarray:
    """Absolute end position (next separator or row end) of each field."""
    ends = np.minimum(limits, len(buf)).astype(np.int64).copy()
    pending = np.arange(len(starts))
    for width in (est_field + 8, 4 * est_field + 64):
        win = gather(buf, starts[pending], width)
        inside = np.arange(width)[None, :] < (limits[pending] - starts[pending])[:, None]
        mask = (win == SEP) & inside
        ok = mask.any(axis=1)
        at = np.argmax(mask, axis=1)
        rows = pending[ok]
        ends[rows] = starts[rows] + at[ok]
        pending = pending[~ok]
        if not len(pending):
            break
        # rows whose remaining span fits in the window have their end at the limit
        fits = (limits[pending] - starts[pending]) <= width
        pending = pending[~fits]
        if not len(pending):
            break
    for i in pending:  # pathologically wide fields
        j = buf[starts[i] : limits[i]].tobytes().find(b",")
        ends[i] = limits[i] if j < 0 else starts[i] + j
    return ends


def parse_int64_at(buf: np.ndarray, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Parse int64 fields beginning at ``starts``.

    Returns (values, good): ``good`` rows parsed cleanly (digit run up to 18
    digits ending at a separator/terminator) and are exact. Anything else —
    empty fields, 19+ digits, stray characters — goes to the scalar parser.
    """
    cap = 21
    win = gather(buf, starts, cap)
    neg = win[:, 0] == 0x2D  # '-'
    if neg.any():
        win = np.where(neg[:, None], gather(buf, starts + 1, cap), win)
    dig = win.astype(np.int64) - 48
    isd = (dig >= 0) & (dig <= 9)
    run = np.cumprod(isd, axis=1)
    width = run.sum(axis=1)  # leading digit run length
    w = np.minimum(width, 18)
    vals = np.zeros(len(starts), dtype=np.int64)
    for j in range(int(w.max()) if len(w) else 0):
        vals = np.where(j < w, vals * 10 + dig[:, j], vals)
    vals = np.where(neg, -vals, vals)
    endch = win[np.arange(len(starts)), np.minimum(w, cap - 1)]
    good = (width > 0) & (width <= 18) & ((endch == SEP) | (endch == NL))
    return vals, good


def parse_int_strict(field: bytes) -> int | None:
    """Standard decimal int64 parse; no whitespace, no underscores."""
    if not _INT_RE.match(field):
        return None
    v = int(field)
    if not -(2**63) <= v < 2**63:
        return None
    return v


def parse_float_strict(field: bytes) -> float | None:
    """Standard decimal/scientific float parse; no whitespace, inf or nan."""
    if not _FLOAT_RE.match(field):
        return None
    return float(field)
