"""Dense float32 primitives with deterministic allocation accounting.

Every primitive that produces a new tensor registers that output with an
optional :class:`AllocationMeter`. Callers release tensors explicitly, so the
meter's peak is a property of the algorithm rather than of the Python
allocator or the garbage collector. Internal temporaries of a primitive are
not counted; only outputs handed back to the caller are.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Optional

import numpy as np
from scipy.special import erf

from .errors import DegenerateRowError, ShapeError

DTYPE = np.float32


class AllocationMeter:
    """Tracks live tensor payload bytes and their high-water mark.

    Tensors are registered with :meth:`alloc` and released with :meth:`free`.
    The meter holds a reference to every live tensor, so an id can never be
    recycled while it is still being counted.

    Named phases record the peak reached *above the live bytes at phase entry*;
    the largest value seen over all entries of a phase is kept in
    :attr:`phase_peaks`.
    """

    def __init__(self) -> None:
        self.current_bytes = 0
        self.peak_bytes = 0
        self.phase_peaks: dict[str, int] = {}
        self._live: dict[int, tuple[np.ndarray, int]] = {}
        self._frames: list[list] = []

    def reset(self) -> None:
        self.current_bytes = 0
        self.peak_bytes = 0
        self.phase_peaks = {}
        self._live.clear()
        self._frames.clear()

    @property
    def live_count(self) -> int:
        return len(self._live)

    def alloc(self, arr: np.ndarray) -> np.ndarray:
        key = id(arr)
        if key in self._live:
            raise ValueError("tensor registered twice")
        self._live[key] = (arr, arr.nbytes)
        self._charge(arr.nbytes)
        return arr

    def free(self, *arrs: np.ndarray) -> None:
        for arr in arrs:
            _, nbytes = self._live.pop(id(arr))
            self.current_bytes -= nbytes

    def charge(self, nbytes: int) -> None:
        """Account an anonymous allocation (scripted sequences, tests)."""
        if nbytes < 0:
            raise ValueError("use release() for negative amounts")
        self._charge(nbytes)

    def release(self, nbytes: int) -> None:
        if nbytes > self.current_bytes:
            raise ValueError("release exceeds live bytes")
        self.current_bytes -= nbytes

    def _charge(self, nbytes: int) -> None:
        self.current_bytes += nbytes
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes
        for frame in self._frames:
            if self.current_bytes > frame[2]:
                frame[2] = self.current_bytes

    @contextlib.contextmanager
    def phase(self, name: str) -> Iterator[None]:
        frame = [name, self.current_bytes, self.current_bytes]
        self._frames.append(frame)
        try:
            yield
        finally:
            self._frames.remove(frame)
            used = frame[2] - frame[1]
            self.phase_peaks[name] = max(self.phase_peaks.get(name, 0), used)


def track(meter: Optional[AllocationMeter], arr: np.ndarray) -> np.ndarray:
    if meter is not None:
        meter.alloc(arr)
    return arr


def release(meter: Optional[AllocationMeter], *arrs: np.ndarray) -> None:
    if meter is not None:
        meter.free(*arrs)


def empty(shape, meter: Optional[AllocationMeter] = None) -> np.ndarray:
    return track(meter, np.empty(shape, dtype=DTYPE))


def zeros(shape, meter: Optional[AllocationMeter] = None) -> np.ndarray:
    return track(meter, np.zeros(shape, dtype=DTYPE))


def matmul(a: np.ndarray, b: np.ndarray, meter: Optional[AllocationMeter] = None) -> np.ndarray:
    """Matrix product; stacked operands (..., m, k) @ (..., k, n) are allowed."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch shapes differ: {a.shape} vs {b.shape}")
    out = np.matmul(a, b, dtype=DTYPE)
    return track(meter, out)


def add_bias(m: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Add a row vector to every row of ``m`` in place."""
    if bias.shape != (m.shape[-1],):
        raise ShapeError(f"bias {bias.shape} does not match {m.shape}")
    m += bias
    return m


def linear(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, meter: Optional[AllocationMeter] = None
) -> np.ndarray:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    return add_bias(matmul(x, weight, meter), bias)


def softmax_rows(
    m: np.ndarray, mask: Optional[np.ndarray] = None, meter: Optional[AllocationMeter] = None
) -> np.ndarray:
    """Softmax along the last axis; ``mask`` marks the entries that take part.

    Masked entries are excluded from the max and from the normaliser, and
    come out as exact zeros. Leading axes beyond the row axis are batch axes.
    """
    if m.ndim < 2:
        raise ShapeError(f"expected at least a 2D tensor, got shape {m.shape}")
    if mask is None:
        out = m - m.max(axis=-1, keepdims=True)
        np.exp(out, out=out)
        out /= out.sum(axis=-1, keepdims=True)
        return track(meter, out)

    if mask.shape != m.shape:
        raise ShapeError(f"mask {mask.shape} does not match {m.shape}")
    mask = mask.astype(bool, copy=False)
    live = mask.any(axis=-1)
    if not live.all():
        raise DegenerateRowError(f"row {tuple(np.argwhere(~live)[0])} is fully masked")
    row_max = np.where(mask, m, -np.inf).max(axis=-1, keepdims=True)
    out = np.exp(np.where(mask, m - row_max, -np.inf), dtype=DTYPE)
    out /= out.sum(axis=-1, keepdims=True)
    return track(meter, out)


def segment_softmax(
    values: np.ndarray, indptr: np.ndarray, meter: Optional[AllocationMeter] = None
) -> np.ndarray:
    """Softmax over consecutive segments ``values[indptr[i]:indptr[i+1]]``.

    Segments run along axis 0; trailing axes (e.g. heads) are independent.
    """
    starts = indptr[:-1]
    lengths = np.diff(indptr)
    if lengths.size and lengths.min() < 1:
        raise DegenerateRowError(f"segment {int(np.argmin(lengths))} is empty")
    if indptr[-1] != values.shape[0]:
        raise ShapeError("segment pointer does not cover the value array")
    seg_max = np.maximum.reduceat(values, starts, axis=0)
    out = np.repeat(seg_max, lengths, axis=0)
    np.subtract(values, out, out=out)
    np.exp(out, out=out)
    seg_sum = np.add.reduceat(out, starts, axis=0)
    out /= np.repeat(seg_sum, lengths, axis=0)
    return track(meter, out)


def layernorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-6,
    meter: Optional[AllocationMeter] = None,
) -> np.ndarray:
    """Normalise the last axis of ``x`` (a vector or a batch of rows)."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"gamma/beta {gamma.shape}/{beta.shape} do not match {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(axis=-1, keepdims=True, dtype=DTYPE)
    centred = x - mean
    var = np.mean(np.square(centred), axis=-1, keepdims=True, dtype=DTYPE)
    centred /= np.sqrt(var + DTYPE(eps))
    centred *= gamma
    centred += beta
    return track(meter, centred)


def gelu(x: np.ndarray, meter: Optional[AllocationMeter] = None) -> np.ndarray:
    """Exact (erf) GELU."""
    out = erf(x * DTYPE(1.0 / np.sqrt(2.0)))
    out += DTYPE(1.0)
    out *= x
    out *= DTYPE(0.5)
    return track(meter, out.astype(DTYPE, copy=False))
