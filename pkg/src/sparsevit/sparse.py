"""Local-window + global-token attention without an N x N intermediate.

A patch token at grid cell (r, c) may attend a patch token at (r', c') iff
``max(|r - r'|, |c - c'|) <= window``; global tokens pair with every token in
both directions. The allowed pairs are stored row-wise in CSR form (sorted
key positions per query), and attention is evaluated pair by pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from . import numeric
from .errors import ExportTooLargeError, ShapeError
from .layout import TokenLayout
from .numeric import AllocationMeter

DEFAULT_WINDOW = 8
DEFAULT_EXPORT_CAP = 4096

# queries per vectorised construction step; bounds the int temporaries
_BUILD_BLOCK = 2048


@dataclass(frozen=True, eq=False)
class SparsityPattern:
    """Allowed query->key pairs over the *current* token sequence.

    ``token_ids`` maps current sequence positions to original positions in
    ``layout``; after pruning, survivors keep their original grid cells.
    """

    layout: TokenLayout
    window: int
    token_ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    _rows: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def total(self) -> int:
        return len(self.token_ids)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def allowed(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def query_rows(self) -> np.ndarray:
        """Query position of every stored pair."""
        if self._rows is None:
            rows = np.repeat(np.arange(self.total, dtype=np.int64), self.counts())
            object.__setattr__(self, "_rows", rows)
        return self._rows

    def to_dense(self) -> np.ndarray:
        mask = np.zeros((self.total, self.total), dtype=bool)
        mask[self.query_rows, self.indices] = True
        return mask


def build_sparsity_pattern(
    layout: TokenLayout, window: int, token_ids: Optional[np.ndarray] = None
) -> SparsityPattern:
    """Build the pattern for ``layout``, optionally restricted to survivors.

    ``token_ids`` must be sorted and contain every global position.
    """
    if window < 0:
        raise ValueError(f"window radius must be >= 0, got {window}")
    g = layout.num_global
    if token_ids is None:
        token_ids = np.arange(layout.total, dtype=np.int64)
    else:
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.size < g or not np.array_equal(token_ids[:g], np.arange(g)):
            raise ValueError("token_ids must start with every global token")
        if np.any(np.diff(token_ids) <= 0) or (token_ids.size and token_ids[-1] >= layout.total):
            raise ValueError("token_ids must be strictly increasing layout positions")

    n = len(token_ids)
    rows_, cols_ = layout.grid_rows, layout.grid_cols
    patch_flat = token_ids[g:] - g
    position = np.full(layout.num_patches, -1, dtype=np.int64)
    position[patch_flat] = np.arange(g, n)

    wr, wc = min(window, rows_ - 1), min(window, cols_ - 1)
    dr, dc = np.meshgrid(np.arange(-wr, wr + 1), np.arange(-wc, wc + 1), indexing="ij")
    # lexicographic (dr, dc) order == ascending row-major position
    dr, dc = dr.ravel(), dc.ravel()

    pr, pc = np.divmod(patch_flat, cols_)
    chunks = []
    counts = [np.full(g, n, dtype=np.int64)]
    for s in range(0, len(patch_flat), _BUILD_BLOCK):
        rr = pr[s : s + _BUILD_BLOCK, None] + dr
        cc = pc[s : s + _BUILD_BLOCK, None] + dc
        inside = (rr >= 0) & (rr < rows_) & (cc >= 0) & (cc < cols_)
        nbr = np.where(inside, position[np.where(inside, rr * cols_ + cc, 0)], -1)
        keep = nbr >= 0
        block = np.concatenate([np.broadcast_to(np.arange(g), (len(nbr), g)), nbr], axis=1)
        keep = np.concatenate([np.ones((len(nbr), g), dtype=bool), keep], axis=1)
        chunks.append(block[keep])
        counts.append(keep.sum(axis=1))

    global_rows = np.tile(np.arange(n, dtype=np.int64), g)
    indices = np.concatenate([global_rows, *chunks]).astype(np.int64, copy=False)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.concatenate(counts), out=indptr[1:])
    return SparsityPattern(layout, window, token_ids, indptr, indices)


@njit(cache=True)
def _pair_scores(q, k, indptr, indices, num_heads, scale, scores):
    head_dim = q.shape[1] // num_heads
    for i in range(indptr.shape[0] - 1):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            for h in range(num_heads):
                base = h * head_dim
                acc = np.float32(0.0)
                for t in range(base, base + head_dim):
                    acc += q[i, t] * k[j, t]
                scores[p, h] = acc * scale


@njit(cache=True)
def _pair_weighted_sum(probs, v, indptr, indices, num_heads, out):
    head_dim = v.shape[1] // num_heads
    for i in range(indptr.shape[0] - 1):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            for h in range(num_heads):
                w = probs[p, h]
                base = h * head_dim
                for t in range(base, base + head_dim):
                    out[i, t] += w * v[j, t]


def sparse_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    num_heads: int,
    pattern: SparsityPattern,
    meter: Optional[AllocationMeter] = None,
    capture_globals: int = 0,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Multi-head attention restricted to ``pattern``.

    ``q``, ``k``, ``v`` are (N, D) with heads laid out along columns. If
    ``capture_globals`` > 0, the post-softmax rows of the first that many
    queries are returned as a (heads, capture_globals, N) array (these rows
    cover every key, since global queries attend everything).

    Each query reads only the key/value rows on its allowed list. Tensors
    registered with ``meter``, in order: the (N, D) output, the capture, a
    (nnz, heads) score array and the (nnz, heads) probabilities.
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if n != pattern.total:
        raise ShapeError(f"{n} queries but pattern covers {pattern.total} tokens")
    if d % num_heads:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    if capture_globals > pattern.layout.num_global:
        raise ValueError("can only capture rows of global tokens")
    scale = numeric.DTYPE(1.0 / np.sqrt(d // num_heads))
    indptr, indices = pattern.indptr, pattern.indices

    out = numeric.zeros((n, d), meter)
    captured = numeric.empty((num_heads, capture_globals, n), meter) if capture_globals else None

    scores = numeric.empty((pattern.nnz, num_heads), meter)
    _pair_scores(q, k, indptr, indices, num_heads, scale, scores)
    probs = numeric.segment_softmax(scores, indptr, meter)
    numeric.release(meter, scores)

    if captured is not None:
        for gi in range(capture_globals):
            # a global row lists every key in order, so it is a full row
            captured[:, gi] = probs[indptr[gi] : indptr[gi + 1]].T

    _pair_weighted_sum(probs, v, indptr, indices, num_heads, out)
    numeric.release(meter, probs)
    return out, captured


@dataclass(frozen=True)
class MaskExport:
    """Dense boolean view of a pattern; rows are queries."""

    matrix: np.ndarray

    @property
    def popcount(self) -> int:
        return int(self.matrix.sum())

    def to_pgm_pixels(self) -> np.ndarray:
        return np.where(self.matrix, 255, 0).astype(np.uint8)


def export_mask(pattern: SparsityPattern, cap: int = DEFAULT_EXPORT_CAP) -> MaskExport:
    if pattern.total > cap:
        raise ExportTooLargeError(f"{pattern.total} tokens exceeds export cap {cap}")
    return MaskExport(pattern.to_dense())
