"""Attention-score token pruning and its pixel-space map."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from . import numeric
from .errors import SequencingError
from .layout import TokenLayout
from .numeric import AllocationMeter

AGGREGATIONS = ("cls", "globals")


@dataclass(frozen=True)
class PruningPlan:
    """Drop the lowest-scoring ``ratio`` of patch tokens after block ``layer``
    (1-based). Scores come from the layer's global-token attention rows,
    averaged over heads; ``aggregation="cls"`` uses the first global row only,
    ``"globals"`` averages every global row."""

    ratio: float = 0.6
    layer: int = 4
    aggregation: str = "cls"

    def __post_init__(self) -> None:
        if not 0 <= self.ratio < 1:
            raise ValueError(f"pruning ratio must lie in [0, 1), got {self.ratio}")
        if self.layer < 1:
            raise ValueError(f"prune layer is 1-based, got {self.layer}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")

    def drop_count(self, num_patches: int) -> int:
        # exact decimal arithmetic: floor(0.7 * 10) must be 7
        return math.floor(Fraction(str(self.ratio)) * num_patches)

    def kept_count(self, num_patches: int, num_global: int) -> int:
        return num_global + num_patches - self.drop_count(num_patches)


def importance_scores(
    global_rows: Optional[np.ndarray],
    num_global: int,
    plan: PruningPlan,
    meter: Optional[AllocationMeter] = None,
) -> np.ndarray:
    """Per-token importance from post-softmax global attention rows.

    ``global_rows`` has shape (heads, captured_globals, N). Global tokens get
    ``+inf`` so they are never pruned.
    """
    if global_rows is None or global_rows.ndim != 3 or global_rows.shape[1] < 1:
        raise SequencingError("global attention rows for the prune layer were not captured")
    used = global_rows[:, :1] if plan.aggregation == "cls" else global_rows
    if plan.aggregation == "globals" and used.shape[1] < num_global:
        raise SequencingError(f"need {num_global} global rows, got {used.shape[1]}")
    scores = used.mean(axis=(0, 1), dtype=np.float32)
    scores[:num_global] = np.inf
    return numeric.track(meter, scores)


def select_kept(scores: np.ndarray, plan: PruningPlan, num_global: int) -> np.ndarray:
    """Sorted positions surviving the prune, globals included."""
    patch_scores = scores[num_global:]
    num_patches = patch_scores.shape[0]
    keep = num_patches - plan.drop_count(num_patches)
    # stable sort on -score: ties keep the lower position
    order = np.argsort(-patch_scores, kind="stable")[:keep]
    return np.concatenate([np.arange(num_global), np.sort(order) + num_global])


def prune_tokens(
    sequence: np.ndarray,
    scores: np.ndarray,
    plan: PruningPlan,
    num_global: int = 1,
    token_ids: Optional[np.ndarray] = None,
    meter: Optional[AllocationMeter] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return the reduced sequence and the original indices it keeps."""
    if scores.shape[0] != sequence.shape[0]:
        raise ValueError(f"{scores.shape[0]} scores for {sequence.shape[0]} tokens")
    if token_ids is None:
        token_ids = np.arange(sequence.shape[0])
    kept = select_kept(scores, plan, num_global)
    reduced = numeric.track(meter, sequence[kept])
    return reduced, np.asarray(token_ids)[kept]


@dataclass(frozen=True)
class PruneMap:
    grid_rows: int
    grid_cols: int
    pruned: np.ndarray  # (grid_rows, grid_cols) bool
    patch_size: int = 14

    @property
    def pruned_count(self) -> int:
        return int(self.pruned.sum())

    def rectangles(self) -> list[tuple[int, int, int, int]]:
        """Pixel boxes ``(x0, y0, x1, y1)``, end-exclusive, of pruned patches."""
        p = self.patch_size
        return [(c * p, r * p, (c + 1) * p, (r + 1) * p) for r, c in zip(*np.nonzero(self.pruned))]

    def to_csv(self) -> str:
        lines = ["row,col,pruned"]
        for r in range(self.grid_rows):
            for c in range(self.grid_cols):
                lines.append(f"{r},{c},{int(self.pruned[r, c])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, patch_size: int = 14) -> "PruneMap":
        cells = []
        for line in text.strip().splitlines()[1:]:
            r, c, flag = (int(x) for x in line.split(","))
            if flag not in (0, 1):
                raise ValueError(f"pruned flag must be 0 or 1, got {flag}")
            cells.append((r, c, flag))
        rows = 1 + max(r for r, _, _ in cells)
        cols = 1 + max(c for _, c, _ in cells)
        pruned = np.zeros((rows, cols), dtype=bool)
        seen = np.zeros((rows, cols), dtype=bool)
        for r, c, flag in cells:
            pruned[r, c] = bool(flag)
            seen[r, c] = True
        if not seen.all():
            raise ValueError("prune-map CSV does not cover the full grid")
        return cls(rows, cols, pruned, patch_size)

    def to_overlay(self) -> np.ndarray:
        """Pixel-space uint8 overlay: 0 over pruned patches, 255 elsewhere."""
        block = np.ones((self.patch_size, self.patch_size), dtype=np.uint8)
        return np.kron(np.where(self.pruned, 0, 255).astype(np.uint8), block)


def prune_map(kept: np.ndarray, layout: TokenLayout, patch_size: int = 14) -> PruneMap:
    kept = np.asarray(kept, dtype=np.int64)
    if kept.size and (kept.min() < 0 or kept.max() >= layout.total):
        raise IndexError(f"kept indices must lie in [0, {layout.total})")
    patch = kept[kept >= layout.num_global] - layout.num_global
    pruned = np.ones(layout.num_patches, dtype=bool)
    pruned[patch] = False
    return PruneMap(layout.grid_rows, layout.grid_cols, pruned.reshape(layout.grid_rows, layout.grid_cols), patch_size)
