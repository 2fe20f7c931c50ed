"""Closed-form attention-cell, FLOP and peak-memory predictions.

Byte predictions follow the engine's accounting rules exactly: only float32
tensors registered with the allocation meter count, and the forward pass
allocates and releases them in a fixed order (see ``vit.Model._block``).
Weights are reported separately as ``weight_bytes``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import InfeasibleBudgetError
from .layout import TokenLayout
from .model import ModelConfig
from .vit import Mode, grid_for

FLOAT_BYTES = 4

Resolution = Union[int, tuple[int, int]]


def axis_extents(length: int, window: int) -> np.ndarray:
    """Number of cells within ``window`` of each position on one grid axis."""
    r = np.arange(length)
    return np.minimum(r + window, length - 1) - np.maximum(r - window, 0) + 1


def window_pair_count(rows: int, cols: int, window: int) -> int:
    """Ordered patch-patch pairs within Chebyshev distance ``window``.

    The window is separable, so the count factorises into per-axis sums.
    """
    return int(axis_extents(rows, window).sum()) * int(axis_extents(cols, window).sum())


def allowed_pair_count(layout: TokenLayout, window: int) -> int:
    """Total allowed (query, key) pairs: global rows, patch->global edges and
    the local window pairs."""
    g, n = layout.num_global, layout.total
    return g * n + layout.num_patches * g + window_pair_count(layout.grid_rows, layout.grid_cols, window)


def allowed_pairs_brute_force(layout: TokenLayout, window: int) -> int:
    """Validation fallback: test the predicate on every pair."""
    r, c = layout.patch_coords()
    dist = np.maximum(np.abs(r[:, None] - r[None, :]), np.abs(c[:, None] - c[None, :]))
    return layout.total**2 - layout.num_patches**2 + int((dist <= window).sum())


def surviving_pair_count(layout: TokenLayout, window: int, token_ids: np.ndarray) -> int:
    """Allowed pairs among the surviving tokens ``token_ids`` (original
    positions, globals included), via box sums over the survivor grid."""
    g = layout.num_global
    token_ids = np.asarray(token_ids)
    patches = token_ids[token_ids >= g] - g
    n = len(token_ids)
    alive = np.zeros(layout.num_patches, dtype=np.int64)
    alive[patches] = 1
    alive = alive.reshape(layout.grid_rows, layout.grid_cols)
    integral = np.zeros((layout.grid_rows + 1, layout.grid_cols + 1), dtype=np.int64)
    integral[1:, 1:] = alive.cumsum(0).cumsum(1)
    r, c = np.divmod(patches, layout.grid_cols)
    r0, r1 = np.maximum(r - window, 0), np.minimum(r + window, layout.grid_rows - 1) + 1
    c0, c1 = np.maximum(c - window, 0), np.minimum(c + window, layout.grid_cols - 1) + 1
    box = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
    return g * n + len(patches) * g + int(box.sum())


def expected_surviving_pairs(layout: TokenLayout, window: int, kept_patches: int) -> float:
    """Expected allowed pairs if ``kept_patches`` patches survive uniformly at random."""
    g, p = layout.num_global, layout.num_patches
    n = g + kept_patches
    local = window_pair_count(layout.grid_rows, layout.grid_cols, window)
    distinct = local - p
    frac = kept_patches * (kept_patches - 1) / (p * (p - 1)) if p > 1 else 0.0
    return g * n + kept_patches * g + kept_patches + distinct * frac


@dataclass
class CostReport:
    height: int
    width: int
    mode: str
    window: Optional[int]
    prune_ratio: Optional[float]
    prune_layer: Optional[int]
    tokens_before: int
    tokens_after: int
    attention_cells_per_layer: list[int] = field(default_factory=list)
    total_cells: int = 0
    flops_estimate: int = 0
    predicted_peak_bytes: int = 0
    predicted_attention_bytes: int = 0
    weight_bytes: int = 0
    exact: bool = True

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.predicted_peak_bytes

    CSV_FIELDS = (
        "height", "width", "mode", "window", "prune_ratio", "prune_layer", "tokens_before",
        "tokens_after", "total_cells", "flops_estimate", "predicted_peak_bytes",
        "predicted_attention_bytes", "weight_bytes", "exact",
    )

    def to_row(self) -> dict:
        row = asdict(self)
        return {k: ("" if row[k] is None else row[k]) for k in self.CSV_FIELDS}

    def to_text(self) -> str:
        mib = 1024 * 1024
        lines = [
            f"{self.height}x{self.width} {self.mode}"
            + (f" w={self.window}" if self.window is not None else "")
            + (f" p={self.prune_ratio} L={self.prune_layer}" if self.prune_ratio is not None else ""),
            f"  tokens            {self.tokens_before} -> {self.tokens_after}",
            f"  attention cells   {self.total_cells:,} total"
            + ("" if self.exact else " (post-prune layers estimated)"),
            f"  flops (est.)      {self.flops_estimate:,}",
            f"  peak activations  {self.predicted_peak_bytes / mib:.2f} MiB",
            f"  attention peak    {self.predicted_attention_bytes / mib:.2f} MiB",
            f"  weights           {self.weight_bytes / mib:.2f} MiB",
        ]
        return "\n".join(lines) + "\n"


def reports_to_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CostReport.CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.to_row())
    return buf.getvalue()


def _split(resolution: Resolution) -> tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    return int(resolution[0]), int(resolution[1])


def _attention_workspace(n: int, pairs: int, cfg: ModelConfig, capture: int, dense: bool) -> int:
    """Floats above the phase entry level at the attention peak."""
    d, h = cfg.embed_dim, cfg.num_heads
    cap = capture * h * n
    if dense:
        return n * d + cap + max(2 * h * n * n, h * n * n + n * d)
    return n * d + cap + 2 * h * pairs


def _block_peak(n: int, ws: int, cfg: ModelConfig, capture: int, scores: int) -> int:
    """Floats live at the block's peak, given its attention workspace."""
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    cap = capture * cfg.num_heads * n
    return max(
        5 * n * d,
        4 * n * d + ws,
        2 * n * d + cap + scores,
        3 * n * d + scores,
        2 * n * d + n * hid + scores,
        n * d + 2 * n * hid + scores,
    )


def predict(
    cfg: ModelConfig,
    resolution: Resolution,
    mode: Mode = Mode(),
    kept: Optional[np.ndarray] = None,
) -> CostReport:
    """Cost of one forward pass at ``resolution`` (int for square images).

    In prune mode the surviving set is data dependent; pass ``kept`` (original
    token indices, as returned by a forward) for exact post-prune cell
    counts, otherwise they are the expectation under uniform survival and
    ``exact`` is False. Peak bytes are exact either way because the pre-prune
    layers dominate them.
    """
    height, width = _split(resolution)
    rows, cols = grid_for(height, width, cfg.patch_size)
    layout = TokenLayout(rows, cols, cfg.num_global_tokens)
    n, p, g = layout.total, layout.num_patches, layout.num_global
    d, h, hid, dh = cfg.embed_dim, cfg.num_heads, cfg.mlp_hidden, cfg.head_dim
    dense = mode.window is None
    plan = mode.prune
    if plan is not None and plan.layer > cfg.depth:
        raise ValueError(f"prune layer {plan.layer} exceeds depth {cfg.depth}")

    pre_pairs = n * n if dense else allowed_pair_count(layout, mode.window)
    post_n, post_pairs, exact = n, pre_pairs, True
    if plan is not None:
        post_n = plan.kept_count(p, g)
        if kept is not None:
            kept = np.asarray(kept)
            if len(kept) != post_n:
                raise ValueError(f"kept set has {len(kept)} tokens, plan keeps {post_n}")
            post_pairs = surviving_pair_count(layout, mode.window, kept)
        else:
            post_pairs = int(round(expected_surviving_pairs(layout, mode.window, post_n - g)))
            exact = False

    embed_peak = max(p * 3 * cfg.patch_size**2 + p * d, p * d + 2 * n * d)
    peak = embed_peak
    attn_peak = 0
    cells, flops = [], 2 * p * 3 * cfg.patch_size**2 * d
    capture_rows = 0 if plan is None else (1 if plan.aggregation == "cls" else g)
    for layer in range(1, cfg.depth + 1):
        after = plan is not None and layer > plan.layer
        tokens = post_n if after else n
        pairs = post_pairs if after else pre_pairs
        at_prune = plan is not None and layer == plan.layer
        capture = capture_rows if at_prune else 0
        scores = tokens if at_prune else 0

        ws = _attention_workspace(tokens, pairs, cfg, capture, dense)
        attn_peak = max(attn_peak, ws)
        peak = max(peak, _block_peak(tokens, ws, cfg, capture, scores))
        if at_prune:
            peak = max(peak, tokens * d + tokens + post_n * d)

        cells.append(h * pairs)
        flops += 2 * tokens * d * 3 * d + 2 * tokens * d * d + 4 * tokens * d * hid + 4 * h * pairs * dh

    final_tokens = post_n if plan is not None else n
    peak = max(peak, final_tokens * d + d)

    return CostReport(
        height=height,
        width=width,
        mode=mode.name,
        window=mode.window,
        prune_ratio=None if plan is None else plan.ratio,
        prune_layer=None if plan is None else plan.layer,
        tokens_before=n,
        tokens_after=final_tokens,
        attention_cells_per_layer=cells,
        total_cells=sum(cells),
        flops_estimate=flops,
        predicted_peak_bytes=FLOAT_BYTES * peak,
        predicted_attention_bytes=FLOAT_BYTES * attn_peak,
        weight_bytes=cfg.weight_bytes(),
        exact=exact,
    )


def max_resolution_under_budget(cfg: ModelConfig, mode: Mode, budget_bytes: int) -> int:
    """Largest square, patch-divisible resolution whose weights plus peak
    activations fit in ``budget_bytes``."""
    step = cfg.patch_size
    if budget_bytes <= cfg.weight_bytes():
        raise InfeasibleBudgetError(f"budget {budget_bytes} B does not even hold the weights")

    def fits(k: int) -> bool:
        return predict(cfg, k * step, mode).total_bytes <= budget_bytes

    if not fits(1):
        raise InfeasibleBudgetError(f"budget {budget_bytes} B cannot fit a {step}x{step} input")
    # cost is non-decreasing in resolution: gallop, then bisect
    lo, hi = 1, 2
    while fits(hi):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo * step
