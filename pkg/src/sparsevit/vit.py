"""ViT encoder forward pass: patch embedding, dense baseline attention and the
sparse / sparse+prune inference modes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numeric
from .errors import NumericalError, ResolutionError, ShapeError
from .layout import TokenLayout
from .model import Checkpoint, ModelConfig
from .numeric import AllocationMeter
from .pruning import PruningPlan, importance_scores, prune_tokens
from .sparse import SparsityPattern, build_sparsity_pattern, sparse_attention

ATTENTION_PHASE = "attention"


@dataclass(frozen=True)
class Mode:
    """``window=None`` is vanilla dense attention; ``prune`` requires a window."""

    window: Optional[int] = None
    prune: Optional[PruningPlan] = None

    def __post_init__(self) -> None:
        if self.window is not None and self.window < 0:
            raise ValueError("window radius must be >= 0")
        if self.prune is not None and self.window is None:
            raise ValueError("pruning is only available together with sparse attention")

    @classmethod
    def vanilla(cls) -> "Mode":
        return cls()

    @classmethod
    def sparse(cls, window: int = 8) -> "Mode":
        return cls(window=window)

    @classmethod
    def sparse_prune(cls, window: int = 8, ratio: float = 0.6, layer: int = 4, aggregation: str = "cls") -> "Mode":
        return cls(window=window, prune=PruningPlan(ratio, layer, aggregation))

    @property
    def name(self) -> str:
        if self.window is None:
            return "vanilla"
        return "sparse" if self.prune is None else "sparse-prune"


@dataclass
class InferenceOutput:
    cls_embedding: np.ndarray
    surviving_token_indices: np.ndarray
    per_layer_token_counts: list[int]
    wall_time: float
    peak_bytes: int
    attention_peak_bytes: int = 0
    attention_pairs: list[int] = field(default_factory=list)
    layout: Optional[TokenLayout] = None


def grid_for(height: int, width: int, patch_size: int) -> tuple[int, int]:
    if height % patch_size or width % patch_size or height < 1 or width < 1:
        raise ResolutionError(f"{height}x{width} is not divisible by patch size {patch_size}")
    return height // patch_size, width // patch_size


def extract_patches(image: np.ndarray, patch_size: int, meter: Optional[AllocationMeter] = None) -> np.ndarray:
    """(H, W, 3) -> (num_patches, patch_size * patch_size * 3), row-major patches,
    each flattened in (y, x, channel) order."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {image.shape}")
    rows, cols = grid_for(image.shape[0], image.shape[1], patch_size)
    p = patch_size
    patches = (
        image.reshape(rows, p, cols, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, p * p * 3)
        .astype(numeric.DTYPE)
    )
    return numeric.track(meter, patches)


def _bilinear_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation matrix, half-pixel centres, edge clamped."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    w = np.zeros((dst, src))
    np.add.at(w, (np.arange(dst), lo), 1.0 - frac)
    np.add.at(w, (np.arange(dst), hi), frac)
    return w


def interpolate_pos_embed(
    table: np.ndarray,
    base_grid: tuple[int, int],
    target: tuple[int, int],
    num_global: int = 1,
    meter: Optional[AllocationMeter] = None,
) -> np.ndarray:
    """Resample the patch part of a positional table to ``target`` grid.

    Global-token rows are copied through unchanged.
    """
    br, bc = base_grid
    tr, tc = target
    if min(br, bc, tr, tc) < 1:
        raise ShapeError("grids must be at least 1x1")
    if table.ndim != 2 or table.shape[0] != num_global + br * bc:
        raise ShapeError(f"table {table.shape} does not match {num_global} globals + {br}x{bc} grid")
    dim = table.shape[1]
    out = numeric.empty((num_global + tr * tc, dim), meter)
    out[:num_global] = table[:num_global]
    grid = table[num_global:].reshape(br, bc, dim).astype(np.float64)
    resampled = np.einsum("ab,bcd,ec->aed", _bilinear_weights(br, tr), grid, _bilinear_weights(bc, tc))
    out[num_global:] = resampled.reshape(tr * tc, dim)
    return out


def dense_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    num_heads: int,
    meter: Optional[AllocationMeter] = None,
    capture_globals: int = 0,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """``softmax(q k^T / sqrt(d)) v`` per head, heads concatenated.

    Scores and probabilities for all heads are materialised at once as
    (heads, N, N) tensors, exactly like a framework's unfused attention.
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if d % num_heads:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    scale = numeric.DTYPE(1.0 / np.sqrt(dh))

    out = numeric.zeros((n, d), meter)
    captured = numeric.empty((num_heads, capture_globals, n), meter) if capture_globals else None
    qh, kh, vh = (t.reshape(n, num_heads, dh).transpose(1, 0, 2) for t in (q, k, v))
    scores = numeric.matmul(qh, kh.transpose(0, 2, 1), meter)
    scores *= scale
    probs = numeric.softmax_rows(scores, meter=meter)
    numeric.release(meter, scores)
    if captured is not None:
        captured[:] = probs[:, :capture_globals]
    ctx = numeric.matmul(probs, vh, meter)
    out[:] = ctx.transpose(1, 0, 2).reshape(n, d)
    numeric.release(meter, ctx, probs)
    return out, captured


class Model:
    """A config plus shape-validated weights; immutable once built."""

    def __init__(self, cfg: ModelConfig, checkpoint: Checkpoint):
        checkpoint.validate(cfg)
        self.cfg = cfg
        self.weights = checkpoint

    @classmethod
    def random(cls, cfg: Optional[ModelConfig] = None, seed: int = 0) -> "Model":
        cfg = cfg or ModelConfig()
        return cls(cfg, Checkpoint.random(cfg, seed))

    def layout_for(self, height: int, width: int) -> TokenLayout:
        rows, cols = grid_for(height, width, self.cfg.patch_size)
        return TokenLayout(rows, cols, self.cfg.num_global_tokens)

    def patchify(self, image: np.ndarray, meter: Optional[AllocationMeter] = None) -> tuple[np.ndarray, TokenLayout]:
        cfg, w = self.cfg, self.weights
        layout = self.layout_for(image.shape[0], image.shape[1])
        g = layout.num_global

        patches = extract_patches(image, cfg.patch_size, meter)
        tokens = numeric.linear(patches, w["patch_embed.weight"], w["patch_embed.bias"], meter)
        numeric.release(meter, patches)
        pos = interpolate_pos_embed(
            w["pos_embed"], cfg.base_grid, (layout.grid_rows, layout.grid_cols), g, meter
        )
        x = numeric.empty((layout.total, cfg.embed_dim), meter)
        x[:g] = w["global_tokens"]
        x[g:] = tokens
        x += pos
        numeric.release(meter, tokens, pos)
        return x, layout

    def _block(
        self,
        i: int,
        x: np.ndarray,
        pattern: Optional[SparsityPattern],
        meter: AllocationMeter,
        plan: Optional[PruningPlan] = None,
    ) -> Optional[np.ndarray]:
        """One pre-norm block, updating ``x`` in place. Returns importance
        scores when ``plan`` asks for pruning after this block."""
        cfg, w = self.cfg, self.weights
        b = f"blocks.{i}."
        d, eps = cfg.embed_dim, cfg.layernorm_eps
        capture = 0
        if plan is not None:
            capture = 1 if plan.aggregation == "cls" else cfg.num_global_tokens

        h = numeric.layernorm(x, w[b + "norm1.weight"], w[b + "norm1.bias"], eps, meter)
        qkv = numeric.linear(h, w[b + "attn.qkv.weight"], w[b + "attn.qkv.bias"], meter)
        numeric.release(meter, h)
        q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
        with meter.phase(ATTENTION_PHASE):
            if pattern is None:
                attn, rows = dense_attention(q, k, v, cfg.num_heads, meter, capture)
            else:
                attn, rows = sparse_attention(q, k, v, cfg.num_heads, pattern, meter, capture)
        numeric.release(meter, qkv)

        scores = None
        if plan is not None:
            scores = importance_scores(rows, cfg.num_global_tokens, plan, meter)
            numeric.release(meter, rows)

        proj = numeric.linear(attn, w[b + "attn.proj.weight"], w[b + "attn.proj.bias"], meter)
        numeric.release(meter, attn)
        x += proj
        numeric.release(meter, proj)

        h = numeric.layernorm(x, w[b + "norm2.weight"], w[b + "norm2.bias"], eps, meter)
        m = numeric.linear(h, w[b + "mlp.fc1.weight"], w[b + "mlp.fc1.bias"], meter)
        numeric.release(meter, h)
        g = numeric.gelu(m, meter)
        numeric.release(meter, m)
        m = numeric.linear(g, w[b + "mlp.fc2.weight"], w[b + "mlp.fc2.bias"], meter)
        numeric.release(meter, g)
        x += m
        numeric.release(meter, m)
        return scores

    def forward(self, image: np.ndarray, mode: Mode = Mode()) -> InferenceOutput:
        cfg = self.cfg
        plan = mode.prune
        if plan is not None and plan.layer > cfg.depth:
            raise ValueError(f"prune layer {plan.layer} exceeds depth {cfg.depth}")
        if not np.isfinite(image).all():
            raise NumericalError("input image has non-finite pixels")
        meter = AllocationMeter()
        start = time.perf_counter()

        x, layout = self.patchify(image, meter)
        token_ids = np.arange(layout.total)
        pattern = None if mode.window is None else build_sparsity_pattern(layout, mode.window)
        counts, pairs = [], []
        heads = cfg.num_heads

        for i in range(cfg.depth):
            n = x.shape[0]
            counts.append(n)
            pairs.append(heads * (n * n if pattern is None else pattern.nnz))
            prune_here = plan is not None and plan.layer == i + 1
            scores = self._block(i, x, pattern, meter, plan if prune_here else None)
            if prune_here:
                reduced, token_ids = prune_tokens(x, scores, plan, layout.num_global, token_ids, meter)
                numeric.release(meter, x)
                numeric.release(meter, scores)
                x = reduced
                pattern = build_sparsity_pattern(layout, mode.window, token_ids)

        cls = numeric.layernorm(x[0], self.weights["norm.weight"], self.weights["norm.bias"], cfg.layernorm_eps, meter)
        elapsed = time.perf_counter() - start
        if not np.isfinite(cls).all():
            raise NumericalError("non-finite values in the output embedding")
        return InferenceOutput(
            cls_embedding=cls,
            surviving_token_indices=np.asarray(token_ids),
            per_layer_token_counts=counts,
            wall_time=elapsed,
            peak_bytes=meter.peak_bytes,
            attention_peak_bytes=meter.phase_peaks.get(ATTENTION_PHASE, 0),
            attention_pairs=pairs,
            layout=layout,
        )
