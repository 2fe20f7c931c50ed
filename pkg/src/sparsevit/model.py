"""Model hyperparameters, checkpoint container and the binary checkpoint format.

Checkpoint layout (little-endian throughout)::

    b"VITCKPT1"
    u32 tensor_count
    repeated tensor_count times:
        u16 name_length, name (UTF-8)
        u8  rank
        u64 dims[rank]
        f32 values[prod(dims)]
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Union

import numpy as np

from .errors import CheckpointError

MAGIC = b"VITCKPT1"

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 14
    embed_dim: int = 64
    depth: int = 6
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_global_tokens: int = 1
    base_grid: tuple[int, int] = (16, 16)
    layernorm_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_global_tokens < 1:
            raise ValueError("num_global_tokens must be >= 1")
        if min(self.base_grid) < 1:
            raise ValueError("base_grid must be at least 1x1")
        if self.mlp_ratio <= 0 or self.layernorm_eps <= 0:
            raise ValueError("mlp_ratio and layernorm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every checkpoint entry this config requires, in canonical order."""
        d, h, p = self.embed_dim, self.mlp_hidden, self.patch_size
        g = self.num_global_tokens
        shapes: dict[str, tuple[int, ...]] = {
            "patch_embed.weight": (p * p * 3, d),
            "patch_embed.bias": (d,),
            "global_tokens": (g, d),
            "pos_embed": (g + self.base_grid[0] * self.base_grid[1], d),
        }
        for i in range(self.depth):
            b = f"blocks.{i}."
            shapes.update(
                {
                    b + "norm1.weight": (d,),
                    b + "norm1.bias": (d,),
                    b + "attn.qkv.weight": (d, 3 * d),
                    b + "attn.qkv.bias": (3 * d,),
                    b + "attn.proj.weight": (d, d),
                    b + "attn.proj.bias": (d,),
                    b + "norm2.weight": (d,),
                    b + "norm2.bias": (d,),
                    b + "mlp.fc1.weight": (d, h),
                    b + "mlp.fc1.bias": (h,),
                    b + "mlp.fc2.weight": (h, d),
                    b + "mlp.fc2.bias": (d,),
                }
            )
        shapes["norm.weight"] = (d,)
        shapes["norm.bias"] = (d,)
        return shapes

    def weight_bytes(self) -> int:
        return 4 * sum(int(np.prod(s)) for s in self.tensor_shapes().values())

    # flat key=value text

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if key == "base_grid":
                value = f"{value[0]}x{value[1]}"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            if key == "base_grid":
                rows, cols = value.lower().replace(",", "x").split("x")
                kwargs[key] = (int(rows), int(cols))
            elif key in ("mlp_ratio", "layernorm_eps"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: PathLike) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: PathLike) -> None:
        Path(path).write_text(self.to_text())


class Checkpoint(dict):
    """Mapping of tensor name to float32 array."""

    def validate(self, cfg: ModelConfig) -> None:
        for name, shape in cfg.tensor_shapes().items():
            if name not in self:
                raise CheckpointError(f"missing tensor {name!r}")
            if tuple(self[name].shape) != shape:
                raise CheckpointError(f"{name!r} has shape {self[name].shape}, expected {shape}")

    @classmethod
    def random(cls, cfg: ModelConfig, seed: int = 0) -> "Checkpoint":
        """Deterministic random weights (for desk-scale experiments)."""
        rng = np.random.default_rng(seed)
        ckpt = cls()
        for name, shape in cfg.tensor_shapes().items():
            if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
                arr = 1.0 + 0.1 * rng.standard_normal(shape)
            elif name.endswith(".bias"):
                arr = 0.02 * rng.standard_normal(shape)
            elif name in ("global_tokens", "pos_embed"):
                arr = 0.5 * rng.standard_normal(shape)
            else:
                fan_in = shape[0]
                arr = rng.standard_normal(shape) / np.sqrt(fan_in)
            ckpt[name] = arr.astype(np.float32)
        return ckpt

    def save(self, path: PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(self))]
        for name, arr in self.items():
            encoded = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(np.ascontiguousarray(arr).tobytes())
        return b"".join(parts)

    @classmethod
    def load(cls, path: PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise CheckpointError("bad magic, not a VITCKPT1 file")
        view = memoryview(blob)
        try:
            (count,) = struct.unpack_from("<I", view, 8)
            offset = 12
            ckpt = cls()
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", view, offset)
                offset += 2
                name = bytes(view[offset : offset + name_len]).decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<B", view, offset)
                offset += 1
                dims = struct.unpack_from(f"<{rank}Q", view, offset)
                offset += 8 * rank
                n = int(np.prod(dims, dtype=np.int64)) if rank else 1
                if offset + 4 * n > len(blob):
                    raise CheckpointError(f"tensor {name!r} runs past end of file")
                values = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
                offset += 4 * n
                if name in ckpt:
                    raise CheckpointError(f"duplicate tensor {name!r}")
                ckpt[name] = values.astype(np.float32).reshape(dims)
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint: {exc}") from None
        if offset != len(blob):
            raise CheckpointError(f"{len(blob) - offset} trailing bytes after last tensor")
        return ckpt
