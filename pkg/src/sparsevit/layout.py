"""Sequence position <-> patch-grid geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TokenLayout:
    """Global tokens sit at positions ``[0, num_global)``; patches follow in
    row-major grid order."""

    grid_rows: int
    grid_cols: int
    num_global: int = 1

    def __post_init__(self) -> None:
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.grid_rows}x{self.grid_cols}")
        if self.num_global < 0:
            raise ValueError("num_global must be non-negative")

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def total(self) -> int:
        return self.num_global + self.num_patches

    def is_global(self, index: int) -> bool:
        return 0 <= index < self.num_global

    def coords(self, index: int) -> tuple[int, int]:
        """Grid (row, col) of a patch token."""
        if not self.num_global <= index < self.total:
            raise IndexError(f"{index} is not a patch token position")
        return divmod(index - self.num_global, self.grid_cols)

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.grid_rows and 0 <= col < self.grid_cols):
            raise IndexError(f"cell ({row}, {col}) outside {self.grid_rows}x{self.grid_cols} grid")
        return self.num_global + row * self.grid_cols + col

    def patch_coords(self, indices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised :meth:`coords`; defaults to every patch token."""
        if indices is None:
            flat = np.arange(self.num_patches)
        else:
            flat = np.asarray(indices) - self.num_global
            if flat.size and (flat.min() < 0 or flat.max() >= self.num_patches):
                raise IndexError("index list contains non-patch positions")
        return np.divmod(flat, self.grid_cols)
