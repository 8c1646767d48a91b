"""Boxes of Z^d in the sup-norm and array layouts over them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

__all__ = ["BoxRegion", "sup_norm", "site_grid"]


def sup_norm(x, axis: int = -1):
    """``|x| = max_i |x_i|`` along ``axis``."""
    return np.max(np.abs(np.asarray(x)), axis=axis)


@dataclass(frozen=True)
class BoxRegion:
    """Sites ``x`` with ``|x - center| <= radius`` in the sup-norm."""

    radius: int
    center: tuple[int, ...]

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        if len(self.center) < 1:
            raise ValueError("center needs at least one coordinate")

    @classmethod
    def centered(cls, radius: int, d: int) -> "BoxRegion":
        return cls(radius, (0,) * d)

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def lo(self) -> NDArray[np.int64]:
        return np.asarray(self.center, dtype=np.int64) - self.radius

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    def __len__(self) -> int:
        return self.side**self.d

    def contains(self, x) -> bool:
        return bool(sup_norm(np.asarray(x) - np.asarray(self.center)) <= self.radius)

    def grown(self, k: int) -> "BoxRegion":
        return BoxRegion(self.radius + k, self.center)

    def translated(self, a) -> "BoxRegion":
        return BoxRegion(self.radius, tuple(int(c) + int(s) for c, s in zip(self.center, a)))

    def sites(self) -> NDArray[np.int64]:
        """All sites, lexicographically ordered, shape (len, d)."""
        return site_grid(self.lo, self.shape).reshape(-1, self.d)


def site_grid(lo, shape) -> NDArray[np.int64]:
    """Coordinates of a rectangular window, shape ``shape + (d,)``."""
    axes = [np.arange(n, dtype=np.int64) + int(l) for l, n in zip(lo, shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
