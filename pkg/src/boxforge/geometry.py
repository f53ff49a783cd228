"""Axis-aligned box arithmetic shared by every pipeline stage.

Boxes live on the pixel grid with half-open extents [lo, hi) per axis, so
measures agree with rasterized pixel counts and edge-to-edge boxes do not
overlap. Coordinates are real-valued because consolidation produces
weighted-average corners that rarely fall on integers. The same type covers
rectangles (2 axes) and cuboids (3 axes); all downstream algorithms are
written against it without caring which.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = ["Box", "measure", "iou", "clip", "iou_matrix", "boxes_to_array"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle or cuboid with half-open extents [lo, hi)."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self) -> None:
        lo = tuple(float(c) for c in self.lo)
        hi = tuple(float(c) for c in self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if len(lo) != len(hi):
            raise ValueError(f"lo has {len(lo)} axes but hi has {len(hi)}")
        if len(lo) not in (2, 3):
            raise ValueError(f"boxes must have 2 or 3 axes, got {len(lo)}")
        for k, (a, b) in enumerate(zip(lo, hi)):
            if not a <= b:
                raise ValueError(f"axis {k}: lo={a} exceeds hi={b}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def sizes(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def center(self) -> tuple[float, ...]:
        return tuple(0.5 * (a + b) for a, b in zip(self.lo, self.hi))

    def measure(self) -> float:
        """Area in 2D, volume in 3D; 0 for degenerate (zero-extent) boxes."""
        return math.prod(self.sizes())

    def coords(self) -> tuple[float, ...]:
        """Flat (lo..., hi...) layout used by array code and file formats."""
        return self.lo + self.hi

    @classmethod
    def from_coords(cls, coords: Iterable[float]) -> "Box":
        vals = tuple(float(c) for c in coords)
        if len(vals) % 2:
            raise ValueError(f"need an even number of coordinates, got {len(vals)}")
        d = len(vals) // 2
        return cls(vals[:d], vals[d:])


def measure(b: Box) -> float:
    """Area (2D) or volume (3D) of a box."""
    return b.measure()


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes of the same dimensionality.

    Returns 0.0 when the union has zero measure (both boxes degenerate).
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    inter = 1.0
    for al, ah, bl, bh in zip(a.lo, a.hi, b.lo, b.hi):
        overlap = min(ah, bh) - max(al, bl)
        if overlap <= 0.0:
            return 0.0
        inter *= overlap
    union = a.measure() + b.measure() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def clip(b: Box, bounds: Box) -> Box:
    """Clamp a box into ``bounds`` componentwise.

    A box fully outside collapses to a zero-extent box on the nearest
    boundary face, which still satisfies the box invariants.
    """
    if b.dim != bounds.dim:
        raise ValueError(f"dimension mismatch: {b.dim} vs {bounds.dim}")
    lo = tuple(min(max(c, lb), ub) for c, lb, ub in zip(b.lo, bounds.lo, bounds.hi))
    hi = tuple(min(max(c, lb), ub) for c, lb, ub in zip(b.hi, bounds.lo, bounds.hi))
    return Box(lo, hi)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    """Stack boxes into an (N, 2*dim) float array of flat (lo..., hi...) rows."""
    rows = [b.coords() for b in boxes]
    if not rows:
        return np.zeros((0, 0), dtype=float)
    return np.asarray(rows, dtype=float)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two stacks of flat-coordinate boxes.

    ``a`` is (N, 2d), ``b`` is (M, 2d); returns (N, M). Unions of zero
    measure yield 0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or a.shape[1] % 2:
        raise ValueError("expected (N, 2d) and (M, 2d) coordinate arrays")
    d = a.shape[1] // 2
    inter = np.ones((a.shape[0], b.shape[0]), dtype=float)
    vol_a = np.ones(a.shape[0], dtype=float)
    vol_b = np.ones(b.shape[0], dtype=float)
    for k in range(d):
        lo = np.maximum(a[:, None, k], b[None, :, k])
        hi = np.minimum(a[:, None, d + k], b[None, :, d + k])
        inter *= np.clip(hi - lo, 0.0, None)
        vol_a *= a[:, d + k] - a[:, k]
        vol_b *= b[:, d + k] - b[:, k]
    union = vol_a[:, None] + vol_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out
