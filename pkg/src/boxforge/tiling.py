"""Patch tiling plans for whole-image inference.

Large images are processed as overlapping patch crops, optionally mirrored
along any subset of axes and repeated over an ensemble of models. A plan
enumerates those views, maps boxes from view coordinates back to the image
frame, and answers how many views could have predicted at a given position,
which is what the consolidation stage charges clusters against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, product
from typing import Iterator, Sequence

from .consolidate import Detection
from .geometry import Box

__all__ = [
    "TilingPlan",
    "View",
    "plan",
    "all_mirror_sets",
    "expected_views",
    "map_boxes",
]


def all_mirror_sets(dim: int) -> tuple[tuple[int, ...], ...]:
    """Every subset of axes to flip: 4 combinations in 2D, 8 in 3D."""
    axes = range(dim)
    return tuple(
        subset for size in range(dim + 1) for subset in combinations(axes, size)
    )


@dataclass(frozen=True)
class View:
    """One (patch, mirror setting, model) combination."""

    view_id: str
    patch_index: int
    origin: tuple[int, ...]
    center: tuple[float, ...]
    mirror_axes: tuple[int, ...]
    model_index: int


@dataclass(frozen=True)
class TilingPlan:
    """Patch origins plus the mirror settings and ensemble size per patch."""

    image_shape: tuple[int, ...]
    patch_shape: tuple[int, ...]
    stride: tuple[float, ...]
    origins: tuple[tuple[int, ...], ...]
    mirror_axes_sets: tuple[tuple[int, ...], ...] = ((),)
    n_models: int = 1

    def __post_init__(self) -> None:
        if len(self.image_shape) != len(self.patch_shape):
            raise ValueError("image and patch shapes must have equal rank")
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if not self.origins:
            raise ValueError("plan needs at least one patch")

    @property
    def dim(self) -> int:
        return len(self.image_shape)

    @property
    def patch_centers(self) -> tuple[tuple[float, ...], ...]:
        return tuple(
            tuple(o + p / 2 for o, p in zip(origin, self.patch_shape))
            for origin in self.origins
        )

    @property
    def views_per_patch(self) -> int:
        return len(self.mirror_axes_sets) * self.n_models

    def views(self) -> Iterator[View]:
        """All views in canonical (patch, mirror, model) order."""
        centers = self.patch_centers
        for p_idx, origin in enumerate(self.origins):
            for m_idx, axes in enumerate(self.mirror_axes_sets):
                for e_idx in range(self.n_models):
                    yield View(
                        view_id=f"p{p_idx}_m{m_idx}_e{e_idx}",
                        patch_index=p_idx,
                        origin=origin,
                        center=centers[p_idx],
                        mirror_axes=axes,
                        model_index=e_idx,
                    )

    def to_json_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "patch_shape": list(self.patch_shape),
            "stride": list(self.stride),
            "origins": [list(o) for o in self.origins],
            "mirror_axes_sets": [list(m) for m in self.mirror_axes_sets],
            "n_models": self.n_models,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "TilingPlan":
        return cls(
            image_shape=tuple(int(s) for s in data["image_shape"]),
            patch_shape=tuple(int(s) for s in data["patch_shape"]),
            stride=tuple(float(s) for s in data["stride"]),
            origins=tuple(tuple(int(c) for c in o) for o in data["origins"]),
            mirror_axes_sets=tuple(tuple(int(a) for a in m) for m in data["mirror_axes_sets"]),
            n_models=int(data["n_models"]),
        )


def _axis_origins(image: int, patch: int, min_overlap: int) -> list[int]:
    if patch >= image:
        # Degenerate axis: one patch, centered (origin <= 0).
        return [(image - patch) // 2]
    if min_overlap >= patch:
        raise ValueError(f"min_overlap {min_overlap} must be smaller than patch {patch}")
    span = image - patch
    max_stride = patch - min_overlap
    n = math.ceil(span / max_stride) + 1
    while True:
        step = span / (n - 1)
        origins = [round(i * step) for i in range(n)]
        diffs = [b - a for a, b in zip(origins, origins[1:])]
        if max(diffs) <= max_stride:
            return origins
        n += 1  # integer rounding ate into the overlap; add a patch


def plan(
    image_shape: Sequence[int],
    patch_shape: Sequence[int],
    min_overlap: int = 32,
    mirror_axes_sets: Sequence[Sequence[int]] | None = None,
    n_models: int = 1,
) -> TilingPlan:
    """Lay out evenly spaced patches covering the image.

    The first patch starts at 0 and the last one is flush with the image
    boundary on every axis; adjacent patches overlap by at least
    ``min_overlap`` pixels. A patch larger than the image yields a single
    centered patch. Mirror settings default to every axis subset.
    """
    image_shape = tuple(int(s) for s in image_shape)
    patch_shape = tuple(int(s) for s in patch_shape)
    if any(s <= 0 for s in image_shape) or any(s <= 0 for s in patch_shape):
        raise ValueError("image and patch extents must be positive")
    dim = len(image_shape)
    if mirror_axes_sets is None:
        mirrors = all_mirror_sets(dim)
    else:
        mirrors = tuple(tuple(sorted(int(a) for a in m)) for m in mirror_axes_sets)
        if any(a < 0 or a >= dim for m in mirrors for a in m):
            raise ValueError("mirror axis outside image rank")
    per_axis = [_axis_origins(i, p, min_overlap) for i, p in zip(image_shape, patch_shape)]
    origins = tuple(tuple(combo) for combo in product(*per_axis))
    stride = tuple(
        float(axis[1] - axis[0]) if len(axis) > 1 else float(p)
        for axis, p in zip(per_axis, patch_shape)
    )
    return TilingPlan(
        image_shape=image_shape,
        patch_shape=patch_shape,
        stride=stride,
        origins=origins,
        mirror_axes_sets=mirrors,
        n_models=n_models,
    )


def expected_views(tiling: TilingPlan, position: Sequence[float]) -> int:
    """Number of views whose patch contains a position.

    Counts the patches covering the position and multiplies by mirror
    settings and ensemble size. Positions outside the image are a usage
    error.
    """
    position = tuple(float(c) for c in position)
    if len(position) != tiling.dim:
        raise ValueError(f"position has {len(position)} axes, plan is {tiling.dim}D")
    if any(not 0 <= c < s for c, s in zip(position, tiling.image_shape)):
        raise ValueError(f"position {position} outside image {tiling.image_shape}")
    containing = 0
    for origin in tiling.origins:
        if all(o <= c < o + p for c, o, p in zip(position, origin, tiling.patch_shape)):
            containing += 1
    return containing * tiling.views_per_patch


def map_boxes(
    dets: Sequence[Detection],
    origin: Sequence[int],
    patch_shape: Sequence[int],
    mirror_axes: Sequence[int] = (),
) -> list[Detection]:
    """Transform patch-frame detections into image coordinates.

    Mirrored axes are reflected about the patch extent (applying the same
    mirror twice is the identity), then the patch origin is added. The
    detection's ``patch_center`` is set to the patch center in image
    coordinates so consolidation can weigh border boxes down.
    """
    origin = tuple(float(o) for o in origin)
    patch_shape = tuple(float(p) for p in patch_shape)
    mirror_axes = tuple(mirror_axes)
    center = tuple(o + p / 2 for o, p in zip(origin, patch_shape))
    out = []
    for det in dets:
        lo = list(det.box.lo)
        hi = list(det.box.hi)
        for ax in mirror_axes:
            lo[ax], hi[ax] = patch_shape[ax] - hi[ax], patch_shape[ax] - lo[ax]
        box = Box(
            tuple(l + o for l, o in zip(lo, origin)),
            tuple(h + o for h, o in zip(hi, origin)),
        )
        out.append(
            Detection(
                box=box,
                class_id=det.class_id,
                score=det.score,
                image_id=det.image_id,
                patient_id=det.patient_id,
                view_id=det.view_id,
                patch_center=center,
                slice_id=det.slice_id,
            )
        )
    return out
