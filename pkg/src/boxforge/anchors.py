"""Anchor grids for feature-pyramid detectors, matching, and box deltas.

Each pyramid level j halves the previous resolution, so level j has stride
2**j; one anchor set sits at every grid-cell center. The default
configuration places anchors of side {4, 8, 16, 32} on levels P2..P5 and, in
3D, anchor depths {1, 2, 4, 8} to reflect the coarser z-resolution of
typical volumes. A shape calculator reports per-level resolutions including
the high-resolution segmentation levels P1/P0, which carry no anchors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .evaluation import GroundTruthObject
from .geometry import Box, iou_matrix

__all__ = [
    "PyramidLevel",
    "PyramidSpec",
    "AnchorSet",
    "AnchorAssignment",
    "LevelReport",
    "generate_anchors",
    "match_anchors",
    "encode_deltas",
    "decode_deltas",
    "pyramid_report",
    "default_match_thresholds",
]

POSITIVE = "positive"
NEGATIVE = "negative"
IGNORE = "ignore"


@dataclass(frozen=True)
class PyramidLevel:
    """One detection level: index j, in-plane stride 2**j, anchor geometry."""

    index: int
    anchor_size: float
    z_scale: int | None = None  # anchor depth and z-stride; None in 2D

    @property
    def stride(self) -> int:
        return 2**self.index


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[PyramidLevel, ...]
    aspect_ratios: tuple[float, ...] = (1.0,)

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("need at least one pyramid level")
        if any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")

    @property
    def dim(self) -> int:
        return 3 if self.levels[0].z_scale is not None else 2

    @classmethod
    def default_2d(cls, aspect_ratios: Sequence[float] = (1.0,)) -> "PyramidSpec":
        """Sides {4, 8, 16, 32} on P2..P5."""
        return cls(
            levels=tuple(PyramidLevel(index=j, anchor_size=2**j) for j in range(2, 6)),
            aspect_ratios=tuple(aspect_ratios),
        )

    @classmethod
    def default_3d(cls, aspect_ratios: Sequence[float] = (1.0,)) -> "PyramidSpec":
        """Sides {4, 8, 16, 32} with anchor depths {1, 2, 4, 8} on P2..P5."""
        return cls(
            levels=tuple(
                PyramidLevel(index=j, anchor_size=2**j, z_scale=2 ** (j - 2))
                for j in range(2, 6)
            ),
            aspect_ratios=tuple(aspect_ratios),
        )


@dataclass
class AnchorSet:
    """Flat anchor stack: (N, 2*dim) corner coordinates plus level indices."""

    coords: np.ndarray
    levels: np.ndarray
    dim: int

    def __len__(self) -> int:
        return self.coords.shape[0]

    def box(self, i: int) -> Box:
        return Box.from_coords(self.coords[i])

    def iter_boxes(self) -> Iterator[tuple[Box, int]]:
        for i in range(len(self)):
            yield self.box(i), int(self.levels[i])


@dataclass(frozen=True)
class AnchorAssignment:
    """Training target for one anchor: label, matched object, regression deltas."""

    anchor_index: int
    label: str
    class_id: int | None = None
    matched_gt: int | None = None
    regression_target: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if (self.label == POSITIVE) != (self.matched_gt is not None):
            raise ValueError("positive assignments and only they carry a matched gt")


def _grid_centers(extent: int, step: float) -> np.ndarray:
    n = math.ceil(extent / step)
    return (np.arange(n) + 0.5) * step


def level_anchor_count(level: PyramidLevel, image_shape: Sequence[int], n_ratios: int) -> int:
    """Closed-form anchor count for one level: grid cells times ratios."""
    cells = math.ceil(image_shape[0] / level.stride) * math.ceil(image_shape[1] / level.stride)
    if level.z_scale is not None:
        cells *= math.ceil(image_shape[2] / level.z_scale)
    return cells * n_ratios


def generate_anchors(
    spec: PyramidSpec,
    image_shape: Sequence[int],
    clip_to_image: bool = False,
) -> AnchorSet:
    """Tile every pyramid level of an image with centered anchors.

    In-plane grids use ceiling division of the image extent by the level
    stride; 3D grids additionally step along z by the level's z-scale so
    depth-1 anchors visit every slice on the finest level. Anchors may
    overhang the border; ``clip_to_image`` clamps them instead.
    """
    image_shape = tuple(int(s) for s in image_shape)
    if any(s <= 0 for s in image_shape):
        raise ValueError(f"image shape must be positive, got {image_shape}")
    if len(image_shape) != spec.dim:
        raise ValueError(f"spec is {spec.dim}D but image shape has {len(image_shape)} axes")

    all_coords = []
    all_levels = []
    for level in spec.levels:
        ys = _grid_centers(image_shape[0], level.stride)
        xs = _grid_centers(image_shape[1], level.stride)
        sides = [
            (level.anchor_size * math.sqrt(r), level.anchor_size / math.sqrt(r))
            for r in spec.aspect_ratios
        ]
        if spec.dim == 2:
            cy, cx = np.meshgrid(ys, xs, indexing="ij")
            centers = np.stack([cy.ravel(), cx.ravel()], axis=1)
            for h, w in sides:
                half = np.array([h / 2, w / 2])
                all_coords.append(np.concatenate([centers - half, centers + half], axis=1))
                all_levels.append(np.full(len(centers), level.index, dtype=int))
        else:
            zs = _grid_centers(image_shape[2], level.z_scale)
            cy, cx, cz = np.meshgrid(ys, xs, zs, indexing="ij")
            centers = np.stack([cy.ravel(), cx.ravel(), cz.ravel()], axis=1)
            for h, w in sides:
                half = np.array([h / 2, w / 2, level.z_scale / 2])
                all_coords.append(np.concatenate([centers - half, centers + half], axis=1))
                all_levels.append(np.full(len(centers), level.index, dtype=int))
    coords = np.concatenate(all_coords, axis=0)
    levels = np.concatenate(all_levels, axis=0)
    if clip_to_image:
        d = spec.dim
        for k in range(d):
            coords[:, k] = np.clip(coords[:, k], 0.0, image_shape[k])
            coords[:, d + k] = np.clip(coords[:, d + k], 0.0, image_shape[k])
    return AnchorSet(coords=coords, levels=levels, dim=spec.dim)


def default_match_thresholds(dim: int) -> tuple[float, float]:
    """(positive, negative) IoU thresholds: 0.3/0.1 in 3D, 0.5/0.1 in 2D."""
    return (0.3, 0.1) if dim == 3 else (0.5, 0.1)


def match_anchors(
    anchors: AnchorSet,
    gts: Sequence[GroundTruthObject],
    pos_iou: float | None = None,
    neg_iou: float | None = None,
) -> list[AnchorAssignment]:
    """Label every anchor positive, negative, or ignore against ground truth.

    An anchor is positive when its best-overlapping object reaches
    ``pos_iou`` and negative when below ``neg_iou``; anything between is
    ignored. Additionally, for every object the anchor of maximum IoU is
    forced positive so no object goes unmatched. Positives carry regression
    deltas toward their object.
    """
    if pos_iou is None or neg_iou is None:
        d_pos, d_neg = default_match_thresholds(anchors.dim)
        pos_iou = d_pos if pos_iou is None else pos_iou
        neg_iou = d_neg if neg_iou is None else neg_iou
    if pos_iou < neg_iou:
        raise ValueError(f"pos_iou {pos_iou} must be >= neg_iou {neg_iou}")

    n = len(anchors)
    if not gts:
        return [AnchorAssignment(anchor_index=i, label=NEGATIVE) for i in range(n)]

    gt_coords = np.asarray([g.box.coords() for g in gts], dtype=float)
    ious = iou_matrix(anchors.coords, gt_coords)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]

    matched = np.full(n, -1, dtype=int)
    matched[best_iou >= pos_iou] = best_gt[best_iou >= pos_iou]
    # Force-match each object's best anchor, overriding threshold decisions.
    # Objects whose best anchor was already claimed by an earlier object take
    # their next-best free anchor, so nothing goes unmatched.
    forced: dict[int, int] = {}
    for g_idx in range(len(gts)):
        order = np.argsort(-ious[:, g_idx], kind="stable")
        a_idx = next((int(a) for a in order if int(a) not in forced), int(order[0]))
        forced[a_idx] = g_idx
    for a_idx, g_idx in forced.items():
        matched[a_idx] = g_idx

    out = []
    for i in range(n):
        if matched[i] >= 0:
            gt = gts[matched[i]]
            out.append(
                AnchorAssignment(
                    anchor_index=i,
                    label=POSITIVE,
                    class_id=gt.class_id,
                    matched_gt=int(matched[i]),
                    regression_target=encode_deltas(anchors.box(i), gt.box),
                )
            )
        elif best_iou[i] < neg_iou:
            out.append(AnchorAssignment(anchor_index=i, label=NEGATIVE))
        else:
            out.append(AnchorAssignment(anchor_index=i, label=IGNORE))
    return out


def encode_deltas(anchor: Box, gt: Box) -> tuple[float, ...]:
    """Regression target from an anchor to a target box.

    Layout is (center offsets in anchor-size units..., log size ratios...).
    Both boxes need positive extents on every axis.
    """
    a_sizes = anchor.sizes()
    g_sizes = gt.sizes()
    if any(s <= 0 for s in a_sizes):
        raise ValueError(f"zero-extent anchor {anchor} cannot be encoded against")
    if any(s <= 0 for s in g_sizes):
        raise ValueError(f"target box {gt} has a zero extent")
    a_center = anchor.center()
    g_center = gt.center()
    centers = tuple((gc - ac) / s for gc, ac, s in zip(g_center, a_center, a_sizes))
    sizes = tuple(math.log(gs / als) for gs, als in zip(g_sizes, a_sizes))
    return centers + sizes


def decode_deltas(anchor: Box, deltas: Sequence[float]) -> Box:
    """Apply regression deltas to an anchor; inverse of ``encode_deltas``."""
    d = anchor.dim
    deltas = tuple(float(x) for x in deltas)
    if len(deltas) != 2 * d:
        raise ValueError(f"expected {2 * d} deltas, got {len(deltas)}")
    a_sizes = anchor.sizes()
    if any(s <= 0 for s in a_sizes):
        raise ValueError(f"zero-extent anchor {anchor} cannot be decoded from")
    centers = tuple(ac + dc * s for ac, dc, s in zip(anchor.center(), deltas[:d], a_sizes))
    sizes = tuple(s * math.exp(ds) for s, ds in zip(a_sizes, deltas[d:]))
    lo = tuple(c - 0.5 * s for c, s in zip(centers, sizes))
    hi = tuple(c + 0.5 * s for c, s in zip(centers, sizes))
    return Box(lo, hi)


@dataclass(frozen=True)
class LevelReport:
    """One row of the pyramid shape table."""

    name: str
    index: int
    resolution: tuple[int, ...]
    role: str  # "detection" or "segmentation"
    anchor_size: float | None
    z_scale: int | None
    anchor_count: int


def pyramid_report(spec: PyramidSpec, image_shape: Sequence[int]) -> list[LevelReport]:
    """Per-level resolutions and anchor counts, P0 upward.

    Levels below the first detection level (P0, P1 by default) are reported
    as segmentation-only: full and half resolution feature maps that carry
    no anchors. P0 always equals the input resolution.
    """
    image_shape = tuple(int(s) for s in image_shape)
    if any(s <= 0 for s in image_shape):
        raise ValueError(f"image shape must be positive, got {image_shape}")
    rows = []
    min_det = min(level.index for level in spec.levels)
    for j in range(min_det):
        rows.append(
            LevelReport(
                name=f"P{j}",
                index=j,
                resolution=tuple(math.ceil(s / 2**j) for s in image_shape),
                role="segmentation",
                anchor_size=None,
                z_scale=None,
                anchor_count=0,
            )
        )
    for level in sorted(spec.levels, key=lambda lv: lv.index):
        res = [math.ceil(image_shape[0] / level.stride), math.ceil(image_shape[1] / level.stride)]
        if level.z_scale is not None:
            res.append(math.ceil(image_shape[2] / level.z_scale))
        rows.append(
            LevelReport(
                name=f"P{level.index}",
                index=level.index,
                resolution=tuple(res),
                role="detection",
                anchor_size=level.anchor_size,
                z_scale=level.z_scale,
                anchor_count=level_anchor_count(level, image_shape, len(spec.aspect_ratios)),
            )
        )
    return rows
