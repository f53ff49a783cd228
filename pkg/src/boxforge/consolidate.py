"""Consolidation of raw per-view detections into final per-image detections.

Inference over patch tilings, mirrored views, and model ensembles yields many
box predictions per object. This module reduces them: greedy IoU clustering,
weighted box clustering (score/coordinate averages with a penalty for views
that contributed no box), classical per-class NMS as the baseline, the
slice-stack merge that lifts 2D detections to 3D cubes, and the heuristic
that turns a semantic segmentation into scored boxes via connected
components.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .geometry import Box, iou, iou_matrix

__all__ = [
    "Detection",
    "Cluster",
    "WbcConfig",
    "greedy_cluster",
    "wbc_score",
    "wbc_coords",
    "wbc",
    "nms",
    "nms_indices",
    "merge_slices_to_cubes",
    "slice_merge_groups",
    "components_to_detections",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    """One scored box prediction plus its provenance.

    ``view_id`` identifies the (patch, mirror, model) combination that
    produced the box; ``patch_center`` is that view's patch center in image
    coordinates and enables distance-based down-weighting during
    consolidation. ``slice_id`` is set on 2D detections that live inside a
    volume.
    """

    box: Box
    class_id: int
    score: float
    image_id: str | int | None = None
    patient_id: str | int | None = None
    view_id: str | int | None = None
    patch_center: tuple[float, ...] | None = None
    slice_id: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1 (0 is background), got {self.class_id}")
        if self.patch_center is not None:
            object.__setattr__(self, "patch_center", tuple(float(c) for c in self.patch_center))


@dataclass(frozen=True)
class Cluster:
    """A group of same-class detections that overlap the seed box."""

    members: tuple[Detection, ...]
    seed_index: int

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("cluster must have at least one member")
        if not 0 <= self.seed_index < len(self.members):
            raise ValueError("seed_index out of range")

    @property
    def seed(self) -> Detection:
        return self.members[self.seed_index]

    @property
    def class_id(self) -> int:
        return self.seed.class_id

    def distinct_views(self) -> int:
        return len({m.view_id for m in self.members})


@dataclass(frozen=True)
class WbcConfig:
    """Knobs for weighted box clustering.

    ``expected_views`` is the number of views that could have predicted a box
    at the cluster's location; clusters fed by fewer distinct views have
    their score denominator inflated accordingly. ``sigma_patch`` is the
    standard deviation (pixels) of the Gaussian that down-weights boxes far
    from their patch center.
    """

    iou_threshold: float = 0.1
    sigma_patch: float = 80.0
    expected_views: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold {self.iou_threshold} outside (0, 1]")
        if self.sigma_patch <= 0.0:
            raise ValueError("sigma_patch must be positive")
        if self.expected_views < 1:
            raise ValueError("expected_views must be >= 1")


def _rank_key(item: tuple[int, Detection]) -> tuple[float, float, int]:
    # Highest score first; ties broken by larger box, then input position.
    idx, det = item
    return (-det.score, -det.box.measure(), idx)


def greedy_cluster(dets: Sequence[Detection], iou_threshold: float) -> list[Cluster]:
    """Partition detections into per-class clusters, highest score seeding.

    Repeatedly takes the best-ranked unassigned detection as seed and absorbs
    every unassigned same-class detection whose IoU with the seed exceeds the
    threshold. Every input detection lands in exactly one cluster. The seed
    always joins its own cluster even when its self-IoU is degenerate (a
    zero-extent box).
    """
    ordered = sorted(enumerate(dets), key=_rank_key)
    clusters: list[Cluster] = []
    assigned = [False] * len(dets)
    for pos, (seed_idx, seed) in enumerate(ordered):
        if assigned[seed_idx]:
            continue
        assigned[seed_idx] = True
        members = [seed]
        for other_idx, other in ordered[pos + 1 :]:
            if assigned[other_idx] or other.class_id != seed.class_id:
                continue
            if iou(seed.box, other.box) > iou_threshold:
                assigned[other_idx] = True
                members.append(other)
        clusters.append(Cluster(members=tuple(members), seed_index=0))
    return clusters


def _member_weights(cluster: Cluster, cfg: WbcConfig) -> list[float]:
    """Per-member weight: overlap with seed x relative size x patch-center factor."""
    seed = cluster.seed
    seed_measure = seed.box.measure()
    weights = []
    for det in cluster.members:
        f = iou(det.box, seed.box)
        a = det.box.measure() / seed_measure if seed_measure > 0 else 1.0
        if det.patch_center is None:
            p = 1.0
        else:
            dist_sq = sum((c - pc) ** 2 for c, pc in zip(det.box.center(), det.patch_center))
            p = math.exp(-dist_sq / (2.0 * cfg.sigma_patch**2))
        weights.append(f * a * p)
    return weights


def wbc_score(cluster: Cluster, cfg: WbcConfig) -> float:
    """Weighted confidence of a cluster, penalized for missing views.

    The numerator is the weight-weighted sum of member scores; the
    denominator adds, for each expected view that contributed nothing, one
    average member weight. A degenerate cluster whose weights are all zero
    scores 0.
    """
    weights = _member_weights(cluster, cfg)
    n_missing = max(0, cfg.expected_views - cluster.distinct_views())
    w_sum = sum(weights)
    w_mean = w_sum / len(weights)
    denom = w_sum + n_missing * w_mean
    if denom <= 0.0:
        logger.warning("cluster with all-zero weights scored 0 (seed %s)", cluster.seed)
        return 0.0
    num = sum(det.score * w for det, w in zip(cluster.members, weights))
    return num / denom


def wbc_coords(cluster: Cluster, cfg: WbcConfig) -> Box:
    """Coordinate-wise average of member corners, weighted by score x weight.

    Falls back to the seed box when every weight vanishes (degenerate
    geometry); the fallback is logged because it signals broken weighting
    upstream.
    """
    weights = _member_weights(cluster, cfg)
    sw = [det.score * w for det, w in zip(cluster.members, weights)]
    total = sum(sw)
    if total <= 0.0:
        logger.warning("all-zero coordinate weights; keeping seed box %s", cluster.seed.box)
        return cluster.seed.box
    dim = cluster.seed.box.dim
    flat = [0.0] * (2 * dim)
    for det, w in zip(cluster.members, sw):
        for k, c in enumerate(det.box.coords()):
            flat[k] += c * w
    return Box.from_coords(c / total for c in flat)


def wbc(
    dets: Sequence[Detection],
    cfg: WbcConfig,
    expected_views_at: Callable[[tuple[float, ...]], int] | None = None,
) -> list[Detection]:
    """Consolidate detections: one output box per greedy cluster.

    Output boxes carry the weighted-average coordinates and the
    view-penalized score of their cluster; provenance fields other than
    image/patient are cleared because the result no longer belongs to a
    single view. ``expected_views_at``, when given, overrides
    ``cfg.expected_views`` with a per-cluster count probed at the seed-box
    center (e.g. from a tiling plan). Results are sorted by descending score.
    """
    clusters = greedy_cluster(dets, cfg.iou_threshold)
    out = []
    for cluster in clusters:
        local_cfg = cfg
        if expected_views_at is not None:
            local_cfg = replace(cfg, expected_views=expected_views_at(cluster.seed.box.center()))
        out.append(
            Detection(
                box=wbc_coords(cluster, local_cfg),
                class_id=cluster.class_id,
                score=wbc_score(cluster, local_cfg),
                image_id=cluster.seed.image_id,
                patient_id=cluster.seed.patient_id,
            )
        )
    out.sort(key=lambda d: (-d.score, -d.box.measure()))
    return out


def nms_indices(dets: Sequence[Detection], iou_threshold: float) -> list[int]:
    """Indices of detections surviving per-class non-maximum suppression."""
    if not dets:
        return []
    coords = np.asarray([d.box.coords() for d in dets], dtype=float)
    keep: list[int] = []
    by_class: dict[int, list[int]] = {}
    for idx, det in sorted(enumerate(dets), key=_rank_key):
        by_class.setdefault(det.class_id, []).append(idx)
    for indices in by_class.values():
        ious = iou_matrix(coords[indices], coords[indices])
        kept_local: list[int] = []
        for i in range(len(indices)):
            if all(ious[i, j] <= iou_threshold for j in kept_local):
                kept_local.append(i)
        keep.extend(indices[i] for i in kept_local)
    keep.sort(key=lambda i: _rank_key((i, dets[i])))
    return keep


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Classical greedy NMS per class; survivors keep their box and score."""
    return [dets[i] for i in nms_indices(dets, iou_threshold)]


def slice_merge_groups(
    dets_2d: Sequence[Detection],
    iou_threshold: float,
    max_slice_gap: int = 1,
) -> list[tuple[Detection, tuple[int, ...]]]:
    """Group slice-wise 2D detections into 3D cubes, exposing the grouping.

    All boxes are projected into one plane. Per class, the highest-scoring
    remaining detection seeds a group; candidates are the remaining same-class
    detections overlapping the seed in-plane (IoU strictly above the
    threshold), but only those whose slice numbers chain back to the seed
    slice through gaps of at most ``max_slice_gap`` are merged. The cube
    keeps the seed's in-plane extent and spans [min slice, max slice + 1)
    of the merged members. Returns (cube, member input indices) pairs in
    seed-score order.
    """
    for idx, det in enumerate(dets_2d):
        if det.slice_id is None:
            raise ValueError(f"detection {idx} lacks slice_id; cannot merge slices")
        if det.box.dim != 2:
            raise ValueError(f"detection {idx} must carry a 2D box, got {det.box.dim}D")
    remaining = sorted(enumerate(dets_2d), key=_rank_key)
    groups: list[tuple[Detection, tuple[int, ...]]] = []
    while remaining:
        seed_idx, seed = remaining[0]
        candidates = [
            (i, d)
            for i, d in remaining
            if d.class_id == seed.class_id
            and (i == seed_idx or iou(seed.box, d.box) > iou_threshold)
        ]
        matched = _slice_component(candidates, seed_idx, max_slice_gap)
        slices = [dets_2d[i].slice_id for i in matched]
        z_lo, z_hi = min(slices), max(slices) + 1
        cube = Detection(
            box=Box(seed.box.lo + (float(z_lo),), seed.box.hi + (float(z_hi),)),
            class_id=seed.class_id,
            score=seed.score,
            image_id=seed.image_id,
            patient_id=seed.patient_id,
        )
        groups.append((cube, tuple(sorted(matched))))
        matched_set = set(matched)
        remaining = [(i, d) for i, d in remaining if i not in matched_set]
    return groups


def _slice_component(
    candidates: list[tuple[int, Detection]], seed_idx: int, max_gap: int
) -> list[int]:
    """Candidate indices reachable from the seed through slice adjacency."""
    frontier = [seed_idx]
    seen = {seed_idx}
    slice_of = {i: d.slice_id for i, d in candidates}
    while frontier:
        cur = frontier.pop()
        for i, _ in candidates:
            if i not in seen and abs(slice_of[i] - slice_of[cur]) <= max_gap:
                seen.add(i)
                frontier.append(i)
    return list(seen)


def merge_slices_to_cubes(
    dets_2d: Sequence[Detection],
    iou_threshold: float,
    max_slice_gap: int = 1,
) -> list[Detection]:
    """Lift slice-wise 2D detections to 3D cube detections."""
    return [cube for cube, _ in slice_merge_groups(dets_2d, iou_threshold, max_slice_gap)]


def components_to_detections(
    seg: np.ndarray,
    max_components: int | None = None,
    image_id: str | int | None = None,
    patient_id: str | int | None = None,
) -> list[Detection]:
    """Turn a softmax segmentation into detections via connected components.

    ``seg`` has shape (classes, *spatial) with class 0 as background; the
    argmax over the class axis defines the label map. Per foreground class,
    orthogonally connected components (4-connectivity in 2D, 6 in 3D) yield
    one detection each: the tight bounding box of the component and, as
    score, the maximum probability of that class inside it. Only the
    ``max_components`` largest components (by pixel count) per image are
    kept; the default is 5 in 2D and 15 in 3D.
    """
    seg = np.asarray(seg, dtype=float)
    if seg.ndim not in (3, 4):
        raise ValueError("seg must be (classes, H, W) or (classes, H, W, D)")
    n_classes = seg.shape[0]
    if n_classes < 2:
        raise ValueError("need background plus at least one foreground class")
    dim = seg.ndim - 1
    if max_components is None:
        max_components = 5 if dim == 2 else 15
    labels = seg.argmax(axis=0)

    found = []  # (pixel_count, class_id, box, score)
    for class_id in range(1, n_classes):
        mask = labels == class_id
        if not mask.any():
            continue
        labeled, n_comp = ndimage.label(mask)
        counts = np.bincount(labeled.ravel())[1:]
        scores = ndimage.maximum(seg[class_id], labels=labeled, index=np.arange(1, n_comp + 1))
        slices = ndimage.find_objects(labeled)
        for comp in range(n_comp):
            sl = slices[comp]
            box = Box(
                tuple(float(s.start) for s in sl),
                tuple(float(s.stop) for s in sl),
            )
            found.append((int(counts[comp]), class_id, box, float(np.atleast_1d(scores)[comp])))

    # Largest components first; class then position break count ties.
    found.sort(key=lambda t: (-t[0], t[1], t[2].lo))
    out = [
        Detection(box=box, class_id=class_id, score=score, image_id=image_id, patient_id=patient_id)
        for _, class_id, box, score in found[:max_components]
    ]
    out.sort(key=lambda d: -d.score)
    return out
