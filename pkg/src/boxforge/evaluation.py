"""Object-level detection evaluation.

Predictions are matched greedily to ground truth per image and class at a
configurable IoU threshold (0.1 by default, which respects coarse clinical
localization and non-overlapping objects). Average precision uses the
all-point precision envelope. Patient-level AP ranks each patient by the
maximum predicted score per class, deliberately ignoring localization; it is
reported alongside the object-level numbers, not instead of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .consolidate import Detection
from .geometry import Box, iou

__all__ = [
    "GroundTruthObject",
    "MatchRecord",
    "PrPoint",
    "EvalResult",
    "match_predictions",
    "average_precision",
    "pr_curve",
    "mean_ap",
    "patient_level_ap",
]


@dataclass(frozen=True)
class GroundTruthObject:
    """An annotated object: box, class, and identifiers for bookkeeping."""

    box: Box
    class_id: int
    object_id: str | int
    image_id: str | int | None = None
    patient_id: str | int | None = None

    def __post_init__(self) -> None:
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {self.class_id}")


@dataclass(frozen=True)
class MatchRecord:
    """Outcome of matching one detection: the claimed gt index, or None."""

    det_index: int
    gt_index: int | None
    score: float
    class_id: int

    @property
    def is_tp(self) -> bool:
        return self.gt_index is not None


@dataclass(frozen=True)
class PrPoint:
    precision: float
    recall: float
    threshold: float


@dataclass
class EvalResult:
    """Per-class and aggregate metrics plus the raw precision/recall curves."""

    per_class_ap: dict[int, float | None]
    map_value: float
    pr_curves: dict[int, list[PrPoint]] = field(default_factory=dict)
    patient_ap: dict[int, float | None] = field(default_factory=dict)
    patient_ap_mean: float | None = None


def match_predictions(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_threshold: float,
) -> list[MatchRecord]:
    """Greedily match detections to ground truth per image and class.

    Detections are visited in descending score order (ties keep input
    order); each claims the unclaimed same-image same-class ground truth of
    highest IoU, provided that IoU reaches the threshold. Unclaimed
    detections are false positives; ground truth left unclaimed counts as a
    false negative downstream. One record per detection is returned, sorted
    by (score desc, input index).
    """
    gt_by_group: dict[tuple, list[int]] = {}
    for g_idx, gt in enumerate(gts):
        gt_by_group.setdefault((gt.image_id, gt.class_id), []).append(g_idx)

    claimed = [False] * len(gts)
    records = []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    for d_idx in order:
        det = dets[d_idx]
        best_gt = None
        best_iou = 0.0
        for g_idx in gt_by_group.get((det.image_id, det.class_id), ()):
            if claimed[g_idx]:
                continue
            overlap = iou(det.box, gts[g_idx].box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou = overlap
                best_gt = g_idx
        if best_gt is not None:
            claimed[best_gt] = True
        records.append(
            MatchRecord(det_index=d_idx, gt_index=best_gt, score=det.score, class_id=det.class_id)
        )
    return records


def _ranked_ap(tp_flags: Sequence[bool], num_gt: int) -> float | None:
    """All-point AP from an already-ranked TP/FP sequence.

    Integrates the precision envelope over recall. ``None`` when AP is
    undefined (nothing to detect and nothing predicted).
    """
    if num_gt == 0:
        return 0.0 if tp_flags else None
    if not tp_flags:
        return 0.0
    precisions = []
    recalls = []
    tp = 0
    for rank, flag in enumerate(tp_flags, start=1):
        tp += int(flag)
        precisions.append(tp / rank)
        recalls.append(tp / num_gt)
    # Right-to-left running maximum turns the raw curve into its envelope.
    envelope = precisions[:]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for flag, rec, env in zip(tp_flags, recalls, envelope):
        if flag:
            ap += (rec - prev_recall) * env
            prev_recall = rec
    return ap


def _class_records(records: Sequence[MatchRecord], class_id: int) -> list[MatchRecord]:
    recs = [r for r in records if r.class_id == class_id]
    recs.sort(key=lambda r: (-r.score, r.det_index))
    return recs


def average_precision(records: Sequence[MatchRecord], num_gt: int) -> float | None:
    """All-point AP for one class from its match records.

    ``num_gt`` is the total number of ground-truth objects of that class.
    Returns None (undefined) when there are neither ground truths nor
    predictions, and 0.0 when predictions exist for a class with no ground
    truth.
    """
    ranked = sorted(records, key=lambda r: (-r.score, r.det_index))
    return _ranked_ap([r.is_tp for r in ranked], num_gt)


def pr_curve(records: Sequence[MatchRecord], num_gt: int) -> list[PrPoint]:
    """Raw precision/recall pairs at each detection rank for one class."""
    ranked = sorted(records, key=lambda r: (-r.score, r.det_index))
    points = []
    tp = 0
    for rank, rec in enumerate(ranked, start=1):
        tp += int(rec.is_tp)
        recall = tp / num_gt if num_gt > 0 else 0.0
        points.append(PrPoint(precision=tp / rank, recall=recall, threshold=rec.score))
    return points


def mean_ap(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_threshold: float,
    patient_labels: Mapping[tuple, int] | None = None,
    records: Sequence[MatchRecord] | None = None,
) -> EvalResult:
    """Match, then average per-class AP over the classes where it is defined.

    Classes are the union of those appearing in the ground truth and in the
    detections. When ``patient_labels`` (a {(patient_id, class_id): 0/1}
    map) is provided, patient-level AP is computed as well. Precomputed
    ``records`` (e.g. from per-image matching run concurrently) skip the
    matching step.
    """
    if records is None:
        records = match_predictions(dets, gts, iou_threshold)
    classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    per_class: dict[int, float | None] = {}
    curves: dict[int, list[PrPoint]] = {}
    for c in classes:
        recs = _class_records(records, c)
        num_gt = sum(1 for g in gts if g.class_id == c)
        per_class[c] = _ranked_ap([r.is_tp for r in recs], num_gt)
        curves[c] = pr_curve(recs, num_gt)
    defined = {c: ap for c, ap in per_class.items() if ap is not None}
    if not defined:
        raise ValueError("AP undefined for every class; nothing to evaluate")
    result = EvalResult(
        per_class_ap=per_class,
        map_value=sum(defined.values()) / len(defined),
        pr_curves=curves,
    )
    if patient_labels is not None:
        result.patient_ap = patient_level_ap(dets, patient_labels)
        defined_pat = [ap for ap in result.patient_ap.values() if ap is not None]
        result.patient_ap_mean = sum(defined_pat) / len(defined_pat) if defined_pat else None
    return result


def patient_level_ap(
    dets: Sequence[Detection],
    patient_labels: Mapping[tuple, int],
) -> dict[int, float | None]:
    """AP of per-patient maximum scores against binary patient labels.

    For each class, every labelled patient receives the maximum score among
    that patient's detections of the class (0 when there are none), and AP
    is computed over this ranking. Detections for patients missing from the
    label map are a usage error. The metric is blind to localization by
    construction.
    """
    classes = sorted({c for (_, c) in patient_labels})
    patients_by_class: dict[int, list] = {
        c: [p for (p, cc) in patient_labels if cc == c] for c in classes
    }
    for det in dets:
        if (det.patient_id, det.class_id) not in patient_labels:
            raise ValueError(
                f"patient {det.patient_id!r} has no label for class {det.class_id}"
            )
    out: dict[int, float | None] = {}
    for c in classes:
        patients = patients_by_class[c]
        best: dict = {p: 0.0 for p in patients}
        for det in dets:
            if det.class_id == c and det.score > best[det.patient_id]:
                best[det.patient_id] = det.score
        ranked = sorted(patients, key=lambda p: -best[p])
        flags = [patient_labels[(p, c)] == 1 for p in ranked]
        out[c] = _ranked_ap(flags, num_gt=sum(flags))
    return out
