"""Interchange file formats: detections, ground truth, plans, and tensors.

Everything structured travels as JSON so files stay inspectable and
validatable; dense arrays use .npy (exact) with .csv accepted for hand-made
inputs. Scores are serialized with 9 significant digits, which makes a
write/read/write cycle reproduce files byte for byte across platforms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .consolidate import Detection
from .evaluation import EvalResult, GroundTruthObject
from .geometry import Box
from .tiling import TilingPlan

__all__ = [
    "SchemaError",
    "ImageRecord",
    "GroundTruthData",
    "save_detections",
    "load_detections",
    "save_ground_truth",
    "load_ground_truth",
    "save_plan",
    "load_plan",
    "eval_result_to_dict",
    "save_eval_result",
    "save_pr_curves_csv",
    "load_tensor",
]

SCHEMA_VERSION = 1


class SchemaError(Exception):
    """An input file violates its schema; the message names the offender."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    shape: tuple[int, ...]


@dataclass
class GroundTruthData:
    images: list[ImageRecord]
    objects: list[GroundTruthObject]
    patient_labels: dict[tuple, int]


def _round_score(score: float) -> float:
    # 9 significant digits: stable across write/read cycles.
    return float(f"{score:.9g}")


def _require(data: Mapping, key: str, where: str):
    if key not in data:
        raise SchemaError(f"{where}: missing required key {key!r}")
    return data[key]


def _box_from_list(values, dim: int, where: str) -> Box:
    if not isinstance(values, (list, tuple)) or len(values) != 2 * dim:
        raise SchemaError(f"{where}: box must hold {2 * dim} numbers (lo..., hi...)")
    try:
        return Box.from_coords(values)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: invalid box: {exc}") from exc


def save_detections(
    path: str | Path,
    dets: Sequence[Detection],
    dimensionality: int,
    metadata: Mapping | None = None,
) -> None:
    """Write a detection file; detections are ordered by image then score."""
    ordered = sorted(
        dets, key=lambda d: (str(d.image_id), -d.score, d.class_id)
    )
    records = []
    for det in ordered:
        rec = {
            "image_id": det.image_id,
            "patient_id": det.patient_id,
            "class_id": det.class_id,
            "score": _round_score(det.score),
            "box": list(det.box.coords()),
        }
        if det.view_id is not None:
            rec["view_id"] = det.view_id
        if det.patch_center is not None:
            rec["patch_center"] = list(det.patch_center)
        if det.slice_id is not None:
            rec["slice_id"] = det.slice_id
        records.append(rec)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "dimensionality": dimensionality,
        "detections": records,
    }
    if metadata:
        doc["metadata"] = dict(metadata)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_detections(path: str | Path) -> tuple[list[Detection], int, dict]:
    """Read and validate a detection file: (detections, dimensionality, metadata)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    dim = _require(doc, "dimensionality", str(path))
    if dim not in (2, 3):
        raise SchemaError(f"{path}: dimensionality must be 2 or 3, got {dim!r}")
    raw = _require(doc, "detections", str(path))
    dets = []
    for i, rec in enumerate(raw):
        where = f"{path}: detections[{i}]"
        score = _require(rec, "score", where)
        if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise SchemaError(f"{where}: score {score!r} outside [0, 1]")
        box = _box_from_list(_require(rec, "box", where), dim, where)
        try:
            dets.append(
                Detection(
                    box=box,
                    class_id=int(_require(rec, "class_id", where)),
                    score=float(score),
                    image_id=rec.get("image_id"),
                    patient_id=rec.get("patient_id"),
                    view_id=rec.get("view_id"),
                    patch_center=tuple(rec["patch_center"]) if rec.get("patch_center") else None,
                    slice_id=rec.get("slice_id"),
                )
            )
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    return dets, dim, doc.get("metadata", {})


def save_ground_truth(
    path: str | Path,
    images: Sequence[ImageRecord],
    objects: Sequence[GroundTruthObject],
    patient_labels: Mapping[tuple, int],
) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "images": [
            {"image_id": im.image_id, "patient_id": im.patient_id, "shape": list(im.shape)}
            for im in images
        ],
        "objects": [
            {
                "object_id": g.object_id,
                "image_id": g.image_id,
                "patient_id": g.patient_id,
                "class_id": g.class_id,
                "box": list(g.box.coords()),
            }
            for g in objects
        ],
        "patient_labels": [
            {"patient_id": p, "class_id": c, "label": int(label)}
            for (p, c), label in sorted(patient_labels.items(), key=lambda kv: (str(kv[0][0]), kv[0][1]))
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_ground_truth(path: str | Path) -> GroundTruthData:
    """Read and validate a ground-truth file, checking referential integrity."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    images = []
    for i, rec in enumerate(_require(doc, "images", str(path))):
        where = f"{path}: images[{i}]"
        images.append(
            ImageRecord(
                image_id=_require(rec, "image_id", where),
                patient_id=_require(rec, "patient_id", where),
                shape=tuple(int(s) for s in _require(rec, "shape", where)),
            )
        )
    known_images = {im.image_id: im for im in images}
    if len(known_images) != len(images):
        raise SchemaError(f"{path}: duplicate image_id in images")
    dim = len(images[0].shape) if images else 2

    objects = []
    for i, rec in enumerate(_require(doc, "objects", str(path))):
        where = f"{path}: objects[{i}]"
        image_id = _require(rec, "image_id", where)
        if image_id not in known_images:
            raise SchemaError(f"{where}: references undeclared image {image_id!r}")
        box = _box_from_list(_require(rec, "box", where), dim, where)
        try:
            objects.append(
                GroundTruthObject(
                    box=box,
                    class_id=int(_require(rec, "class_id", where)),
                    object_id=_require(rec, "object_id", where),
                    image_id=image_id,
                    patient_id=rec.get("patient_id", known_images[image_id].patient_id),
                )
            )
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc

    labels: dict[tuple, int] = {}
    for i, rec in enumerate(doc.get("patient_labels", [])):
        where = f"{path}: patient_labels[{i}]"
        label = _require(rec, "label", where)
        if label not in (0, 1):
            raise SchemaError(f"{where}: label must be 0 or 1, got {label!r}")
        labels[(_require(rec, "patient_id", where), int(_require(rec, "class_id", where)))] = int(label)
    return GroundTruthData(images=images, objects=objects, patient_labels=labels)


def save_plan(path: str | Path, tiling: TilingPlan) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **tiling.to_json_dict()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_plan(path: str | Path) -> TilingPlan:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    try:
        return TilingPlan.from_json_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: invalid plan: {exc}") from exc


def eval_result_to_dict(result: EvalResult, iou_threshold: float) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "iou_threshold": iou_threshold,
        "map": result.map_value,
        "per_class_ap": {str(c): ap for c, ap in result.per_class_ap.items()},
        "patient_ap": {str(c): ap for c, ap in result.patient_ap.items()},
        "patient_ap_mean": result.patient_ap_mean,
    }


def save_eval_result(path: str | Path, result: EvalResult, iou_threshold: float) -> None:
    Path(path).write_text(json.dumps(eval_result_to_dict(result, iou_threshold), indent=1) + "\n")


def save_pr_curves_csv(path: str | Path, result: EvalResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "score_threshold", "precision", "recall"])
        for class_id in sorted(result.pr_curves):
            for pt in result.pr_curves[class_id]:
                writer.writerow([class_id, f"{pt.threshold:.9g}", f"{pt.precision:.9g}", f"{pt.recall:.9g}"])


def load_tensor(path: str | Path) -> np.ndarray:
    """Load a dense array from .npy or .csv."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".csv":
        return np.loadtxt(path, delimiter=",", ndmin=2)
    raise SchemaError(f"{path}: unsupported tensor format {path.suffix!r} (use .npy or .csv)")
