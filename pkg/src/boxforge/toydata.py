"""Synthetic detection tasks and a prediction simulator.

Three two-class toy tasks on 320x320 images exercise the usual sub-problems
of lesion categorization:

* ``shapes``   - filled discs (diameter 20) vs donuts (same disc with a
                 centered 4-pixel hole); the hole is cut out of the
                 segmentation mask, so the mask itself is discriminative.
* ``patterns`` - identical images, but the donut hole is NOT cut from the
                 mask; the discriminative feature only exists in the image.
* ``scales``   - discs of diameter 19 vs 20; class information lives purely
                 in object extent.

Objects are imprinted by raising intensity by 0.2 over a zero background,
then uniform noise is added to every pixel. Given one seed, tasks ``shapes``
and ``patterns`` produce byte-identical images and differ only at hole
pixels in the masks.

The prediction simulator stands in for a trained network: per tiling-plan
view it emits every ground-truth box with coordinate jitter and a sampled
score, plus Poisson-distributed spurious boxes, so consolidation and
evaluation can run end to end without any model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .consolidate import Detection
from .evaluation import GroundTruthObject
from .geometry import Box, clip
from .tiling import TilingPlan

__all__ = [
    "TASKS",
    "ToySample",
    "ScoreModel",
    "generate",
    "simulate_predictions",
    "rasterize_circle",
    "circle_pixel_count",
]

TASKS = ("shapes", "patterns", "scales")
IMAGE_SIZE = 320
OBJECT_INTENSITY = 0.2
DEFAULT_NOISE_AMPLITUDE = 0.2
PLACEMENT_MARGIN = 2
# Conventional split sizes for pairing the generator with an external trainer.
SPLIT_SIZES = {"train": 1000, "val": 500, "test": 1000}

_DISC_DIAMETER = 20
_HOLE_DIAMETER = 4
_SMALL_DIAMETER = 19


@dataclass
class ToySample:
    """One generated image with its label map and ground-truth boxes."""

    image: np.ndarray
    mask: np.ndarray
    gts: list[GroundTruthObject]
    task: str
    seed: int
    image_id: str
    patient_id: str

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.image.shape


@dataclass(frozen=True)
class ScoreModel:
    """Score distributions for simulated detections.

    True-object scores are drawn around ``tp_mean``, spurious-box scores
    around ``fp_mean``; both are clipped into [0, 1]. A spread of 0 makes
    the draws exact.
    """

    tp_mean: float = 0.85
    fp_mean: float = 0.3
    spread: float = 0.1

    def sample_true(self, rng: np.random.Generator) -> float:
        return float(np.clip(rng.normal(self.tp_mean, self.spread), 0.0, 1.0))

    def sample_false(self, rng: np.random.Generator) -> float:
        return float(np.clip(rng.normal(self.fp_mean, self.spread), 0.0, 1.0))

    @classmethod
    def perfect(cls) -> "ScoreModel":
        """Noise-free scores: 1.0 for true boxes, 0.0 for spurious ones."""
        return cls(tp_mean=1.0, fp_mean=0.0, spread=0.0)


def _circle_center(bbox_lo: tuple[int, int], diameter: int) -> tuple[float, float]:
    # Odd diameters center on a pixel, even ones on a pixel corner, so the
    # rasterized extent equals the nominal diameter either way.
    return tuple(lo + (diameter - 1) / 2 for lo in bbox_lo)


def rasterize_circle(
    center: Sequence[float], diameter: float, shape: Sequence[int]
) -> np.ndarray:
    """Boolean mask of pixels whose centers lie within the circle.

    A pixel (r, c) belongs to the circle iff its squared distance to the
    center is at most (diameter/2)**2.
    """
    cy, cx = (float(c) for c in center)
    radius_sq = (diameter / 2.0) ** 2
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius_sq


def circle_pixel_count(diameter: int) -> int:
    """Pixel count of a rasterized circle of the given diameter."""
    pad = diameter + 4
    center = _circle_center((2, 2), diameter)
    return int(rasterize_circle(center, diameter, (pad, pad)).sum())


def _object_diameters(task: str, class_id: int) -> tuple[int, int | None]:
    """(outer diameter, hole diameter or None) for one object."""
    if task in ("shapes", "patterns"):
        return (_DISC_DIAMETER, _HOLE_DIAMETER if class_id == 2 else None)
    if task == "scales":
        return (_SMALL_DIAMETER if class_id == 1 else _DISC_DIAMETER, None)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def _place_objects(
    rng: np.random.Generator,
    task: str,
    n_objects: int,
    shape: tuple[int, int],
    max_attempts: int = 200,
) -> list[tuple[int, tuple[int, int], int, int | None]]:
    """Sample non-overlapping (class, bbox origin, diameter, hole) tuples."""
    placed: list[tuple[int, tuple[int, int], int, int | None]] = []
    boxes: list[tuple[int, int, int, int]] = []
    for _ in range(n_objects):
        for attempt in range(max_attempts):
            class_id = int(rng.integers(1, 3))
            diameter, hole = _object_diameters(task, class_id)
            y0 = int(rng.integers(PLACEMENT_MARGIN, shape[0] - diameter - PLACEMENT_MARGIN + 1))
            x0 = int(rng.integers(PLACEMENT_MARGIN, shape[1] - diameter - PLACEMENT_MARGIN + 1))
            candidate = (y0, x0, y0 + diameter, x0 + diameter)
            if all(
                candidate[2] + PLACEMENT_MARGIN <= b[0]
                or b[2] + PLACEMENT_MARGIN <= candidate[0]
                or candidate[3] + PLACEMENT_MARGIN <= b[1]
                or b[3] + PLACEMENT_MARGIN <= candidate[1]
                for b in boxes
            ):
                placed.append((class_id, (y0, x0), diameter, hole))
                boxes.append(candidate)
                break
        else:
            raise ValueError(
                f"could not place object {len(placed) + 1}/{n_objects} after {max_attempts} attempts"
            )
    return placed


def generate_one(
    task: str,
    index: int,
    seed: int = 0,
    objects_per_image: tuple[int, int] = (1, 3),
    image_shape: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE),
    noise_amplitude: float = DEFAULT_NOISE_AMPLITUDE,
) -> ToySample:
    """Generate the sample at one image index.

    The RNG derives from (seed, index) only, so any subset of indices can be
    produced in any order, or concurrently, with identical results.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    lo, hi = objects_per_image
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid objects_per_image range {objects_per_image}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    n_objects = int(rng.integers(lo, hi + 1))
    placed = _place_objects(rng, task, n_objects, image_shape)

    image = np.zeros(image_shape, dtype=float)
    mask = np.zeros(image_shape, dtype=np.int32)
    image_id = f"img{index:04d}"
    patient_id = f"pat{index:04d}"
    gts = []
    for obj_idx, (class_id, (y0, x0), diameter, hole) in enumerate(placed):
        center = _circle_center((y0, x0), diameter)
        disc = rasterize_circle(center, diameter, image_shape)
        if hole is not None:
            imprint = disc & ~rasterize_circle(center, hole, image_shape)
        else:
            imprint = disc
        image[imprint] += OBJECT_INTENSITY
        # "patterns" hides the hole in the mask; the image keeps it.
        mask_region = disc if (hole is not None and task == "patterns") else imprint
        mask[mask_region] = class_id
        gts.append(
            GroundTruthObject(
                box=Box((float(y0), float(x0)), (float(y0 + diameter), float(x0 + diameter))),
                class_id=class_id,
                object_id=f"{image_id}-obj{obj_idx}",
                image_id=image_id,
                patient_id=patient_id,
            )
        )
    image += rng.uniform(0.0, noise_amplitude, size=image_shape)
    return ToySample(
        image=image,
        mask=mask,
        gts=gts,
        task=task,
        seed=seed,
        image_id=image_id,
        patient_id=patient_id,
    )


def generate(
    task: str,
    n_images: int,
    objects_per_image: tuple[int, int] = (1, 3),
    seed: int = 0,
    image_shape: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE),
    noise_amplitude: float = DEFAULT_NOISE_AMPLITUDE,
) -> list[ToySample]:
    """Generate deterministic toy samples for one task.

    Each image derives its own RNG from (seed, image index), so generation
    is reproducible and order-independent. One synthetic patient is assigned
    per image.
    """
    return [
        generate_one(
            task,
            idx,
            seed=seed,
            objects_per_image=objects_per_image,
            image_shape=image_shape,
            noise_amplitude=noise_amplitude,
        )
        for idx in range(n_images)
    ]


def _jittered_box(box: Box, sigma: float, bounds: Box, rng: np.random.Generator) -> Box:
    if sigma <= 0.0:
        return box
    lo = []
    hi = []
    for a, b in zip(box.lo, box.hi):
        a2 = a + rng.normal(0.0, sigma)
        b2 = b + rng.normal(0.0, sigma)
        lo.append(min(a2, b2))
        hi.append(max(a2, b2))
    return clip(Box(tuple(lo), tuple(hi)), bounds)


def simulate_predictions(
    samples: Sequence[ToySample],
    jitter_sigma: float,
    fp_rate: float,
    score_model: ScoreModel,
    plan: TilingPlan,
    seed: int = 0,
    fp_size_range: tuple[float, float] = (8.0, 32.0),
    fp_classes: tuple[int, ...] = (1, 2),
) -> list[Detection]:
    """Emit noisy per-view detections for a batch of toy samples.

    Every view of the plan predicts each ground-truth object whose center
    falls inside the view's patch: the box is jittered per corner with the
    given Gaussian sigma and scored by the score model. Each view also
    contributes Poisson(``fp_rate``) spurious boxes of random size, class,
    and position. Deterministic for a given seed; each sample owns a derived
    RNG stream.
    """
    out: list[Detection] = []
    views = list(plan.views())
    for s_idx, sample in enumerate(samples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(s_idx,)))
        out.extend(
            simulate_image_predictions(
                gts=sample.gts,
                image_shape=sample.image_shape,
                views=views,
                patch_shape=plan.patch_shape,
                jitter_sigma=jitter_sigma,
                fp_rate=fp_rate,
                score_model=score_model,
                rng=rng,
                image_id=sample.image_id,
                patient_id=sample.patient_id,
                fp_size_range=fp_size_range,
                fp_classes=fp_classes,
            )
        )
    return out


def simulate_image_predictions(
    gts: Sequence[GroundTruthObject],
    image_shape: Sequence[int],
    views,
    patch_shape: Sequence[int],
    jitter_sigma: float,
    fp_rate: float,
    score_model: ScoreModel,
    rng: np.random.Generator,
    image_id,
    patient_id,
    fp_size_range: tuple[float, float] = (8.0, 32.0),
    fp_classes: tuple[int, ...] = (1, 2),
) -> list[Detection]:
    """Single-image simulation core; drives one RNG stream for one image."""
    bounds = Box(tuple(0.0 for _ in image_shape), tuple(float(s) for s in image_shape))
    dets = []
    for view in views:
        for gt in gts:
            center = gt.box.center()
            inside = all(
                o <= c < o + p for c, o, p in zip(center, view.origin, patch_shape)
            )
            if not inside:
                continue
            dets.append(
                Detection(
                    box=_jittered_box(gt.box, jitter_sigma, bounds, rng),
                    class_id=gt.class_id,
                    score=score_model.sample_true(rng),
                    image_id=image_id,
                    patient_id=patient_id,
                    view_id=view.view_id,
                    patch_center=view.center,
                )
            )
        for _ in range(rng.poisson(fp_rate)):
            sizes = [float(rng.uniform(*fp_size_range)) for _ in image_shape]
            lo = [float(rng.uniform(0, max(s - sz, 1))) for s, sz in zip(image_shape, sizes)]
            box = Box(tuple(lo), tuple(l + sz for l, sz in zip(lo, sizes)))
            dets.append(
                Detection(
                    box=clip(box, bounds),
                    class_id=int(rng.choice(fp_classes)),
                    score=score_model.sample_false(rng),
                    image_id=image_id,
                    patient_id=patient_id,
                    view_id=view.view_id,
                    patch_center=view.center,
                )
            )
    return dets
