"""Command-line frontend binding the pipeline stages together.

Subcommands: gen-toy, simulate, plan, consolidate, evaluate, anchors,
loss-eval. Data goes to stdout or to --out files; diagnostics go to stderr.
Exit codes: 0 success, 2 usage or schema errors, 3 internal errors. The
BOXFORGE_LOG environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import anchors as anchors_mod
from . import consolidate as cons
from . import evaluation, io, losses, tiling, toydata

logger = logging.getLogger("boxforge")


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from exc


def _group_by_image(dets):
    groups: dict = {}
    for det in dets:
        groups.setdefault(det.image_id, []).append(det)
    return groups


def _map_per_image(fn, groups: dict, jobs: int) -> list:
    """Apply fn to each image's detections; canonical image_id order."""
    keys = sorted(groups, key=str)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda k: fn(groups[k]), keys))
    else:
        results = [fn(groups[k]) for k in keys]
    out = []
    for res in results:
        out.extend(res)
    return out


# ---------------------------------------------------------------- gen-toy


def cmd_gen_toy(args) -> int:
    objects = _parse_ints(args.objects)
    if len(objects) != 2:
        raise ValueError("--objects expects MIN,MAX")
    shape = _parse_ints(args.image_size)
    if len(shape) == 1:
        shape = (shape[0], shape[0])

    def make(index):
        return toydata.generate_one(
            args.task,
            index,
            seed=args.seed,
            objects_per_image=(objects[0], objects[1]),
            image_shape=shape,
            noise_amplitude=args.noise,
        )

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            samples = list(pool.map(make, range(args.n)))
    else:
        samples = [make(i) for i in range(args.n)]
    out_dir = Path(args.out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    images = []
    objects_out = []
    labels: dict[tuple, int] = {}
    for sample in samples:
        if args.format == "npy":
            np.save(out_dir / "images" / f"{sample.image_id}.npy", sample.image)
            np.save(out_dir / "masks" / f"{sample.image_id}.npy", sample.mask)
        else:
            from PIL import Image

            scale = 255.0 / max(toydata.OBJECT_INTENSITY + args.noise, 1e-9)
            img8 = np.clip(sample.image * scale, 0, 255).astype(np.uint8)
            Image.fromarray(img8).save(out_dir / "images" / f"{sample.image_id}.png")
            Image.fromarray(sample.mask.astype(np.uint8)).save(
                out_dir / "masks" / f"{sample.image_id}.png"
            )
        images.append(
            io.ImageRecord(
                image_id=sample.image_id,
                patient_id=sample.patient_id,
                shape=sample.image_shape,
            )
        )
        objects_out.extend(sample.gts)
        for class_id in (1, 2):
            present = any(g.class_id == class_id for g in sample.gts)
            labels[(sample.patient_id, class_id)] = int(present)
    io.save_ground_truth(out_dir / "ground_truth.json", images, objects_out, labels)
    print(str(out_dir))
    return 0


# --------------------------------------------------------------- simulate


def _score_model_from_args(args) -> toydata.ScoreModel:
    if args.perfect_scores:
        return toydata.ScoreModel.perfect()
    return toydata.ScoreModel(
        tp_mean=args.tp_mean, fp_mean=args.fp_mean, spread=args.score_spread
    )


def _plan_from_args(args, image_shape) -> tiling.TilingPlan:
    if args.plan_file:
        return io.load_plan(args.plan_file)
    patch = _parse_ints(args.patch) if args.patch else tuple(image_shape)
    mirrors = None if args.mirrors == "all" else ((),)
    return tiling.plan(
        image_shape,
        patch,
        min_overlap=args.min_overlap,
        mirror_axes_sets=mirrors,
        n_models=args.models,
    )


def cmd_simulate(args) -> int:
    gt_data = io.load_ground_truth(args.gts)
    if not gt_data.images:
        raise io.SchemaError(f"{args.gts}: no images declared")
    shapes = {im.shape for im in gt_data.images}
    if len(shapes) > 1:
        raise ValueError(f"images have mixed shapes {sorted(shapes)}; one plan cannot cover them")
    image_shape = gt_data.images[0].shape
    plan_obj = _plan_from_args(args, image_shape)
    score_model = _score_model_from_args(args)
    views = list(plan_obj.views())

    gts_by_image: dict = {im.image_id: [] for im in gt_data.images}
    for gt in gt_data.objects:
        gts_by_image[gt.image_id].append(gt)

    dets = []
    for idx, im in enumerate(gt_data.images):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(idx,)))
        dets.extend(
            toydata.simulate_image_predictions(
                gts=gts_by_image[im.image_id],
                image_shape=im.shape,
                views=views,
                patch_shape=plan_obj.patch_shape,
                jitter_sigma=args.jitter,
                fp_rate=args.fp_rate,
                score_model=score_model,
                rng=rng,
                image_id=im.image_id,
                patient_id=im.patient_id,
            )
        )
    io.save_detections(
        args.out,
        dets,
        dimensionality=len(image_shape),
        metadata={
            "source": "simulate",
            "seed": args.seed,
            "jitter_sigma": args.jitter,
            "fp_rate": args.fp_rate,
            "views": len(views),
        },
    )
    print(args.out)
    return 0


# ------------------------------------------------------------------- plan


def cmd_plan(args) -> int:
    image = _parse_ints(args.image)
    patch = _parse_ints(args.patch)
    mirrors = None if args.mirrors == "all" else ((),)
    plan_obj = tiling.plan(
        image, patch, min_overlap=args.min_overlap, mirror_axes_sets=mirrors, n_models=args.models
    )
    lines = [
        f"image {'x'.join(map(str, image))}, patch {'x'.join(map(str, patch))}",
        f"patches: {len(plan_obj.origins)}",
        f"origins: {', '.join(str(o) for o in plan_obj.origins)}",
        f"views per patch: {plan_obj.views_per_patch} "
        f"({len(plan_obj.mirror_axes_sets)} mirror settings x {plan_obj.n_models} models)",
    ]
    counts = _region_view_counts(plan_obj)
    for views, n_regions in sorted(counts.items()):
        lines.append(f"regions with {views} views: {n_regions}")
    print("\n".join(lines))
    if args.out:
        io.save_plan(args.out, plan_obj)
    return 0


def _region_view_counts(plan_obj: tiling.TilingPlan) -> dict[int, int]:
    """Views per cell of the patch-overlap arrangement, cell-counted."""
    axes_bounds = []
    for k in range(plan_obj.dim):
        cuts = {0, plan_obj.image_shape[k]}
        for origin in plan_obj.origins:
            cuts.add(min(max(origin[k], 0), plan_obj.image_shape[k]))
            cuts.add(min(max(origin[k] + plan_obj.patch_shape[k], 0), plan_obj.image_shape[k]))
        axes_bounds.append(sorted(cuts))
    mids_per_axis = [
        [(a + b) / 2 for a, b in zip(bounds, bounds[1:]) if b > a] for bounds in axes_bounds
    ]
    counts: dict[int, int] = {}
    from itertools import product

    for mid in product(*mids_per_axis):
        views = tiling.expected_views(plan_obj, mid)
        counts[views] = counts.get(views, 0) + 1
    return counts


# ------------------------------------------------------------- consolidate


def cmd_consolidate(args) -> int:
    dets, dim, _meta = io.load_detections(args.infile)
    if args.mode == "merge2d3d" and dim != 2:
        raise ValueError("merge2d3d consolidates 2D slice detections; input file is 3D")

    plan_obj = io.load_plan(args.plan_file) if args.plan_file else None
    sigma = args.sigma_patch
    if sigma is None:
        sigma = min(plan_obj.patch_shape) / 4.0 if plan_obj else 80.0

    if args.mode == "wbc":
        cfg = cons.WbcConfig(
            iou_threshold=args.iou_thresh,
            sigma_patch=sigma,
            expected_views=args.expected_views or 1,
        )

        def probe(center):
            clamped = tuple(
                min(max(c, 0.0), s - 1e-9) for c, s in zip(center, plan_obj.image_shape)
            )
            return max(1, tiling.expected_views(plan_obj, clamped))

        fn = lambda group: cons.wbc(group, cfg, expected_views_at=probe if plan_obj else None)
        out_dim = dim
    elif args.mode == "nms":
        fn = lambda group: cons.nms(group, args.iou_thresh)
        out_dim = dim
    elif args.mode == "merge2d3d":
        fn = lambda group: cons.merge_slices_to_cubes(group, args.iou_thresh, args.slice_gap)
        out_dim = 3
    else:
        raise ValueError(f"unknown mode {args.mode!r}")

    merged = _map_per_image(fn, _group_by_image(dets), args.jobs)
    io.save_detections(
        args.out,
        merged,
        dimensionality=out_dim,
        metadata={
            "source": "consolidate",
            "mode": args.mode,
            "iou_threshold": args.iou_thresh,
            "sigma_patch": sigma if args.mode == "wbc" else None,
            "expected_views": args.expected_views if args.mode == "wbc" else None,
            "slice_gap": args.slice_gap if args.mode == "merge2d3d" else None,
        },
    )
    print(args.out)
    return 0


# --------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    dets, _dim, _meta = io.load_detections(args.dets)
    gt_data = io.load_ground_truth(args.gts)
    known = {im.image_id for im in gt_data.images}
    for det in dets:
        if det.image_id not in known:
            raise io.SchemaError(
                f"{args.dets}: detection references image {det.image_id!r} "
                "not declared in the ground-truth file"
            )

    if args.jobs > 1:
        records = _parallel_match(dets, gt_data.objects, args.iou_thresh, args.jobs)
    else:
        records = None
    result = evaluation.mean_ap(
        dets,
        gt_data.objects,
        args.iou_thresh,
        patient_labels=gt_data.patient_labels or None,
        records=records,
    )

    header = f"{'class':>8} {'ap':>12} {'patient_ap':>12}"
    rows = [header]
    for c in sorted(result.per_class_ap):
        ap = result.per_class_ap[c]
        pat = result.patient_ap.get(c)
        rows.append(
            f"{c:>8} {_fmt(ap):>12} {_fmt(pat):>12}"
        )
    rows.append(f"{'mean':>8} {_fmt(result.map_value):>12} {_fmt(result.patient_ap_mean):>12}")
    print("\n".join(rows))

    if args.out:
        io.save_eval_result(args.out, result, args.iou_thresh)
    if args.curves_out:
        io.save_pr_curves_csv(args.curves_out, result)
    return 0


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.6f}"


def _parallel_match(dets, gts, iou_threshold, jobs):
    """Per-image matching in a thread pool; record order is canonicalized."""
    det_groups: dict = {}
    for idx, det in enumerate(dets):
        det_groups.setdefault(det.image_id, []).append(idx)
    gt_groups: dict = {}
    for idx, gt in enumerate(gts):
        gt_groups.setdefault(gt.image_id, []).append(idx)
    keys = sorted(det_groups, key=str)

    def run(image_id):
        d_idx = det_groups[image_id]
        g_idx = gt_groups.get(image_id, [])
        local = evaluation.match_predictions(
            [dets[i] for i in d_idx], [gts[i] for i in g_idx], iou_threshold
        )
        return [
            evaluation.MatchRecord(
                det_index=d_idx[r.det_index],
                gt_index=g_idx[r.gt_index] if r.gt_index is not None else None,
                score=r.score,
                class_id=r.class_id,
            )
            for r in local
        ]

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        chunks = list(pool.map(run, keys))
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=lambda r: (-r.score, r.det_index))
    return records


# ----------------------------------------------------------------- anchors


def cmd_anchors(args) -> int:
    if args.action != "report":
        raise ValueError(f"unknown anchors action {args.action!r}; expected 'report'")
    image = _parse_ints(args.image)
    ratios = _parse_floats(args.ratios)
    levels = _parse_ints(args.levels)
    sizes = _parse_floats(args.sizes)
    if len(sizes) != len(levels):
        raise ValueError("--sizes and --levels must have equal length")
    if len(image) == 3:
        z_scales = _parse_ints(args.z_scales)
        if len(z_scales) != len(levels):
            raise ValueError("--z-scales and --levels must have equal length")
        spec = anchors_mod.PyramidSpec(
            levels=tuple(
                anchors_mod.PyramidLevel(index=j, anchor_size=s, z_scale=z)
                for j, s, z in zip(levels, sizes, z_scales)
            ),
            aspect_ratios=ratios,
        )
    else:
        spec = anchors_mod.PyramidSpec(
            levels=tuple(
                anchors_mod.PyramidLevel(index=j, anchor_size=s)
                for j, s in zip(levels, sizes)
            ),
            aspect_ratios=ratios,
        )
    report = anchors_mod.pyramid_report(spec, image)
    total = sum(row.anchor_count for row in report)
    if args.format == "csv":
        lines = ["level,resolution,role,anchor_size,z_scale,anchors"]
        for row in report:
            res = "x".join(str(r) for r in row.resolution)
            lines.append(
                f"{row.name},{res},{row.role},"
                f"{row.anchor_size if row.anchor_size is not None else ''},"
                f"{row.z_scale if row.z_scale is not None else ''},{row.anchor_count}"
            )
        lines.append(f"total,,,,,{total}")
    else:
        lines = [f"{'level':>6} {'resolution':>16} {'role':>14} {'side':>6} {'z':>4} {'anchors':>10}"]
        for row in report:
            res = "x".join(str(r) for r in row.resolution)
            side = "-" if row.anchor_size is None else f"{row.anchor_size:g}"
            z = "-" if row.z_scale is None else str(row.z_scale)
            lines.append(
                f"{row.name:>6} {res:>16} {row.role:>14} {side:>6} {z:>4} {row.anchor_count:>10}"
            )
        lines.append(f"{'total':>6} {'':>16} {'':>14} {'':>6} {'':>4} {total:>10}")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------- loss-eval


def cmd_loss_eval(args) -> int:
    u = io.load_tensor(args.probs)
    targets = io.load_tensor(args.targets)
    if args.targets_are_labels:
        batch = losses.LossBatch.from_labels(u, np.asarray(targets).ravel().astype(int))
    else:
        batch = losses.LossBatch(u=u, v=targets)
    loss = losses.dice_ce_loss(batch, dice_eps=args.dice_eps)
    print(loss)
    if args.grad_out:
        np.save(args.grad_out, losses.dice_ce_grad(batch))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxforge",
        description="Detection post-processing: toy data, simulation, tiling, "
        "consolidation, anchors, losses, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate synthetic detection tasks")
    p.add_argument("--task", choices=toydata.TASKS, required=True)
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--objects", default="1,3", help="MIN,MAX objects per image")
    p.add_argument("--noise", type=float, default=toydata.DEFAULT_NOISE_AMPLITUDE)
    p.add_argument("--image-size", default="320,320")
    p.add_argument("--format", choices=("npy", "png"), default="npy")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("simulate", help="emit noisy per-view predictions for toy ground truth")
    p.add_argument("--gts", required=True, help="ground-truth JSON from gen-toy")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.0, help="corner jitter sigma (pixels)")
    p.add_argument("--fp-rate", type=float, default=0.0, help="Poisson rate of spurious boxes per view")
    p.add_argument("--plan-file", default=None)
    p.add_argument("--patch", default=None, help="patch shape, e.g. 288,288 (default: whole image)")
    p.add_argument("--min-overlap", type=int, default=32)
    p.add_argument("--mirrors", choices=("all", "none"), default="all")
    p.add_argument("--models", type=int, default=1, help="ensemble size")
    p.add_argument("--tp-mean", type=float, default=0.85)
    p.add_argument("--fp-mean", type=float, default=0.3)
    p.add_argument("--score-spread", type=float, default=0.1)
    p.add_argument("--perfect-scores", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan", help="lay out patch crops and mirror views")
    p.add_argument("--image", required=True, help="image shape, e.g. 320,320")
    p.add_argument("--patch", required=True, help="patch shape, e.g. 288,288")
    p.add_argument("--min-overlap", type=int, default=32)
    p.add_argument("--mirrors", choices=("all", "none"), default="all")
    p.add_argument("--models", type=int, default=1)
    p.add_argument("--out", default=None, help="write the plan JSON here")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("consolidate", help="merge raw per-view detections")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("wbc", "nms", "merge2d3d"), required=True)
    p.add_argument("--iou-thresh", type=float, default=0.1)
    p.add_argument("--sigma-patch", type=float, default=None)
    p.add_argument("--expected-views", type=int, default=None)
    p.add_argument("--plan-file", default=None)
    p.add_argument("--slice-gap", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_consolidate)

    p = sub.add_parser("evaluate", help="object-level and patient-level evaluation")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--iou-thresh", type=float, default=0.1)
    p.add_argument("--out", default=None)
    p.add_argument("--curves-out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("anchors", help="pyramid shape and anchor-count report")
    p.add_argument("action", choices=("report",))
    p.add_argument("--image", required=True, help="image shape, e.g. 320,320 or 128,128,64")
    p.add_argument("--levels", default="2,3,4,5")
    p.add_argument("--sizes", default="4,8,16,32")
    p.add_argument("--z-scales", default="1,2,4,8")
    p.add_argument("--ratios", default="1.0")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("loss-eval", help="evaluate the segmentation loss on dense tensors")
    p.add_argument("--probs", required=True, help=".npy/.csv of per-pixel class probabilities")
    p.add_argument("--targets", required=True, help=".npy/.csv one-hot targets (or labels)")
    p.add_argument("--targets-are-labels", action="store_true")
    p.add_argument("--dice-eps", type=float, default=0.0)
    p.add_argument("--grad-out", default=None, help="write the loss gradient to this .npy")
    p.set_defaults(func=cmd_loss_eval)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("BOXFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (io.SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
