"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one [PASS]/[FAIL] line (run with ``pytest -s`` to see them
on success). Reference values come from the independent implementations in
``oracles.py``, never from the code under test.
"""

import json
import time

import numpy as np

from boxforge import cli
from boxforge.anchors import PyramidSpec, decode_deltas, encode_deltas, generate_anchors, level_anchor_count
from boxforge.consolidate import (
    Detection,
    WbcConfig,
    greedy_cluster,
    nms,
    nms_indices,
    slice_merge_groups,
    wbc,
    wbc_coords,
    wbc_score,
)
from boxforge.evaluation import mean_ap
from boxforge.geometry import Box, iou
from boxforge.losses import LossBatch, dice_ce_grad, dice_ce_loss, softmax
from boxforge.tiling import plan
from boxforge.toydata import ScoreModel, generate, rasterize_circle, simulate_predictions

import oracles


def _verdict(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{status}] criterion {num}: {name}{suffix}")
    assert ok, f"criterion {num} failed: {name}{suffix}"


def _random_detections(rng, n, dim=2):
    dets = []
    for _ in range(n):
        lo = rng.uniform(0, 24, size=dim)
        ext = rng.uniform(1, 14, size=dim)
        center = rng.uniform(0, 24, size=dim) if rng.random() < 0.5 else None
        dets.append(
            Detection(
                box=Box(tuple(lo), tuple(lo + ext)),
                class_id=int(rng.integers(1, 3)),
                score=float(rng.uniform(0.01, 1.0)),
                view_id=str(rng.choice(["a", "b", "c", "d"])),
                patch_center=tuple(center) if center is not None else None,
            )
        )
    return dets


def test_criterion_1_wbc_oracle_equivalence():
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    max_score_diff = 0.0
    max_coord_diff = 0.0
    for _ in range(500):
        dets = _random_detections(rng, int(rng.integers(0, 9)))
        cfg = WbcConfig(
            iou_threshold=float(rng.uniform(0.05, 0.7)),
            sigma_patch=float(rng.uniform(5, 80)),
            expected_views=int(rng.integers(1, 6)),
        )
        mine = {}
        for cluster in greedy_cluster(dets, cfg.iou_threshold):
            key = tuple(sorted(dets.index(m) for m in cluster.members))
            mine[key] = (wbc_score(cluster, cfg), wbc_coords(cluster, cfg).coords())
        reference = {
            tuple(members): (score, coords)
            for members, score, coords in oracles.brute_force_wbc(dets, cfg)
        }
        assert set(mine) == set(reference)
        for key, (score, coords) in reference.items():
            max_score_diff = max(max_score_diff, abs(mine[key][0] - score))
            max_coord_diff = max(
                max_coord_diff, max(abs(a - b) for a, b in zip(mine[key][1], coords)) if coords else 0.0
            )
    elapsed = time.perf_counter() - started
    ok = max_score_diff <= 1e-12 and max_coord_diff <= 1e-12 and elapsed < 5.0
    _verdict(
        1,
        "WBC matches the brute-force reference on 500 random instances",
        ok,
        f"max score diff {max_score_diff:.2e}, max coord diff {max_coord_diff:.2e}, {elapsed:.2f}s",
    )


def test_criterion_2_nms_oracle_equivalence():
    rng = np.random.default_rng(202)
    mismatches = 0
    for _ in range(500):
        dets = _random_detections(rng, int(rng.integers(0, 201)))
        thr = float(rng.uniform(0.05, 0.6))
        if nms_indices(dets, thr) != oracles.quadratic_nms(dets, thr):
            mismatches += 1
    _verdict(
        2,
        "NMS survivors identical to the quadratic reference on 500 instances",
        mismatches == 0,
        f"{mismatches} mismatching instances",
    )


def test_criterion_3_dice_ce_gradient_and_minimum():
    rng = np.random.default_rng(303)
    worst_rel = 0.0
    center_diff = 0.0
    for _ in range(100):
        u = softmax(rng.normal(size=(64, 3)))
        labels = rng.integers(0, 3, size=64)
        batch = LossBatch.from_labels(u, labels)
        # the direct-formula oracle must agree where both are defined
        center_diff = max(
            center_diff, abs(dice_ce_loss(batch) - oracles.direct_loss(batch.u, batch.v))
        )
        analytic = dice_ce_grad(batch)
        v = batch.v
        fd = oracles.finite_difference_grad(
            lambda flat: oracles.direct_loss(flat.reshape(64, 3), v), batch.u.ravel(), h=1e-5
        ).reshape(64, 3)
        rel = np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-10)
        worst_rel = max(worst_rel, float(rel.max()))

    v = np.zeros((30, 3))
    v[np.arange(30), np.arange(30) % 3] = 1.0
    perfect = abs(dice_ce_loss(LossBatch(u=v.copy(), v=v)) + 1.0)

    ok = worst_rel <= 1e-5 and perfect <= 1e-12 and center_diff <= 1e-12
    _verdict(
        3,
        "analytic loss gradient matches finite differences; minimum is -1",
        ok,
        f"max rel err {worst_rel:.2e}, |L(perfect)+1| = {perfect:.2e}",
    )


def test_criterion_4_evaluation_oracle():
    rng = np.random.default_rng(404)
    max_diff = 0.0
    checked = 0
    while checked < 100:
        dets, gts = _random_eval_scene(rng)
        thr = float(rng.uniform(0.05, 0.5))
        expected = oracles.direct_eval(dets, gts, thr)
        if not expected or all(v is None for v in expected.values()):
            continue  # nothing evaluable in this draw; redraw
        result = mean_ap(dets, gts, thr)
        checked += 1
        for c, ref in expected.items():
            mine = result.per_class_ap[c]
            if ref is None:
                assert mine is None
            else:
                max_diff = max(max_diff, abs(mine - ref))

    # 1 gt, 2 dets, the false positive ranked first -> AP = 0.5
    gts = [_gt(0, 0, 5, 5)]
    dets = [_det(50, 50, 55, 55, score=0.9), _det(0, 0, 5, 5, score=0.6)]
    half = mean_ap(dets, gts, 0.1).per_class_ap[1]

    # rank invariance under 20 strictly increasing transforms
    dets, gts = _random_eval_scene(rng, n_images=3)
    while not gts:
        dets, gts = _random_eval_scene(rng, n_images=3)
    base = mean_ap(dets, gts, 0.1).map_value
    invariant = True
    for k in range(20):
        g = float(rng.uniform(0.3, 3.0))
        a = float(rng.uniform(0.1, 1.0))
        c = float(rng.uniform(0.2, 1.0))

        def f(s):
            return c * (a * s**g + (1 - a) * s)

        transformed = [
            Detection(
                box=d.box, class_id=d.class_id, score=f(d.score),
                image_id=d.image_id, patient_id=d.patient_id,
            )
            for d in dets
        ]
        if abs(mean_ap(transformed, gts, 0.1).map_value - base) > 1e-12:
            invariant = False

    ok = max_diff <= 1e-12 and abs(half - 0.5) <= 1e-12 and invariant and checked == 100
    _verdict(
        4,
        "mean AP matches the direct PR oracle; AP=0.5 case; rank invariance",
        ok,
        f"max AP diff {max_diff:.2e} over {checked} instances, AP(half case) = {half}",
    )


def _gt(x0, y0, x1, y1, class_id=1, image="im0"):
    from boxforge.evaluation import GroundTruthObject

    return GroundTruthObject(
        box=Box((x0, y0), (x1, y1)),
        class_id=class_id,
        object_id=f"{image}-{x0}-{y0}-{class_id}",
        image_id=image,
        patient_id=image,
    )


def _det(x0, y0, x1, y1, class_id=1, score=0.5, image="im0"):
    return Detection(
        box=Box((x0, y0), (x1, y1)), class_id=class_id, score=score,
        image_id=image, patient_id=image,
    )


def _random_eval_scene(rng, n_images=2):
    gts = []
    dets = []
    for i in range(n_images):
        image = f"im{i}"
        for _ in range(int(rng.integers(0, 4))):
            lo = rng.uniform(0, 30, size=2)
            ext = rng.uniform(3, 12, size=2)
            gts.append(
                _gt(lo[0], lo[1], lo[0] + ext[0], lo[1] + ext[1],
                    class_id=int(rng.integers(1, 3)), image=image)
            )
        for _ in range(int(rng.integers(0, 7))):
            lo = rng.uniform(0, 30, size=2)
            ext = rng.uniform(3, 12, size=2)
            dets.append(
                _det(lo[0], lo[1], lo[0] + ext[0], lo[1] + ext[1],
                     class_id=int(rng.integers(1, 3)),
                     score=float(rng.uniform(0.01, 1.0)), image=image)
            )
    return dets, gts


def test_criterion_5_wbc_vs_nms_directional():
    started = time.perf_counter()
    tiling = plan((320, 320), (320, 320), n_models=5)  # 4 mirrors x 5 models = 20 views
    cfg = WbcConfig(iou_threshold=0.1, sigma_patch=80.0, expected_views=20)
    score_model = ScoreModel()  # true ~0.85, spurious ~0.3

    wins = 0
    suppressed_every_trial = True
    suppression_checked = 0
    for trial in range(100):
        sample = generate("shapes", 1, seed=5000 + trial)[0]
        dets = simulate_predictions(
            [sample], jitter_sigma=2.0, fp_rate=0.1, score_model=score_model,
            plan=tiling, seed=9000 + trial,
        )
        merged = wbc(dets, cfg)
        survivors = nms(dets, 0.1)
        map_wbc = mean_ap(merged, sample.gts, 0.1).map_value
        map_nms = mean_ap(survivors, sample.gts, 0.1).map_value
        if map_wbc >= map_nms - 1e-12:
            wins += 1

        # single-view spurious clusters must score strictly below every
        # consolidated (multi-view) true lesion
        clusters = greedy_cluster(dets, cfg.iou_threshold)
        true_scores = []
        spurious_scores = []
        for cluster in clusters:
            score = wbc_score(cluster, cfg)
            overlaps_gt = any(
                iou(m.box, g.box) >= 0.1 for m in cluster.members for g in sample.gts
            )
            if overlaps_gt and cluster.distinct_views() > 1:
                true_scores.append(score)
            elif not overlaps_gt and cluster.distinct_views() == 1:
                spurious_scores.append(score)
        if spurious_scores and true_scores:
            suppression_checked += 1
            if max(spurious_scores) >= min(true_scores):
                suppressed_every_trial = False

    elapsed = time.perf_counter() - started
    ok = wins >= 80 and suppressed_every_trial and suppression_checked >= 50 and elapsed < 120.0
    _verdict(
        5,
        "WBC beats or ties NMS mAP and suppresses single-view spurious boxes",
        ok,
        f"wbc >= nms in {wins}/100 trials, suppression held in all {suppression_checked} "
        f"trials with spurious boxes, {elapsed:.1f}s",
    )


def test_criterion_6_slice_merge_oracle():
    rng = np.random.default_rng(606)
    grouping_ok = True
    zrange_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 30))
        dets = []
        for _ in range(n):
            lo = rng.uniform(0, 18, size=2)
            ext = rng.uniform(2, 10, size=2)
            dets.append(
                Detection(
                    box=Box(tuple(lo), tuple(lo + ext)),
                    class_id=int(rng.integers(1, 3)),
                    score=float(rng.uniform(0.01, 1.0)),
                    slice_id=int(rng.integers(0, 12)),
                )
            )
        thr = float(rng.uniform(0.05, 0.5))
        groups = slice_merge_groups(dets, thr)
        expected = oracles.slice_merge_oracle(dets, thr)
        if [list(m) for _, m in groups] != [m for m, _, _, _ in expected]:
            grouping_ok = False
            break
        for (cube, members), (_, z_lo, z_hi, _) in zip(groups, expected):
            slices = [dets[i].slice_id for i in members]
            if cube.box.lo[2] != min(slices) or cube.box.hi[2] != max(slices) + 1:
                zrange_ok = False
            if (cube.box.lo[2], cube.box.hi[2]) != (float(z_lo), float(z_hi)):
                zrange_ok = False
    ok = grouping_ok and zrange_ok
    _verdict(
        6,
        "slice-to-cube merge reproduces the reachability oracle on 200 stacks",
        ok,
        f"grouping ok: {grouping_ok}, z-ranges ok: {zrange_ok}",
    )


def test_criterion_7_anchor_arithmetic():
    rng = np.random.default_rng(707)
    count_ok = True

    spec2d = PyramidSpec.default_2d()
    shapes2d = [(288, 288), (320, 320)] + [
        (int(rng.integers(17, 400)), int(rng.integers(17, 400))) for _ in range(18)
    ]
    for shape in shapes2d:
        expected = sum(level_anchor_count(lv, shape, 1) for lv in spec2d.levels)
        if len(generate_anchors(spec2d, shape)) != expected:
            count_ok = False

    spec3d = PyramidSpec.default_3d()
    shapes3d = [(128, 128, 64)] + [
        (int(rng.integers(17, 160)), int(rng.integers(17, 160)), int(rng.integers(9, 70)))
        for _ in range(19)
    ]
    for shape in shapes3d:
        expected = sum(level_anchor_count(lv, shape, 1) for lv in spec3d.levels)
        if len(generate_anchors(spec3d, shape)) != expected:
            count_ok = False

    # the finest/coarsest level arithmetic for the reference configurations
    p2 = next(lv for lv in spec2d.levels if lv.index == 2)
    p5 = next(lv for lv in spec2d.levels if lv.index == 5)
    explicit_ok = (
        level_anchor_count(p2, (288, 288), 1) == 72 * 72
        and level_anchor_count(p5, (320, 320), 1) == 10 * 10
        and level_anchor_count(
            next(lv for lv in spec3d.levels if lv.index == 2), (128, 128, 64), 1
        )
        == 32 * 32 * 64
    )

    worst_rt = 0.0
    for _ in range(10_000):
        dim = int(rng.integers(2, 4))
        a_lo = rng.uniform(-40, 40, size=dim)
        a_ext = rng.uniform(0.5, 30, size=dim)
        g_lo = rng.uniform(-40, 40, size=dim)
        g_ext = rng.uniform(0.5, 30, size=dim)
        anchor = Box(tuple(a_lo), tuple(a_lo + a_ext))
        target = Box(tuple(g_lo), tuple(g_lo + g_ext))
        back = decode_deltas(anchor, encode_deltas(anchor, target))
        worst_rt = max(
            worst_rt, max(abs(a - b) for a, b in zip(back.coords(), target.coords()))
        )

    ok = count_ok and explicit_ok and worst_rt <= 1e-9
    _verdict(
        7,
        "anchor counts match closed form in 2D/3D; delta round-trip within 1e-9",
        ok,
        f"counts ok: {count_ok}, reference shapes ok: {explicit_ok}, worst round-trip {worst_rt:.2e}",
    )


def test_criterion_8_toy_generator():
    # byte-identical double runs
    runs = [generate("shapes", 5, seed=88) for _ in range(2)]
    deterministic = all(
        a.image.tobytes() == b.image.tobytes()
        and a.mask.tobytes() == b.mask.tobytes()
        and a.gts == b.gts
        for a, b in zip(*runs)
    )

    # circle pixel counts against direct enumeration
    counts_ok = True
    for diameter in (4, 19, 20):
        center = (40 + (diameter - 1) / 2, 40 + (diameter - 1) / 2)
        mask = rasterize_circle(center, diameter, (100, 100))
        r2 = (diameter / 2.0) ** 2
        expected = sum(
            1
            for y in range(100)
            for x in range(100)
            if (y - center[0]) ** 2 + (x - center[1]) ** 2 <= r2
        )
        if int(mask.sum()) != expected:
            counts_ok = False

    # shapes vs patterns masks differ exactly at donut holes
    shapes_run = generate("shapes", 5, seed=89)
    patterns_run = generate("patterns", 5, seed=89)
    holes_ok = True
    for sa, sb in zip(shapes_run, patterns_run):
        if not np.array_equal(sa.image, sb.image):
            holes_ok = False
        expected_holes = np.zeros_like(sa.mask, dtype=bool)
        for g in sa.gts:
            if g.class_id == 2:
                center = tuple(lo + (20 - 1) / 2 for lo in g.box.lo)
                expected_holes |= rasterize_circle(center, 4, sa.mask.shape)
        if not np.array_equal(sa.mask != sb.mask, expected_holes):
            holes_ok = False

    # gt boxes are tight around their mask components
    tight_ok = True
    for task in ("shapes", "patterns", "scales"):
        for sample in generate(task, 4, seed=90):
            for g in sample.gts:
                y0, x0 = (int(v) for v in g.box.lo)
                y1, x1 = (int(v) for v in g.box.hi)
                window = sample.mask[y0:y1, x0:x1] == g.class_id
                if not (
                    window[0, :].any()
                    and window[-1, :].any()
                    and window[:, 0].any()
                    and window[:, -1].any()
                ):
                    tight_ok = False

    ok = deterministic and counts_ok and holes_ok and tight_ok
    _verdict(
        8,
        "toy generator: determinism, enumerated circle counts, hole-only mask deltas, tight boxes",
        ok,
        f"deterministic: {deterministic}, counts: {counts_ok}, holes: {holes_ok}, tight: {tight_ok}",
    )


def test_criterion_9_end_to_end_closure(tmp_path):
    toy = tmp_path / "toy"
    assert cli.main(["gen-toy", "--task", "shapes", "--n", "3", "--seed", "42", "--out-dir", str(toy)]) == 0
    raw = tmp_path / "raw.json"
    assert cli.main([
        "simulate", "--gts", str(toy / "ground_truth.json"), "--out", str(raw),
        "--seed", "0", "--jitter", "0", "--fp-rate", "0", "--perfect-scores", "--models", "5",
    ]) == 0
    merged = tmp_path / "wbc.json"
    assert cli.main([
        "consolidate", "--in", str(raw), "--out", str(merged), "--mode", "wbc",
        "--iou-thresh", "0.1", "--expected-views", "20",
    ]) == 0
    result_path = tmp_path / "result.json"
    assert cli.main([
        "evaluate", "--dets", str(merged), "--gts", str(toy / "ground_truth.json"),
        "--iou-thresh", "0.1", "--out", str(result_path),
    ]) == 0
    result = json.loads(result_path.read_text())
    ok = result["map"] == 1.0
    _verdict(
        9,
        "noise-free generate -> simulate -> consolidate -> evaluate closes at mAP exactly 1.0",
        ok,
        f"map = {result['map']}",
    )
