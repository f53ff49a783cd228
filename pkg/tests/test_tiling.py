import numpy as np
import pytest

from boxforge.consolidate import Detection
from boxforge.geometry import Box
from boxforge.tiling import (
    TilingPlan,
    all_mirror_sets,
    expected_views,
    map_boxes,
    plan,
)


class TestPlan:
    def test_patch_equals_image(self):
        p = plan((320, 320), (320, 320))
        assert p.origins == ((0, 0),)

    def test_two_by_two_grid(self):
        p = plan((320, 320), (288, 288), min_overlap=32)
        assert len(p.origins) == 4
        per_axis = sorted({o[0] for o in p.origins})
        assert per_axis == [0, 32]

    def test_last_patch_flush_with_boundary(self):
        p = plan((500, 300), (128, 128), min_overlap=16)
        for axis in range(2):
            assert max(o[axis] for o in p.origins) == (500, 300)[axis] - 128

    def test_patch_larger_than_image_is_centered(self):
        p = plan((100, 100), (128, 128))
        assert p.origins == ((-14, -14),)

    def test_min_overlap_respected(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            image = int(rng.integers(64, 800))
            patch = int(rng.integers(32, min(image, 256) + 1))
            overlap = int(rng.integers(0, patch // 2))
            p = plan((image, image), (patch, patch), min_overlap=overlap)
            xs = sorted({o[0] for o in p.origins})
            for a, b in zip(xs, xs[1:]):
                assert patch - (b - a) >= overlap

    def test_coverage(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            image = (int(rng.integers(40, 400)), int(rng.integers(40, 400)))
            patch = (
                int(rng.integers(16, image[0] + 40)),
                int(rng.integers(16, image[1] + 40)),
            )
            overlap = int(rng.integers(0, max(min(patch) // 2, 1)))
            p = plan(image, patch, min_overlap=overlap)
            for axis in range(2):
                covered = np.zeros(image[axis], dtype=bool)
                for origin in p.origins:
                    lo = max(origin[axis], 0)
                    hi = min(origin[axis] + patch[axis], image[axis])
                    covered[lo:hi] = True
                assert covered.all()

    def test_determinism(self):
        a = plan((511, 333), (128, 128), min_overlap=20, n_models=3)
        b = plan((511, 333), (128, 128), min_overlap=20, n_models=3)
        assert a == b

    def test_overlap_larger_than_patch_rejected(self):
        with pytest.raises(ValueError):
            plan((320, 320), (64, 64), min_overlap=64)

    def test_mirror_defaults(self):
        assert len(all_mirror_sets(2)) == 4
        assert len(all_mirror_sets(3)) == 8
        assert plan((64, 64), (32, 32), min_overlap=8).mirror_axes_sets == all_mirror_sets(2)


class TestExpectedViews:
    def test_single_patch_four_mirrors_five_models(self):
        p = plan((320, 320), (320, 320), n_models=5)
        assert expected_views(p, (160, 160)) == 20

    def test_non_overlap_region_counts_one(self):
        p = plan((320, 320), (288, 288), min_overlap=32, mirror_axes_sets=[()], n_models=1)
        assert expected_views(p, (10, 10)) == 1

    def test_overlap_region_multiplies(self):
        p = plan((320, 320), (288, 288), min_overlap=32, n_models=5)
        corner = expected_views(p, (10, 10))
        middle = expected_views(p, (160, 160))  # inside all four patches
        assert middle == 4 * corner

    def test_position_outside_rejected(self):
        p = plan((320, 320), (320, 320))
        with pytest.raises(ValueError):
            expected_views(p, (320, 10))
        with pytest.raises(ValueError):
            expected_views(p, (-1, 10))

    def test_lower_bound_everywhere(self):
        rng = np.random.default_rng(2)
        p = plan((200, 150), (96, 80), min_overlap=16, n_models=2)
        floor = len(p.mirror_axes_sets) * p.n_models
        for _ in range(300):
            pos = (float(rng.uniform(0, 200)), float(rng.uniform(0, 150)))
            assert expected_views(p, pos) >= floor

    def test_constant_within_arrangement_cell(self):
        p = plan((320, 320), (288, 288), min_overlap=32, n_models=1)
        # all positions strictly inside (32, 288) x (32, 288) see all 4 patches
        rng = np.random.default_rng(3)
        values = {
            expected_views(p, (float(rng.uniform(33, 287)), float(rng.uniform(33, 287))))
            for _ in range(50)
        }
        assert len(values) == 1


class TestMapBoxes:
    def _det(self, box, **kw):
        return Detection(box=box, class_id=1, score=0.5, **kw)

    def test_identity_view_translates_only(self):
        d = self._det(Box((1, 2), (5, 9)))
        out = map_boxes([d], origin=(100, 50), patch_shape=(64, 64))
        assert out[0].box == Box((101, 52), (105, 59))
        assert out[0].patch_center == (132.0, 82.0)

    def test_flip_axis_reflects_edges(self):
        d = self._det(Box((0, 10), (4, 20)))
        out = map_boxes([d], origin=(0, 0), patch_shape=(64, 64), mirror_axes=(1,))
        assert out[0].box == Box((0, 44), (4, 54))

    def test_double_map_is_identity_for_all_mirror_sets(self):
        rng = np.random.default_rng(4)
        for dim in (2, 3):
            patch = (64,) * dim
            for axes in all_mirror_sets(dim):
                for _ in range(20):
                    lo = rng.uniform(0, 40, size=dim)
                    ext = rng.uniform(1, 20, size=dim)
                    d = self._det(Box(tuple(lo), tuple(lo + ext)))
                    once = map_boxes([d], (0,) * dim, patch, axes)
                    twice = map_boxes(once, (0,) * dim, patch, axes)
                    assert np.allclose(twice[0].box.coords(), d.box.coords(), atol=1e-12)

    def test_measure_preserved(self):
        rng = np.random.default_rng(5)
        for axes in all_mirror_sets(2):
            lo = rng.uniform(0, 40, size=2)
            ext = rng.uniform(1, 20, size=2)
            d = self._det(Box(tuple(lo), tuple(lo + ext)))
            out = map_boxes([d], (13, 27), (64, 64), axes)
            assert out[0].box.measure() == pytest.approx(d.box.measure(), rel=1e-12)


class TestPlanSerialization:
    def test_round_trip(self):
        p = plan((320, 320), (288, 288), min_overlap=32, n_models=5)
        assert TilingPlan.from_json_dict(p.to_json_dict()) == p

    def test_views_enumeration(self):
        p = plan((320, 320), (320, 320), n_models=2)
        views = list(p.views())
        assert len(views) == 4 * 2
        assert len({v.view_id for v in views}) == len(views)
