"""Metric tests: alignment oracles, score recomputation, coherence, export."""

import math

import numpy as np
import pytest

from jointdiff.metrics import (
    DepthAlignment,
    abs_rel,
    align_scale_shift,
    disparity_to_depth,
    panorama_to_points,
    rmse_disparity,
    tile_coherence,
    write_ply,
)


def full_solve_oracle(pred, gt):
    """Closed-form scale/shift on the full pixel set via library lstsq."""
    p, g = pred.ravel(), gt.ravel()
    design = np.stack([p, np.ones_like(p)], axis=1)
    sol = np.linalg.lstsq(design, g, rcond=None)[0]
    return float(sol[0]), float(sol[1])


class TestAlignment:
    def test_identity_is_exact(self):
        g = np.random.default_rng(1).uniform(0.2, 2.0, (16, 16))
        a = align_scale_shift(g, g, rng=np.random.default_rng(0))
        assert a.scale == 1.0
        assert a.shift == 0.0

    def test_affine_map_matches_full_solve_oracle(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(0.2, 2.0, (32, 32))
        pred = 2.0 * gt + 3.0
        a = align_scale_shift(pred, gt, rng=np.random.default_rng(0))
        s, t = full_solve_oracle(pred, gt)
        assert abs(a.scale - s) < 1e-9 and abs(a.shift - t) < 1e-9
        assert abs(a.scale - 0.5) < 1e-9 and abs(a.shift + 1.5) < 1e-9

    def test_validity_requires_both_positive_and_mask(self):
        pred = np.array([1.0, -1.0, 2.0, 3.0, 4.0, 5.0])
        gt = np.array([1.0, 1.0, -2.0, 3.0, 4.0, 5.0])
        mask = np.array([1.0, 1, 1, 0, 1, 1])
        a = align_scale_shift(pred, gt, valid_mask=mask, rng=np.random.default_rng(0))
        assert a.n_valid == 3  # indices 0, 4, 5

    def test_too_few_valid_pixels_rejected(self):
        with pytest.raises(ValueError, match="valid"):
            align_scale_shift(np.array([1.0, -1.0]), np.array([1.0, 1.0]))

    def test_constant_prediction_all_solves_degenerate(self):
        pred = np.full(50, 2.0)
        gt = np.linspace(0.5, 1.5, 50)
        with pytest.raises(ValueError, match="degenerate"):
            align_scale_shift(pred, gt, rng=np.random.default_rng(0))

    def test_median_of_subsets_beats_full_solve_under_outliers(self):
        data_rng = np.random.default_rng(77)
        gt = data_rng.uniform(0.5, 2.0, (10, 10))
        pred = gt.copy()
        pred.ravel()[data_rng.choice(100, 5, replace=False)] += 100.0
        s, t = full_solve_oracle(pred, gt)
        a = align_scale_shift(pred, gt, rng=np.random.default_rng(4))
        err_full = abs(s - 1.0) + abs(t)
        err_median = abs(a.scale - 1.0) + abs(a.shift)
        assert err_median < err_full

    def test_affine_equivariance_of_aligned_metrics(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(0.3, 1.5, (24, 24))
        pred = gt + rng.normal(0, 0.05, gt.shape)
        pred = np.abs(pred) + 0.05
        sa, sb = 2.5, 0.7
        a = align_scale_shift(pred, gt, rng=np.random.default_rng(0))
        b = align_scale_shift(sa * pred + sb, gt, rng=np.random.default_rng(0))
        assert abs(b.scale - a.scale / sa) < 1e-9
        aligned_a = a.scale * pred + a.shift
        aligned_b = b.scale * (sa * pred + sb) + b.shift
        assert abs(rmse_disparity(aligned_a, gt) - rmse_disparity(aligned_b, gt)) < 1e-9
        da = disparity_to_depth(np.abs(aligned_a) + 0.1)
        db = disparity_to_depth(np.abs(aligned_b) + 0.1)
        assert abs(abs_rel(da, disparity_to_depth(gt)) - abs_rel(db, disparity_to_depth(gt))) < 1e-9

    def test_reported_fields(self):
        rng = np.random.default_rng(4)
        gt = rng.uniform(0.2, 2.0, (16, 16))
        a = align_scale_shift(gt + 0.1, gt, rng=np.random.default_rng(0))
        assert isinstance(a, DepthAlignment)
        assert a.n_valid == 256
        assert a.n_solves == len(a.solves) == 8
        scales = sorted(s for s, _ in a.solves)
        assert abs(np.median(scales) - a.scale) < 1e-15


class TestDepthMetrics:
    def test_perfect_prediction_scores_zero(self):
        g = np.random.default_rng(5).uniform(0.5, 3.0, (8, 8))
        assert abs_rel(g, g) == 0.0
        assert rmse_disparity(g, g) == 0.0

    def test_absrel_ten_percent_exact(self):
        g = np.random.default_rng(6).uniform(0.5, 3.0, (8, 8))
        assert abs(abs_rel(1.1 * g, g) - 0.1) < 1e-12

    def test_matches_reordered_sum_oracle(self):
        rng = np.random.default_rng(7)
        g = rng.uniform(0.5, 3.0, 500)
        p = g + rng.normal(0, 0.2, 500)
        want_absrel = math.fsum(abs(pi - gi) / gi for pi, gi in zip(p, g)) / len(g)
        assert abs(abs_rel(p, g) - want_absrel) < 1e-9
        want_rmse = math.sqrt(math.fsum((pi - gi) ** 2 for pi, gi in zip(p, g)) / len(g))
        assert abs(rmse_disparity(p, g) - want_rmse) < 1e-9

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        g = rng.uniform(0.5, 3.0, 300)
        p = g + rng.normal(0, 0.1, 300)
        perm = rng.permutation(300)
        assert abs(abs_rel(p, g) - abs_rel(p[perm], g[perm])) < 1e-12
        assert abs(rmse_disparity(p, g) - rmse_disparity(p[perm], g[perm])) < 1e-12

    def test_valid_mask_selects_pixels(self):
        g = np.array([1.0, 2.0, 4.0])
        p = np.array([1.1, 2.0, 8.0])
        m = np.array([1.0, 1.0, 0.0])
        assert abs(abs_rel(p, g, m) - 0.05) < 1e-12

    def test_error_paths(self):
        g = np.ones(4)
        with pytest.raises(ValueError, match="valid"):
            abs_rel(g, g, np.zeros(4))
        with pytest.raises(ValueError, match="positive"):
            abs_rel(g, -g)
        with pytest.raises(ValueError, match="shapes"):
            rmse_disparity(np.ones(3), np.ones(4))

    def test_disparity_floor(self):
        d = disparity_to_depth(np.array([0.0, -1.0, 0.5]))
        assert d[0] == d[1] == 1e6
        assert d[2] == 2.0


class TestTileCoherence:
    def test_constant_panorama_scores_zero(self):
        assert tile_coherence(np.full((3, 32, 128), 0.3)) == 0.0

    def test_identical_tiles_score_zero(self):
        tile = np.random.default_rng(9).uniform(-1, 1, (3, 32, 32))
        pano = np.concatenate([tile] * 4, axis=2)
        assert tile_coherence(pano) == 0.0

    def test_two_constant_values_closed_form(self):
        a, b = 0.2, -0.5
        tiles = [np.full((3, 32, 32), v) for v in (a, a, b, b)]
        pano = np.concatenate(tiles, axis=2)
        # cross pairs (4 of 6) differ only in channel means: L2 = sqrt(3)*|a-b|
        want = (4 / 6) * math.sqrt(3.0) * abs(a - b)
        assert abs(tile_coherence(pano) - want) < 1e-12

    def test_symmetric_under_tile_reordering(self):
        rng = np.random.default_rng(10)
        tiles = [rng.uniform(-1, 1, (3, 32, 32)) for _ in range(4)]
        p1 = np.concatenate(tiles, axis=2)
        p2 = np.concatenate([tiles[2], tiles[0], tiles[3], tiles[1]], axis=2)
        assert abs(tile_coherence(p1) - tile_coherence(p2)) < 1e-12

    def test_invariant_to_global_offset(self):
        rng = np.random.default_rng(11)
        pano = rng.uniform(-0.5, 0.5, (3, 32, 128))
        assert abs(tile_coherence(pano) - tile_coherence(pano + 0.31)) < 1e-12

    def test_argument_validation(self):
        with pytest.raises(ValueError, match="divisible"):
            tile_coherence(np.zeros((3, 32, 127)))
        with pytest.raises(ValueError, match="tiles"):
            tile_coherence(np.zeros((3, 32, 128)), n_tiles=1)
        with pytest.raises(ValueError, match="C,H,W"):
            tile_coherence(np.zeros((32, 128)))


class TestPanoramaPoints:
    def test_constant_depth_lies_on_cylinder(self):
        rgb = np.zeros((3, 8, 64))
        pts = panorama_to_points(rgb, np.full((8, 64), 2.5))
        radius = np.hypot(pts[:, 0], pts[:, 2])
        assert np.abs(radius - 2.5).max() < 1e-6

    def test_center_column_has_zero_x(self):
        depth = np.zeros((8, 64))
        depth[:, 32] = 3.0  # only the theta=0 column contributes
        pts = panorama_to_points(np.zeros((3, 8, 64)), depth)
        assert len(pts) == 8
        assert np.all(pts[:, 0] == 0.0)

    def test_round_trip_recovers_pixel_and_depth(self):
        rng = np.random.default_rng(12)
        h, w, fov = 8, 16, np.radians(180.0)
        depth = rng.uniform(1.0, 5.0, (h, w))
        pts = panorama_to_points(rng.uniform(-1, 1, (3, h, w)), depth)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        d = np.hypot(x, z)
        u = (np.arctan2(x, z) / fov + 0.5) * w
        v = y / (d * fov / w) + h / 2.0
        uu, vv = np.meshgrid(np.arange(w), np.arange(h))
        assert np.abs(d - depth.ravel()).max() < 1e-5
        assert np.abs(u - uu.ravel()).max() < 1e-5
        assert np.abs(v - vv.ravel()).max() < 1e-5

    def test_nonpositive_depth_skipped(self):
        depth = np.array([[1.0, 0.0], [-2.0, 3.0]])
        pts = panorama_to_points(np.zeros((3, 2, 2)), depth)
        assert len(pts) == 2

    def test_colors_mapped_to_bytes(self):
        rgb = np.full((3, 2, 2), 1.0)
        pts = panorama_to_points(rgb, np.ones((2, 2)))
        assert np.all(pts[:, 3:] == 255)


class TestPlyExport:
    def test_written_file_parses_back(self, tmp_path):
        pts = np.array([[1.0, 2.0, 3.0, 10, 20, 30], [-1.5, 0.0, 2.25, 0, 255, 128]])
        path = tmp_path / "cloud.ply"
        write_ply(pts, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "ply"
        assert "element vertex 2" in lines
        assert lines[lines.index("end_header") + 1].split() == [
            "1.000000", "2.000000", "3.000000", "10", "20", "30",
        ]
        assert len(lines) == lines.index("end_header") + 3
