"""Geometry suite: warping against a rational-arithmetic oracle, sampling,
weighted DLT, RANSAC, and the registration metrics."""
import numpy as np
import pytest
from fractions import Fraction

from hypothesis import given, settings, strategies as st

from vesselreg.geometry import (
    Correspondences,
    DegeneratePointError,
    EstimationError,
    GeometryError,
    Homography,
    HomographySampleConfig,
    crop_adjust_homography,
    control_point_errors,
    dice_score,
    estimate_homography_dlt,
    estimate_homography_ransac,
    image_corners,
    mean_homography_error,
    sample_homography,
    success_rate,
    warp_points,
)


def random_homography(rng: np.random.Generator, scale: float = 0.1) -> Homography:
    """A well-conditioned random homography: identity plus bounded noise."""
    m = np.eye(3) + scale * rng.uniform(-1, 1, size=(3, 3))
    m[2, :2] *= 0.001  # keep the horizon far away
    return Homography(m)


def exact_correspondences(h: Homography, n: int, rng: np.random.Generator,
                          extent: float = 100.0) -> Correspondences:
    src = rng.uniform(0, extent, size=(n, 2))
    return Correspondences.uniform(src, warp_points(src, h))


class TestWarpPoints:
    def test_identity(self):
        out = warp_points(np.array([[10.0, 20.0]]), Homography.identity())
        np.testing.assert_allclose(out, [[10.0, 20.0]])

    def test_translation(self):
        out = warp_points(np.array([[0.0, 0.0]]), Homography.translation(3, -2))
        np.testing.assert_allclose(out, [[3.0, -2.0]])

    def test_rational_oracle_on_grid(self):
        # exact projective arithmetic with Fractions as the oracle
        m = [[Fraction(7, 5), Fraction(-1, 3), Fraction(2, 1)],
             [Fraction(1, 4), Fraction(9, 8), Fraction(-3, 2)],
             [Fraction(1, 1000), Fraction(-1, 2000), Fraction(1, 1)]]
        h = Homography(np.array([[float(v) for v in row] for row in m]))
        pts = [(x, y) for x in range(5) for y in range(5)]
        expected = []
        for x, y in pts:
            w = m[2][0] * x + m[2][1] * y + m[2][2]
            expected.append([float((m[0][0] * x + m[0][1] * y + m[0][2]) / w),
                             float((m[1][0] * x + m[1][1] * y + m[1][2]) / w)])
        got = warp_points(np.array(pts, dtype=float), h)
        assert np.max(np.abs(got - np.array(expected))) < 1e-9

    def test_degenerate_point_reports_index(self):
        h = Homography(np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 1.0]]))
        with pytest.raises(DegeneratePointError) as exc:
            warp_points(np.array([[0.5, 0.0], [1.0, 0.0]]), h)
        assert exc.value.index == 1

    def test_empty_input(self):
        assert warp_points(np.zeros((0, 2)), Homography.identity()).shape == (0, 2)

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            h = random_homography(rng)
            pts = rng.uniform(-50, 150, size=(20, 2))
            back = warp_points(warp_points(pts, h), h.inverse())
            assert np.max(np.abs(back - pts)) < 1e-9


class TestHomographyType:
    def test_scale_normalized(self):
        h = Homography(2.0 * np.eye(3))
        assert h.matrix[2, 2] == 1.0
        np.testing.assert_allclose(h.matrix, np.eye(3))

    def test_singular_rejected(self):
        with pytest.raises(GeometryError):
            Homography(np.zeros((3, 3)))

    def test_json_round_trip(self, tmp_path):
        h = random_homography(np.random.default_rng(3))
        p = tmp_path / "h.json"
        h.save(p)
        h2 = Homography.load(p)
        np.testing.assert_allclose(h2.matrix, h.matrix)

    def test_json_convention_checked(self):
        with pytest.raises(GeometryError):
            Homography.from_json_dict({"matrix": list(range(9)), "convention": "rc"})


class TestSampleHomography:
    def test_zero_ranges_identity(self):
        cfg = HomographySampleConfig(max_corner_displacement=0, rotation_range_deg=0,
                                     scale_range=(1.0, 1.0), translation_range=0)
        h = sample_homography(cfg, (384, 384), np.random.default_rng(0))
        np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-9)

    def test_determinism(self):
        cfg = HomographySampleConfig()
        h1 = sample_homography(cfg, (384, 384), np.random.default_rng(42))
        h2 = sample_homography(cfg, (384, 384), np.random.default_rng(42))
        assert np.array_equal(h1.matrix, h2.matrix)

    def test_corner_displacement_bound(self):
        # displacement-only config: every warped corner stays within the radius
        cfg = HomographySampleConfig(max_corner_displacement=0.1, rotation_range_deg=0,
                                     scale_range=(1.0, 1.0), translation_range=0)
        rng = np.random.default_rng(1)
        corners = image_corners((384, 384))
        for _ in range(1000):
            h = sample_homography(cfg, (384, 384), rng)
            d = np.linalg.norm(warp_points(corners, h) - corners, axis=1)
            assert np.all(d <= 38.4 + 1e-6)

    def test_invalid_config(self):
        with pytest.raises(GeometryError):
            HomographySampleConfig(max_corner_displacement=-0.1)
        with pytest.raises(GeometryError):
            HomographySampleConfig(scale_range=(0.0, 1.0))


class TestCropAdjust:
    def test_identity_equal_offsets(self):
        h = crop_adjust_homography(Homography.identity(), (50, 50), (50, 50))
        np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-12)

    def test_translation_composition(self):
        h = crop_adjust_homography(Homography.translation(5, 0), (10, 0), (0, 0))
        np.testing.assert_allclose(h.matrix, Homography.translation(15, 0).matrix,
                                   atol=1e-12)

    def test_pointwise_consistency(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            h = random_homography(rng)
            off_a = rng.uniform(0, 100, size=2)
            off_b = rng.uniform(0, 100, size=2)
            hc = crop_adjust_homography(h, tuple(off_a), tuple(off_b))
            pts_local = rng.uniform(0, 50, size=(10, 2))
            direct = warp_points(pts_local, hc)
            via_global = warp_points(pts_local + off_a, h) - off_b
            assert np.max(np.abs(direct - via_global)) < 1e-9


class TestDlt:
    def test_identity_square(self):
        corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
        h = estimate_homography_dlt(Correspondences.uniform(corners, corners))
        err = np.linalg.norm(warp_points(corners, h) - corners, axis=1)
        assert err.max() < 1e-9

    def test_generate_and_recover(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            h_true = random_homography(rng)
            c = exact_correspondences(h_true, 20, rng)
            h = estimate_homography_dlt(c)
            corners = image_corners((100, 100))
            err = np.linalg.norm(warp_points(corners, h) - warp_points(corners, h_true),
                                 axis=1)
            assert err.max() < 1e-6

    def test_zero_weight_outliers_excluded(self):
        rng = np.random.default_rng(6)
        h_true = random_homography(rng)
        src = rng.uniform(0, 100, size=(12, 2))
        dst = warp_points(src, h_true)
        dst[8:] += 50.0  # gross outliers
        w = np.ones(12)
        w[8:] = 0.0
        h = estimate_homography_dlt(Correspondences(src, dst, w))
        corners = image_corners((100, 100))
        err = np.linalg.norm(warp_points(corners, h) - warp_points(corners, h_true), axis=1)
        assert err.max() < 1e-6

    def test_weight_doubling_equals_duplication(self):
        rng = np.random.default_rng(8)
        h_true = random_homography(rng)
        src = rng.uniform(0, 100, size=(8, 2))
        dst = warp_points(src, h_true) + rng.normal(0, 0.5, size=(8, 2))
        w = np.ones(8)
        w_doubled = w.copy()
        w_doubled[3] = 2.0
        h_weighted = estimate_homography_dlt(Correspondences(src, dst, w_doubled))
        src_dup = np.vstack([src, src[3:4]])
        dst_dup = np.vstack([dst, dst[3:4]])
        h_dup = estimate_homography_dlt(Correspondences.uniform(src_dup, dst_dup))
        assert np.max(np.abs(h_weighted.matrix - h_dup.matrix)) < 1e-9

    def test_scale_invariance_of_inputs(self):
        rng = np.random.default_rng(9)
        h_true = random_homography(rng)
        c = exact_correspondences(h_true, 10, rng)
        h1 = estimate_homography_dlt(c)
        h2 = estimate_homography_dlt(Correspondences(c.src, c.dst, c.weights * 7.3))
        assert np.max(np.abs(h1.matrix - h2.matrix)) < 1e-9

    def test_too_few_points(self):
        pts = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
        with pytest.raises(EstimationError):
            estimate_homography_dlt(Correspondences.uniform(pts, pts))

    def test_too_few_usable_points(self):
        pts = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [2, 2]], dtype=float)
        w = np.array([1, 1, 1, 0, 0], dtype=float)
        with pytest.raises(EstimationError):
            estimate_homography_dlt(Correspondences(pts, pts, w))

    def test_collinear_points_rejected(self):
        src = np.array([[0, 0], [1, 1], [2, 2], [3, 3], [4, 4]], dtype=float)
        with pytest.raises(EstimationError):
            estimate_homography_dlt(Correspondences.uniform(src, src))


class TestRansac:
    def test_exact_recovery_all_inliers(self):
        rng = np.random.default_rng(12)
        h_true = random_homography(rng)
        c = exact_correspondences(h_true, 20, rng)
        h, mask = estimate_homography_ransac(c, reproj_threshold=5, max_iters=200,
                                             rng=np.random.default_rng(0))
        assert mask.all()
        corners = image_corners((100, 100))
        err = np.linalg.norm(warp_points(corners, h) - warp_points(corners, h_true), axis=1)
        assert err.max() < 1e-6

    def test_planted_outliers_excluded(self):
        rng = np.random.default_rng(13)
        h_true = random_homography(rng)
        src = rng.uniform(0, 100, size=(20, 2))
        dst = warp_points(src, h_true)
        dst[16:] += 50.0
        c = Correspondences.uniform(src, dst)
        _, mask = estimate_homography_ransac(c, reproj_threshold=5, max_iters=500,
                                             rng=np.random.default_rng(1))
        assert mask[:16].all() and not mask[16:].any()

    def test_too_few(self):
        pts = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
        with pytest.raises(EstimationError):
            estimate_homography_ransac(Correspondences.uniform(pts, pts))

    def test_determinism(self):
        rng = np.random.default_rng(14)
        h_true = random_homography(rng)
        src = rng.uniform(0, 100, size=(30, 2))
        dst = warp_points(src, h_true) + rng.normal(0, 1.0, size=(30, 2))
        c = Correspondences.uniform(src, dst)
        h1, m1 = estimate_homography_ransac(c, rng=np.random.default_rng(7))
        h2, m2 = estimate_homography_ransac(c, rng=np.random.default_rng(7))
        assert np.array_equal(h1.matrix, h2.matrix) and np.array_equal(m1, m2)


class TestMetrics:
    def test_mhe_zero_on_equal(self):
        h = random_homography(np.random.default_rng(20))
        assert mean_homography_error(h, h, (384, 384)) == 0.0

    def test_mhe_translation_exactly_one(self):
        h = random_homography(np.random.default_rng(21))
        shifted = Homography.translation(1, 0) @ h
        assert mean_homography_error(shifted, h, (256, 256)) == pytest.approx(1.0, abs=1e-12)

    def test_mhe_recomputation_oracle_and_symmetry(self):
        rng = np.random.default_rng(22)
        h1, h2 = random_homography(rng), random_homography(rng)
        size = (311, 207)
        manual = np.mean([np.linalg.norm(warp_points(np.array([c]), h1)[0]
                                         - warp_points(np.array([c]), h2)[0])
                          for c in image_corners(size)])
        assert abs(mean_homography_error(h1, h2, size) - manual) < 1e-12
        assert mean_homography_error(h1, h2, size) == pytest.approx(
            mean_homography_error(h2, h1, size), abs=1e-12)

    def test_control_points_perfect(self):
        rng = np.random.default_rng(23)
        h = random_homography(rng)
        src = rng.uniform(0, 100, size=(6, 2))
        me, mae = control_point_errors(h, src, warp_points(src, h))
        assert me < 1e-9 and mae < 1e-9

    def test_control_points_345(self):
        src = np.random.default_rng(24).uniform(0, 50, size=(6, 2))
        me, mae = control_point_errors(Homography.identity(), src, src + [3.0, 4.0])
        assert me == pytest.approx(5.0, abs=1e-12)
        assert mae == pytest.approx(5.0, abs=1e-12)

    def test_control_points_recomputation(self):
        rng = np.random.default_rng(25)
        h = random_homography(rng)
        src = rng.uniform(0, 100, size=(6, 2))
        dst = rng.uniform(0, 100, size=(6, 2))
        d = [np.linalg.norm(warp_points(src[i:i + 1], h)[0] - dst[i]) for i in range(6)]
        me, mae = control_point_errors(h, src, dst)
        assert abs(me - np.mean(d)) < 1e-12 and abs(mae - np.max(d)) < 1e-12

    def test_control_points_empty(self):
        with pytest.raises(GeometryError):
            control_point_errors(Homography.identity(), np.zeros((0, 2)), np.zeros((0, 2)))

    def test_success_rate_basic(self):
        assert success_rate([0.5, 1.5, 3.0], 2.0) == pytest.approx(2 / 3)
        assert success_rate([np.inf, np.inf], 100.0) == 0.0

    @given(st.lists(st.floats(min_value=0, max_value=100), min_size=1, max_size=30),
           st.floats(min_value=0, max_value=50), st.floats(min_value=0, max_value=50))
    def test_success_rate_monotone(self, errors, e1, e2):
        lo, hi = min(e1, e2), max(e1, e2)
        assert success_rate(errors, lo) <= success_rate(errors, hi)

    def test_dice_cases(self):
        a = np.zeros((10, 10), bool)
        a[:5] = True
        assert dice_score(a, a) == 1.0
        assert dice_score(a, ~a) == 0.0
        b = np.zeros((20, 10), bool)
        c = np.zeros((20, 10), bool)
        b.ravel()[:100] = True
        c.ravel()[50:150] = True
        assert dice_score(b, c) == pytest.approx(0.5)
        assert dice_score(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0

    def test_dice_shape_mismatch(self):
        with pytest.raises(GeometryError):
            dice_score(np.zeros((4, 4), bool), np.zeros((4, 5), bool))

    @given(st.integers(0, 2 ** 16 - 1))
    @settings(max_examples=30, deadline=None)
    def test_dice_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(8, 8)) > 0.5
        b = rng.uniform(size=(8, 8)) > 0.5
        d = dice_score(a, b)
        assert 0.0 <= d <= 1.0
        assert d == dice_score(b, a)


class TestScaleInvariance:
    def test_metrics_invariant_to_matrix_scale(self):
        rng = np.random.default_rng(30)
        h1, h2 = random_homography(rng), random_homography(rng)
        h1s = Homography(h1.matrix * -3.7)  # renormalized on construction
        assert abs(mean_homography_error(h1, h2, (100, 100))
                   - mean_homography_error(h1s, h2, (100, 100))) < 1e-9
