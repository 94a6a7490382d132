import numpy as np
import pytest
from hypothesis import given, strategies as st

from warpforge.errors import (ContractViolation, NoModelError, PointAtInfinityError,
                              SingularSystemError)
from warpforge.homography import (Correspondences, FourPtOffsets, apply_homography,
                                  decompose_middle_plane, frame_corners, homography_to_flow,
                                  homography_to_offsets, normalize, offsets_to_homography,
                                  ransac_fit, solve_dlt)

W, H = 320, 240


def random_h(rng, scale=0.05):
    o = rng.uniform(-1, 1, (4, 2)) * scale * np.array([W, H])
    return offsets_to_homography(FourPtOffsets(o, W, H))


def relerr(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_identity_from_fixed_corners():
    c = frame_corners(W, H)
    np.testing.assert_allclose(solve_dlt(Correspondences(c, c)), np.eye(3), atol=1e-12)


def test_translation_of_unit_square():
    sq = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    h = solve_dlt(Correspondences(sq, sq + [5, 0]))
    np.testing.assert_allclose(h, [[1, 0, 5], [0, 1, 0], [0, 0, 1]], atol=1e-12)


def test_recovers_known_h_from_eight_points(rng):
    for _ in range(20):
        h = random_h(rng)
        pts = rng.uniform(0, [W, H], (8, 2))
        est = solve_dlt(Correspondences(pts, apply_homography(h, pts)))
        assert relerr(est, h) < 1e-8


def test_least_squares_matches_reference_dlt(rng):
    from skimage.transform import ProjectiveTransform
    h = random_h(rng)
    pts = rng.uniform(0, [W, H], (30, 2))
    tgt = apply_homography(h, pts) + rng.normal(0, 0.5, (30, 2))
    est = solve_dlt(Correspondences(pts, tgt))
    ref = ProjectiveTransform()
    assert ref.estimate(pts, tgt)
    assert relerr(est, normalize(ref.params)) < 1e-8


def test_collinear_points_are_singular():
    pts = np.array([[0, 0], [1, 1], [2, 2], [5, 0]], dtype=float)
    with pytest.raises(SingularSystemError):
        solve_dlt(Correspondences(pts, pts))


def test_too_few_points():
    pts = np.zeros((3, 2))
    with pytest.raises(ContractViolation):
        solve_dlt(Correspondences(pts, pts))


def test_ransac_outlier_free_keeps_everything(rng):
    h = random_h(rng)
    pts = rng.uniform(0, [W, H], (25, 2))
    c = Correspondences(pts, apply_homography(h, pts))
    est, inl = ransac_fit(c, seed=3)
    assert np.array_equal(inl, np.arange(25))
    np.testing.assert_allclose(est, solve_dlt(c), rtol=0, atol=1e-12)


def test_ransac_rejects_outliers(rng):
    h = random_h(rng)
    pts = rng.uniform(0, [W, H], (20, 2))
    good = apply_homography(h, pts)
    bad_src = rng.uniform(0, [W, H], (10, 2))
    bad_dst = rng.uniform(0, [W, H], (10, 2))
    c = Correspondences(np.vstack([pts, bad_src]), np.vstack([good, bad_dst]))
    est, inl = ransac_fit(c, threshold=2.0, iterations=1000, seed=0)
    assert relerr(est, h) < 1e-3
    assert set(range(20)) <= set(inl.tolist())


def test_ransac_minimal_set_equals_dlt(rng):
    h = random_h(rng)
    pts = frame_corners(W, H)
    c = Correspondences(pts, apply_homography(h, pts))
    est, _ = ransac_fit(c)
    assert np.array_equal(est, solve_dlt(c))


def test_ransac_is_deterministic(rng):
    pts = rng.uniform(0, [W, H], (40, 2))
    c = Correspondences(pts, pts + rng.normal(0, 3, (40, 2)))
    a = ransac_fit(c, seed=11)
    b = ransac_fit(c, seed=11)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_ransac_without_model(rng):
    # every minimal sample is collinear, so no candidate model exists
    x = rng.uniform(0, W, 12)
    pts = np.stack([x, 0.5 * x + 3], axis=1)
    with pytest.raises(NoModelError):
        ransac_fit(Correspondences(pts, pts + 1.0), iterations=50)


def test_offsets_to_homography_trivial():
    np.testing.assert_allclose(offsets_to_homography(FourPtOffsets(np.zeros((4, 2)), W, H)),
                               np.eye(3), atol=1e-12)
    h = offsets_to_homography(FourPtOffsets(np.tile([3.0, -2.0], (4, 1)), W, H))
    np.testing.assert_allclose(h, [[1, 0, 3], [0, 1, -2], [0, 0, 1]], atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_offsets_round_trip(seed):
    rng = np.random.default_rng(seed)
    o = rng.uniform(-0.1, 0.1, (4, 2)) * [W, H]
    back = homography_to_offsets(offsets_to_homography(FourPtOffsets(o, W, H)), W, H)
    assert np.max(np.abs(back.offsets - o)) < 1e-9


def test_decompose_trivial_cases():
    hr, ht = decompose_middle_plane(FourPtOffsets(np.zeros((4, 2)), W, H))
    np.testing.assert_allclose(hr, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(ht, np.eye(3), atol=1e-12)
    hr, ht = decompose_middle_plane(FourPtOffsets(np.tile([4.0, 0.0], (4, 1)), W, H))
    np.testing.assert_allclose(ht, [[1, 0, 2], [0, 1, 0], [0, 0, 1]], atol=1e-12)
    np.testing.assert_allclose(hr, [[1, 0, -2], [0, 1, 0], [0, 0, 1]], atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_decompose_identity_and_halving(seed):
    rng = np.random.default_rng(seed)
    o = FourPtOffsets(rng.uniform(-0.15, 0.15, (4, 2)) * [W, H], W, H)
    h = offsets_to_homography(o)
    hr, ht = decompose_middle_plane(o)
    assert np.linalg.norm(normalize(h @ hr) - ht) / np.linalg.norm(ht) < 1e-9
    assert hr[2, 2] == 1.0 and ht[2, 2] == 1.0
    half = homography_to_offsets(ht, W, H).offsets
    assert np.max(np.abs(half - o.offsets / 2)) < 1e-9


def test_apply_homography_basics(rng):
    p = rng.uniform(0, 100, (100, 2))
    np.testing.assert_array_equal(apply_homography(np.eye(3), p), p)
    t = np.array([[1, 0, 7.0], [0, 1, -3.0], [0, 0, 1]])
    np.testing.assert_allclose(apply_homography(t, np.zeros((1, 2))), [[7, -3]])
    h = random_h(rng, 0.1)
    back = apply_homography(np.linalg.inv(h), apply_homography(h, p))
    assert np.max(np.abs(back - p)) < 1e-9


def test_point_at_infinity_reports_indices():
    h = np.array([[1, 0, 0], [0, 1, 0], [1.0, 0, 0]])  # den = x
    with pytest.raises(PointAtInfinityError) as exc:
        apply_homography(h, np.array([[1.0, 1.0], [0.0, 5.0], [2.0, 0.0]]))
    assert exc.value.indices == [1]


def test_homography_to_flow_cases(rng):
    f = homography_to_flow(np.eye(3), 5, 6)
    assert not f.dx.any() and not f.dy.any()
    t = np.array([[1, 0, 3.0], [0, 1, 0], [0, 0, 1]])
    f = homography_to_flow(t, 5, 6)
    assert np.all(f.dx == -3.0) and np.all(f.dy == 0.0)
    with pytest.raises(SingularSystemError):
        homography_to_flow(np.zeros((3, 3)) + np.diag([1.0, 0.0, 1.0]), 5, 6)


def test_degenerate_quad_rejected():
    o = np.zeros((4, 2))
    o[1] = [-(W - 1), 0]  # TR collapses onto TL
    with pytest.raises((SingularSystemError, ContractViolation)):
        offsets_to_homography(FourPtOffsets(o, W, H))
