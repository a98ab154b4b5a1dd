import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_set
from crossfeat.features import FeatureSet, SingularHomographyError
from crossfeat.geometry import (THRESHOLDS, PointAtInfinityError, apply_homography, corner_error, count_inliers,
                                dlt_homography, mma_curve, normalize_h, ransac_homography)
from crossfeat.synth import HomographyFamily

W, H = 640, 480


def planted(rng):
    return HomographyFamily(max_rotation_deg=20, max_perspective=3e-4, max_translation_px=40).sample(rng, W, H)


def test_apply_homography_examples(rng):
    p = np.array([12.5, -3.0])
    np.testing.assert_array_equal(apply_homography(np.eye(3), p), p)
    t = np.array([[1, 0, 7.0], [0, 1, -2.0], [0, 0, 1]])
    np.testing.assert_allclose(apply_homography(t, p), p + [7, -2])
    h = rng.normal(size=(3, 3))
    h[2] = [1e-3, 2e-3, 1.0]
    for q in rng.uniform(0, 100, size=(10, 2)):
        x, y, w = h @ np.array([q[0], q[1], 1.0])
        np.testing.assert_allclose(apply_homography(h, q), [x / w, y / w], rtol=1e-12)
    with pytest.raises(PointAtInfinityError):
        apply_homography(np.array([[1, 0, 0], [0, 1, 0], [1, 0, -5.0]]), [5.0, 1.0])


def test_normalize_h():
    h = 3.0 * np.eye(3)
    np.testing.assert_allclose(normalize_h(h), np.eye(3))
    with pytest.raises(SingularHomographyError):
        normalize_h(np.zeros((3, 3)))


def sets_under(rng, h, k=30, jitter=0.0):
    q = random_set(rng, k=k, n=4, width=W, height=H)
    xy = apply_homography(h, q.xy) + jitter * rng.normal(size=(k, 2))
    kp = q.keypoints.copy()
    kp[:, :2] = xy
    m = FeatureSet("m", W, H, q.algorithm, kp, q.descriptors)
    return q, m


def test_mma_curve_examples(rng):
    h = planted(rng)
    q, m = sets_under(rng, h, k=20)
    pairs = np.column_stack([np.arange(20), np.arange(20)])
    curve = mma_curve(pairs, q, m, h)
    assert curve.thresholds == THRESHOLDS
    np.testing.assert_allclose(curve.mma_at, 1.0)
    assert curve.num_matches == 20 and not curve.empty
    kp = m.keypoints.copy()
    kp[:10, 0] += 20.0
    shifted = FeatureSet("m", W, H, m.algorithm, kp, m.descriptors)
    np.testing.assert_allclose(mma_curve(pairs, q, shifted, h).mma_at, 0.5)
    empty = mma_curve(np.zeros((0, 2), np.int64), q, m, h)
    assert empty.empty and np.all(empty.mma_at == 0) and empty.num_matches == 0
    with pytest.raises(IndexError):
        mma_curve(np.array([[0, 25]]), q, m, h)


def test_mma_curve_matches_recomputation(rng):
    h = planted(rng)
    q, m = sets_under(rng, h, k=50, jitter=4.0)
    pairs = np.column_stack([rng.permutation(50)[:40], rng.permutation(50)[:40]])
    pairs[:25, 1] = pairs[:25, 0]
    curve = mma_curve(pairs, q, m, h)
    for ti, t in enumerate(THRESHOLDS):
        ok = 0
        for i, j in pairs:
            x, y, w = h @ np.array([q.keypoints[i, 0], q.keypoints[i, 1], 1.0])
            ok += np.hypot(x / w - m.keypoints[j, 0], y / w - m.keypoints[j, 1]) <= t
        assert curve.num_inliers_at[ti] == ok
        assert curve.mma_at[ti] == pytest.approx(ok / 40)
        assert count_inliers(pairs, q, m, h, t) == ok


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 60))
def test_mma_monotone_and_inlier_identity(seed, k):
    rng = np.random.default_rng(seed)
    h = planted(rng)
    q, m = sets_under(rng, h, k=60, jitter=rng.uniform(0, 8))
    pairs = np.column_stack([rng.integers(0, 60, k), rng.integers(0, 60, k)])
    curve = mma_curve(pairs, q, m, h)
    assert np.all(np.diff(curve.mma_at) >= 0) and np.all(np.diff(curve.num_inliers_at) >= 0)
    for ti, t in enumerate(THRESHOLDS):
        assert count_inliers(pairs, q, m, h, t) == curve.num_inliers_at[ti]
        assert round(curve.num_matches * curve.mma_at[ti]) == curve.num_inliers_at[ti]


def test_count_inliers_trivial(rng):
    h = planted(rng)
    q, m = sets_under(rng, h, k=12)
    assert count_inliers(np.column_stack([np.arange(12)] * 2), q, m, h, 1) == 12
    assert count_inliers(np.zeros((0, 2), np.int64), q, m, h, 1) == 0


# estimation

def test_dlt_exact_fit(rng):
    h = planted(rng)
    src = rng.uniform([0, 0], [W, H], size=(4, 2))
    got = dlt_homography(src, apply_homography(h, src))
    assert corner_error(got, h, W, H) < 1e-6
    with pytest.raises(ValueError):
        dlt_homography(src[:3], src[:3])


def test_ransac_noise_free_and_too_few(rng):
    h = planted(rng)
    src = rng.uniform([0, 0], [W, H], size=(50, 2))
    res = ransac_homography(src, apply_homography(h, src), iterations=50, seed=1)
    assert res.success and res.num_inliers == 50
    assert corner_error(res.homography, h, W, H) < 1e-6
    bad = ransac_homography(src[:3], src[:3])
    assert not bad.success and bad.homography is None


def test_ransac_rejects_degenerate_samples():
    # every point on one line: no valid minimal sample exists
    src = np.column_stack([np.linspace(0, 100, 20), np.linspace(0, 50, 20)])
    res = ransac_homography(src, src + 1.0, iterations=20)
    assert not res.success


def planted_problem(seed, n=200, inlier_frac=0.4, sigma=0.5):
    rng = np.random.default_rng(seed)
    h = planted(rng)
    n_in = int(round(n * inlier_frac))
    src = rng.uniform([0, 0], [W, H], size=(n, 2))
    dst = rng.uniform([0, 0], [W, H], size=(n, 2))
    dst[:n_in] = apply_homography(h, src[:n_in]) + sigma * rng.normal(size=(n_in, 2))
    return h, src, dst


def test_ransac_recovers_planted_homography_at_forty_percent_inliers():
    ok = 0
    for trial in range(20):
        h, src, dst = planted_problem(trial)
        res = ransac_homography(src, dst, iterations=1000, inlier_tol_px=3.0, seed=trial)
        ok += res.success and corner_error(res.homography, h, W, H) < 1.0
    assert ok >= 19


def test_ransac_is_deterministic():
    _, src, dst = planted_problem(3)
    a = ransac_homography(src, dst, iterations=200, seed=5)
    b = ransac_homography(src, dst, iterations=200, seed=5)
    assert np.array_equal(a.homography, b.homography) and np.array_equal(a.inliers, b.inliers)


@pytest.mark.parametrize("scale", [1.0, 2.5])
def test_ransac_similarity_invariance(scale):
    h, src, dst = planted_problem(11)
    th = np.deg2rad(33.0)
    s = np.array([[scale * np.cos(th), -scale * np.sin(th), 50.0], [scale * np.sin(th), scale * np.cos(th), -20.0],
                  [0, 0, 1]])
    a = ransac_homography(src, dst, iterations=300, inlier_tol_px=3.0, seed=2)
    b = ransac_homography(apply_homography(s, src), apply_homography(s, dst), iterations=300,
                          inlier_tol_px=3.0 * scale, seed=2)
    assert np.array_equal(a.inliers, b.inliers)
    conj = normalize_h(np.linalg.inv(s) @ b.homography @ s)
    np.testing.assert_allclose(conj, a.homography, atol=1e-9)
