"""Planar homographies, RANSAC estimation and matching-accuracy metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .features import FeatureSet, SingularHomographyError, project

THRESHOLDS = tuple(range(1, 11))


class PointAtInfinityError(ValueError):
    pass


def normalize_h(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise SingularHomographyError("homography is singular")
    return h / h[2, 2] if h[2, 2] != 0 else h


def apply_homography(h, points) -> np.ndarray:
    """Projective mapping of one point (shape (2,)) or many (shape (N, 2))."""
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    hom = flat @ h[:, :2].T + h[:, 2]
    if np.any(np.abs(hom[:, 2]) <= 1e-12):
        raise PointAtInfinityError("point maps to infinity")
    out = hom[:, :2] / hom[:, 2:3]
    return out.reshape(pts.shape)


def corner_error(h_est, h_true, width: float, height: float) -> float:
    """Largest displacement of the four image corners between two homographies."""
    corners = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    return float(np.max(np.linalg.norm(apply_homography(h_est, corners) - apply_homography(h_true, corners), axis=1)))


# ---------------------------------------------------------------------------
# DLT + RANSAC


def _hartley(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])


def _dlt_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """All three rows of x' x (H x) = 0 per correspondence; keeps the fit rotation invariant."""
    n = len(src)
    x = np.column_stack([src, np.ones(n)])
    u, v = dst[:, 0:1], dst[:, 1:2]
    z = np.zeros((n, 3))
    r1 = np.hstack([z, -x, v * x])
    r2 = np.hstack([x, z, -u * x])
    r3 = np.hstack([-v * x, u * x, z])
    return np.stack([r1, r2, r3], axis=1).reshape(-1, 9)


def dlt_homography(src, dst) -> np.ndarray:
    """Hartley-normalized DLT; least squares on the algebraic error for more than four points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise ValueError("DLT needs at least four correspondences")
    ts, td = _hartley(src), _hartley(dst)
    sn = src @ ts[:2, :2].T + ts[:2, 2]
    dn = dst @ td[:2, :2].T + td[:2, 2]
    _, _, vt = np.linalg.svd(_dlt_rows(sn, dn))
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return h / h[2, 2] if abs(h[2, 2]) > 1e-15 else h


def _batched_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Minimal fits for a stack of 4-point samples, shapes (B, 4, 2) -> (B, 3, 3)."""
    out = np.empty((len(src), 3, 3))
    for i in range(len(src)):
        out[i] = dlt_homography(src[i], dst[i])
    return out


def _triangle_areas(p: np.ndarray) -> np.ndarray:
    """Normalized areas of the four triangles of each 4-point sample (B, 4, 2) -> (B, 4)."""
    idx = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    areas = []
    for a, b, c in idx:
        u = p[:, b] - p[:, a]
        w = p[:, c] - p[:, a]
        cross = np.abs(u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0])
        scale = np.maximum(np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1), 1e-300)
        areas.append(cross / scale)
    return np.stack(areas, axis=1)


def symmetric_transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Mean of forward and backward reprojection distances, in pixels."""
    h = np.asarray(h, dtype=np.float64)
    hinv = np.linalg.inv(h)
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.linalg.norm(project(h, src) - dst, axis=1)
        bwd = np.linalg.norm(project(hinv, dst) - src, axis=1)
    err = 0.5 * (fwd + bwd)
    return np.where(np.isfinite(err), err, np.inf)


@dataclass
class RansacResult:
    success: bool
    homography: Optional[np.ndarray]
    inliers: np.ndarray  # bool per match
    iterations: int

    @property
    def num_inliers(self) -> int:
        return int(self.inliers.sum())


def ransac_homography(src, dst, iterations: int = 1000, inlier_tol_px: float = 3.0, seed: int = 0,
                      degenerate_tol: float = 1e-3) -> RansacResult:
    """Fixed-iteration RANSAC with 4-point minimal samples and a DLT refit on the best inlier set."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    fail = RansacResult(False, None, np.zeros(n, dtype=bool), 0)
    if n < 4:
        return fail
    rng = np.random.default_rng(seed)
    samples = np.empty((iterations, 4), dtype=np.int64)
    filled = 0
    attempts = 0
    while filled < iterations and attempts < 100:
        attempts += 1
        cand = np.array([rng.choice(n, 4, replace=False) for _ in range(iterations - filled)])
        ok = (_triangle_areas(src[cand]).min(axis=1) > degenerate_tol) & \
             (_triangle_areas(dst[cand]).min(axis=1) > degenerate_tol)
        good = cand[ok]
        samples[filled:filled + len(good)] = good
        filled += len(good)
    if filled == 0:
        return fail
    samples = samples[:filled]
    models = _batched_dlt(src[samples], dst[samples])
    best, best_count, best_err = None, -1, np.inf
    for h in models:
        if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) <= 1e-12:
            continue
        err = symmetric_transfer_error(h, src, dst)
        inl = err <= inlier_tol_px
        count = int(inl.sum())
        score = float(err[inl].sum())
        if count > best_count or (count == best_count and score < best_err):
            best, best_count, best_err = h, count, score
    if best is None or best_count < 4:
        return RansacResult(False, None, np.zeros(n, dtype=bool), filled)
    inliers = symmetric_transfer_error(best, src, dst) <= inlier_tol_px
    refit = dlt_homography(src[inliers], dst[inliers])
    refit_inliers = symmetric_transfer_error(refit, src, dst) <= inlier_tol_px
    if refit_inliers.sum() >= inliers.sum():
        best, inliers = refit, refit_inliers
    return RansacResult(True, normalize_h(best), inliers, filled)


# ---------------------------------------------------------------------------
# matching accuracy


@dataclass
class MmaCurve:
    thresholds: tuple[int, ...]
    mma_at: np.ndarray
    num_matches: int
    num_inliers_at: np.ndarray
    empty: bool = False


def match_errors(pairs: np.ndarray, query: FeatureSet, map_set: FeatureSet, h_gt) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros(0)
    if pairs[:, 0].max() >= len(query) or pairs[:, 1].max() >= len(map_set) or pairs.min() < 0:
        raise IndexError("match index out of range")
    projected = apply_homography(h_gt, query.xy[pairs[:, 0]])
    return np.linalg.norm(projected - map_set.xy[pairs[:, 1]], axis=1)


def _pairs_of(matches) -> np.ndarray:
    return np.asarray(getattr(matches, "pairs", matches), dtype=np.int64).reshape(-1, 2)


def mma_curve(matches, query: FeatureSet, map_set: FeatureSet, h_gt,
              thresholds: Sequence[int] = THRESHOLDS) -> MmaCurve:
    """Fraction of matches whose ground-truth reprojection error is within each threshold."""
    pairs = _pairs_of(matches)
    err = match_errors(pairs, query, map_set, h_gt)
    counts = np.array([int(np.sum(err <= t)) for t in thresholds], dtype=np.int64)
    n = len(pairs)
    mma = counts / n if n else np.zeros(len(thresholds))
    return MmaCurve(tuple(thresholds), mma, n, counts, empty=(n == 0))


def count_inliers(matches, query: FeatureSet, map_set: FeatureSet, h_gt, threshold_px: float) -> int:
    err = match_errors(_pairs_of(matches), query, map_set, h_gt)
    return int(np.sum(err <= threshold_px))
