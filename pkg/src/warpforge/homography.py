"""Homographies: 4-pt parameterization, DLT, RANSAC and middle-plane split.

Conventions used throughout the package:

* ``H`` estimated from correspondences maps reference pixels to target
  pixels (``x_tgt ~ H x_ref``).
* Corner order for 4-pt offsets is TL, TR, BL, BR, with corners at pixel
  centres ``(0, 0)``, ``(W-1, 0)``, ``(0, H-1)``, ``(W-1, H-1)``.
* ``H_ref`` and ``H_tgt`` from :func:`decompose_middle_plane` map
  middle-plane coordinates to reference / target pixels, so that
  ``H @ H_ref == H_tgt``. Warping an image onto the middle plane samples it
  at ``H_x(p)``; see :func:`sampling_flow`.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ContractViolation, NoModelError, PointAtInfinityError, SingularSystemError
from .imaging import FlowField, pixel_grid

DET_TOL = 1e-10
INF_TOL = 1e-12


@dataclass
class FourPtOffsets:
    offsets: np.ndarray  # (4, 2): TL, TR, BL, BR
    frame_w: int
    frame_h: int

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(4, 2)
        if not np.all(np.isfinite(self.offsets)):
            raise ContractViolation("4-pt offsets must be finite")

    @property
    def corners(self) -> np.ndarray:
        return frame_corners(self.frame_w, self.frame_h)

    def halved(self) -> "FourPtOffsets":
        return FourPtOffsets(self.offsets / 2, self.frame_w, self.frame_h)


@dataclass
class Correspondences:
    ref: np.ndarray  # (n, 2)
    tgt: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.ref = np.asarray(self.ref, dtype=np.float64).reshape(-1, 2)
        self.tgt = np.asarray(self.tgt, dtype=np.float64).reshape(-1, 2)
        if self.ref.shape != self.tgt.shape:
            raise ContractViolation(
                f"correspondence arrays differ: {self.ref.shape} vs {self.tgt.shape}")
        if not (np.all(np.isfinite(self.ref)) and np.all(np.isfinite(self.tgt))):
            raise ContractViolation("correspondences must be finite")

    def __len__(self):
        return len(self.ref)

    def subset(self, idx) -> "Correspondences":
        return Correspondences(self.ref[idx], self.tgt[idx])


def frame_corners(frame_w: int, frame_h: int) -> np.ndarray:
    w, h = frame_w - 1.0, frame_h - 1.0
    return np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]])


def normalize(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) > 1e-15:
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def _check_invertible(h: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < DET_TOL:
        raise SingularSystemError("homography is singular")
    return h


def _hartley(pts: np.ndarray) -> np.ndarray:
    centre = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centre) ** 2, axis=1)))
    if rms < 1e-15:
        raise SingularSystemError("all points coincide")
    s = np.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * centre[0]], [0.0, s, -s * centre[1]], [0.0, 0.0, 1.0]])


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12)
    for i, j, k in combinations(range(len(pts)), 3):
        a, b, c = pts[i], pts[j], pts[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) <= tol * scale * scale:
            return True
    return False


def solve_dlt(c: Correspondences) -> np.ndarray:
    """Normalized DLT homography mapping ``c.ref`` onto ``c.tgt``."""
    n = len(c)
    if n < 4:
        raise ContractViolation(f"need >= 4 correspondences, got {n}")
    if n == 4 and (_has_collinear_triple(c.ref) or _has_collinear_triple(c.tgt)):
        raise SingularSystemError("degenerate configuration: three collinear points")
    t_src = _hartley(c.ref)
    t_dst = _hartley(c.tgt)
    src = c.ref @ t_src[:2, :2].T + t_src[:2, 2]
    dst = c.tgt @ t_dst[:2, :2].T + t_dst[:2, 2]
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    z, o = np.zeros(n), np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], axis=1)
    a[1::2] = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], axis=1)
    _, s, vt = np.linalg.svd(a)
    # a unique solution needs a one-dimensional null space
    if s[0] == 0 or s[7] / s[0] < 1e-12:
        raise SingularSystemError("degenerate configuration: DLT system rank-deficient")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.solve(t_dst, hn @ t_src)
    return _check_invertible(normalize(h))


def project(h: np.ndarray, pts: np.ndarray):
    """Projective mapping without raising; returns (mapped, denominator)."""
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    den = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    safe = np.where(np.abs(den) < INF_TOL, np.nan, den)
    mx = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / safe
    my = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / safe
    return np.stack([mx, my], axis=-1), den


def apply_homography(h: np.ndarray, points) -> np.ndarray:
    out, den = project(np.asarray(h, dtype=np.float64), points)
    bad = np.abs(np.asarray(den)).reshape(-1) < INF_TOL
    if bad.any():
        raise PointAtInfinityError(np.flatnonzero(bad))
    return out


def reprojection_error(h: np.ndarray, c: Correspondences) -> np.ndarray:
    mapped, _ = project(h, c.ref)
    err = np.linalg.norm(mapped - c.tgt, axis=1)
    return np.where(np.isfinite(err), err, np.inf)


def ransac_fit(c: Correspondences, threshold: float = 2.0, iterations: int = 1000, seed: int = 0):
    """Robust homography from correspondences.

    Returns ``(H, inliers)`` where ``inliers`` is a sorted index array. The
    best sample is the one with most inliers; ties keep the earliest
    iteration. The returned model is a least-squares DLT over the inliers.
    """
    n = len(c)
    if n < 4:
        raise ContractViolation(f"need >= 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.choice(n, 4, replace=False)
        try:
            h = solve_dlt(c.subset(idx))
        except SingularSystemError:
            continue
        inl = reprojection_error(h, c) < threshold
        count = int(inl.sum())
        if count > best_count:
            best, best_count = inl, count
            if count == n:
                break
    if best is None or best_count < 4:
        raise NoModelError(f"RANSAC found {best_count} inliers; need at least 4")
    inliers = np.flatnonzero(best)
    return solve_dlt(c.subset(inliers)), inliers


def offsets_to_homography(o: FourPtOffsets) -> np.ndarray:
    corners = o.corners
    return solve_dlt(Correspondences(corners, corners + o.offsets))


def homography_to_offsets(h: np.ndarray, frame_w: int, frame_h: int) -> FourPtOffsets:
    corners = frame_corners(frame_w, frame_h)
    return FourPtOffsets(apply_homography(h, corners) - corners, frame_w, frame_h)


def decompose_middle_plane(o: FourPtOffsets):
    """Split the homography of ``o`` into middle-plane maps ``(H_ref, H_tgt)``.

    ``H_tgt`` carries every corner half-way along its displacement and
    ``H_ref = inv(H) @ H_tgt``; both are h33-normalized.
    """
    h = offsets_to_homography(o)
    h_tgt = offsets_to_homography(o.halved())
    h_ref = normalize(np.linalg.solve(h, h_tgt))
    return _check_invertible(h_ref), h_tgt


def sampling_flow(g: np.ndarray, height: int, width: int, origin=(0.0, 0.0)) -> FlowField:
    """Flow whose output pixel ``q`` samples the input at ``g(q + origin)``."""
    xs, ys = pixel_grid(height, width)
    pts = np.stack([xs + origin[0], ys + origin[1]], axis=-1)
    mapped = apply_homography(g, pts)
    return FlowField(mapped[..., 0] - xs, mapped[..., 1] - ys)


def homography_to_flow(h: np.ndarray, height: int, width: int, origin=(0.0, 0.0)) -> FlowField:
    """Backward flow realizing the forward mapping ``h``: flow(p) = inv(h)(p) - p."""
    h = _check_invertible(normalize(h))
    return sampling_flow(normalize(np.linalg.inv(h)), height, width, origin)
