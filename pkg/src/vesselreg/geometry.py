"""Homography algebra, random sampling, estimation, and registration metrics.

Coordinate convention used throughout the package: points are (x, y) pixel
coordinates with the origin at the center of the top-left pixel, x pointing
right and y pointing down. A homography maps source (x, y) to target
coordinates by homogeneous multiplication followed by perspective division.

All functions here are pure and operate on immutable inputs; random sampling
takes an explicit seeded generator, never hidden global state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_W_EPS = 1e-12

HOMOGRAPHY_CONVENTION = "xy-pixel-center"


class GeometryError(ValueError):
    """Base error for invalid geometric inputs or failed estimation."""


class DegeneratePointError(GeometryError):
    """A warped point fell on the horizon line (homogeneous w ~ 0)."""

    def __init__(self, index: int):
        super().__init__(f"point {index} is degenerate under this homography "
                         f"(|w| < {_W_EPS})")
        self.index = index


class EstimationError(GeometryError):
    """Homography estimation failed (too few or degenerate correspondences)."""


@dataclass(frozen=True)
class Homography:
    """A 3x3 real projective transform, scale-normalized on construction.

    The matrix maps (x, y) -> (x', y') via [x', y', w]^T = M [x, y, 1]^T and
    division by w. Whenever |M[2,2]| > 1e-12 the stored matrix is rescaled so
    that M[2,2] == 1.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"homography matrix must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("homography matrix contains non-finite entries")
        if abs(m[2, 2]) > _W_EPS:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= _W_EPS:
            raise GeometryError("homography matrix is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "Homography":
        sy = sx if sy is None else sy
        return cls(np.diag([sx, sy, 1.0]))

    @classmethod
    def rotation(cls, angle_deg: float, center: tuple[float, float] = (0.0, 0.0)) -> "Homography":
        """Rotation by angle_deg (counterclockwise in x-right/y-down axes) about center."""
        a = np.deg2rad(angle_deg)
        c, s = np.cos(a), np.sin(a)
        cx, cy = center
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        t_in = cls.translation(-cx, -cy).matrix
        t_out = cls.translation(cx, cy).matrix
        return cls(t_out @ rot @ t_in)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """Return the homography applying `other` first, then `self`."""
        return Homography(self.matrix @ other.matrix)

    def __matmul__(self, other: "Homography") -> "Homography":
        return self.compose(other)

    def to_json_dict(self) -> dict:
        return {"matrix": [float(v) for v in self.matrix.ravel()],
                "convention": HOMOGRAPHY_CONVENTION}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Homography":
        conv = d.get("convention", HOMOGRAPHY_CONVENTION)
        if conv != HOMOGRAPHY_CONVENTION:
            raise GeometryError(f"unsupported homography convention {conv!r}")
        vals = d["matrix"]
        if len(vals) != 9:
            raise GeometryError("homography JSON must hold 9 matrix entries")
        return cls(np.asarray(vals, dtype=np.float64).reshape(3, 3))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Homography":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Correspondences:
    """Weighted point correspondences src[i] <-> dst[i], weights >= 0."""

    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        src = np.atleast_2d(np.asarray(self.src, dtype=np.float64))
        dst = np.atleast_2d(np.asarray(self.dst, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
            raise GeometryError("src and dst must both be (N, 2) arrays")
        if w.shape[0] != src.shape[0]:
            raise GeometryError("weights length must match the point count")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst)) and np.all(np.isfinite(w))):
            raise GeometryError("correspondences contain non-finite values")
        if np.any(w < 0):
            raise GeometryError("weights must be nonnegative")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, src, dst) -> "Correspondences":
        src = np.atleast_2d(np.asarray(src, dtype=np.float64))
        return cls(src, dst, np.ones(src.shape[0]))

    def __len__(self) -> int:
        return self.src.shape[0]


@dataclass(frozen=True)
class HomographySampleConfig:
    """Ranges for random homography sampling (corner perturbation model).

    A sample is a global similarity jitter (rotation about the image center,
    isotropic scale, translation) composed with an independent displacement of
    each corner, drawn uniformly from a disk of radius
    max_corner_displacement * min(w, h). All ranges zero yields the identity.
    """

    max_corner_displacement: float = 0.1
    rotation_range_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_range: float = 0.05
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if self.max_corner_displacement < 0 or self.rotation_range_deg < 0 \
                or self.translation_range < 0:
            raise GeometryError("sampling ranges must be nonnegative")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise GeometryError("scale_range must be a positive interval (lo <= hi)")


def warp_points(points: np.ndarray, h: Homography) -> np.ndarray:
    """Apply a homography to (N, 2) points, returning (N, 2) warped points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 2))
    pts = np.atleast_2d(pts)
    if not np.all(np.isfinite(pts)):
        raise GeometryError("points contain non-finite values")
    m = h.matrix
    xy1 = np.column_stack([pts, np.ones(pts.shape[0])])
    out = xy1 @ m.T
    w = out[:, 2]
    bad = np.abs(w) < _W_EPS
    if np.any(bad):
        raise DegeneratePointError(int(np.argmax(bad)))
    return out[:, :2] / w[:, None]


def image_corners(image_size: tuple[int, int]) -> np.ndarray:
    """Pixel-center corners of a (w, h) raster: (0,0), (w-1,0), (w-1,h-1), (0,h-1)."""
    w, h = image_size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def _quad_is_convex(quad: np.ndarray, min_area: float) -> bool:
    crosses = []
    for i in range(4):
        a = quad[(i + 1) % 4] - quad[i]
        b = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        crosses.append(a[0] * b[1] - a[1] * b[0])
    crosses = np.asarray(crosses)
    if not (np.all(crosses > 0) or np.all(crosses < 0)):
        return False
    # shoelace area
    x, y = quad[:, 0], quad[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return area > min_area


def sample_homography(cfg: HomographySampleConfig, image_size: tuple[int, int],
                      rng: np.random.Generator) -> Homography:
    """Sample a random homography by perturbing the four image corners.

    Deterministic given the generator state. Degenerate (non-convex or
    near-zero-area) corner quadrilaterals are resampled up to cfg.max_retries.
    """
    w, h = image_size
    if w <= 0 or h <= 0:
        raise GeometryError("image_size must be positive")
    side = float(min(w, h))
    corners = image_corners(image_size)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    for _ in range(cfg.max_retries):
        angle = rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg)
        scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        tx = rng.uniform(-cfg.translation_range, cfg.translation_range) * side
        ty = rng.uniform(-cfg.translation_range, cfg.translation_range) * side

        sim = (Homography.translation(tx, ty)
               @ Homography.rotation(angle, center=(cx, cy))
               @ Homography(np.array([[scale, 0, cx * (1 - scale)],
                                      [0, scale, cy * (1 - scale)],
                                      [0, 0, 1.0]])))
        moved = warp_points(corners, sim)

        # uniform-in-disk displacement keeps every corner within the radius
        radius = cfg.max_corner_displacement * side
        r = radius * np.sqrt(rng.uniform(0, 1, size=4))
        phi = rng.uniform(0, 2 * np.pi, size=4)
        moved = moved + np.column_stack([r * np.cos(phi), r * np.sin(phi)])

        if not _quad_is_convex(moved, min_area=1e-3 * side * side):
            continue
        try:
            return _dlt(corners, moved, np.ones(4))
        except EstimationError:
            continue
    raise GeometryError(f"failed to sample a valid homography in "
                        f"{cfg.max_retries} attempts")


def crop_adjust_homography(h: Homography, crop_offset_a: tuple[float, float],
                           crop_offset_b: tuple[float, float]) -> Homography:
    """Homography valid in crop-local coordinates: T(-offset_b) o h o T(+offset_a)."""
    ta = Homography.translation(*crop_offset_a)
    tb = Homography.translation(-crop_offset_b[0], -crop_offset_b[1])
    return tb @ h @ ta


def _hartley_normalization(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted similarity sending the weighted centroid to the origin and the
    weighted mean distance to sqrt(2). Weight-aware so that duplicating a point
    is equivalent to doubling its weight."""
    wsum = weights.sum()
    centroid = (points * weights[:, None]).sum(axis=0) / wsum
    d = np.linalg.norm(points - centroid, axis=1)
    mean_dist = (d * weights).sum() / wsum
    s = np.sqrt(2.0) / mean_dist if mean_dist > _W_EPS else 1.0
    return np.array([[s, 0, -s * centroid[0]],
                     [0, s, -s * centroid[1]],
                     [0, 0, 1.0]])


def _dlt(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> Homography:
    """Weighted DLT core on pre-filtered (usable) correspondences."""
    n = src.shape[0]
    t_src = _hartley_normalization(src, weights)
    t_dst = _hartley_normalization(dst, weights)
    s = (np.column_stack([src, np.ones(n)]) @ t_src.T)[:, :2]
    d = (np.column_stack([dst, np.ones(n)]) @ t_dst.T)[:, :2]

    a = np.zeros((2 * n, 9))
    sw = np.sqrt(weights)
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    a *= np.repeat(sw, 2)[:, None]

    _, sv, vt = np.linalg.svd(a)
    # a unique solution requires nullspace dimension exactly 1
    if sv[0] <= _W_EPS or sv[7] / sv[0] < 1e-10:
        raise EstimationError("design matrix is rank-deficient "
                              "(collinear or coincident correspondences)")
    h_norm = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ h_norm @ t_src
    try:
        return Homography(m)
    except GeometryError as e:
        raise EstimationError(f"estimated matrix is degenerate: {e}") from e


def estimate_homography_dlt(c: Correspondences) -> Homography:
    """Estimate the homography minimizing the weighted algebraic error.

    Hartley-normalizes both point sets, scales each correspondence's two design
    rows by sqrt(weight), solves via the smallest singular vector, denormalizes
    and scale-normalizes. Zero-weight correspondences are excluded.
    """
    usable = c.weights > 0
    if int(usable.sum()) < 4:
        raise EstimationError(f"need >= 4 correspondences with positive weight, "
                              f"got {int(usable.sum())}")
    return _dlt(c.src[usable], c.dst[usable], c.weights[usable])


def estimate_homography_ransac(c: Correspondences, reproj_threshold: float = 5.0,
                               max_iters: int = 2000,
                               rng: np.random.Generator | None = None,
                               ) -> tuple[Homography, np.ndarray]:
    """Standard 4-point RANSAC with a final weighted DLT refit on the inliers.

    Returns (homography, inlier_mask) where the mask is recomputed under the
    refit model. Deterministic given the generator state.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(c)
    if n < 4:
        raise EstimationError(f"RANSAC needs >= 4 correspondences, got {n}")

    best_count = 0
    best_mask = None
    for _ in range(max_iters):
        idx = rng.choice(n, size=4, replace=False)
        try:
            model = _dlt(c.src[idx], c.dst[idx], np.ones(4))
            err = np.linalg.norm(warp_points(c.src, model) - c.dst, axis=1)
        except GeometryError:
            continue
        mask = err < reproj_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            if count == n:
                break
    if best_mask is None or best_count < 4:
        raise EstimationError("RANSAC found no model with >= 4 inliers")

    refit = _dlt(c.src[best_mask], c.dst[best_mask],
                 np.maximum(c.weights[best_mask], _W_EPS))
    err = np.linalg.norm(warp_points(c.src, refit) - c.dst, axis=1)
    return refit, err < reproj_threshold


def mean_homography_error(h_pred: Homography, h_gt: Homography,
                          image_size: tuple[int, int]) -> float:
    """Mean displacement of the four source-image corners warped by the two maps."""
    corners = image_corners(image_size)
    d = np.linalg.norm(warp_points(corners, h_pred) - warp_points(corners, h_gt), axis=1)
    return float(d.mean())


def control_point_errors(h_pred: Homography, src_cp: np.ndarray,
                         dst_cp: np.ndarray) -> tuple[float, float]:
    """Mean and maximum Euclidean errors of warped source control points."""
    src = np.atleast_2d(np.asarray(src_cp, dtype=np.float64))
    dst = np.atleast_2d(np.asarray(dst_cp, dtype=np.float64))
    if src.shape[0] == 0:
        raise GeometryError("control point sets are empty")
    if src.shape != dst.shape:
        raise GeometryError("control point sets must have equal shapes")
    d = np.linalg.norm(warp_points(src, h_pred) - dst, axis=1)
    return float(d.mean()), float(d.max())


def success_rate(errors, epsilon: float) -> float:
    """Fraction of errors <= epsilon. Failed registrations enter as +inf."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise GeometryError("errors must be non-empty")
    return float(np.mean(e <= epsilon))


def dice_score(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice overlap 2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total
