"""Rigid-body geometry: SE(3) transforms, 3D-3D registration, pinhole camera."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCorrespondences, InvalidDepth

# Tolerance for the SO(3) membership checks (orthonormality, unit determinant).
ROTATION_TOL = 1e-9

# Collinearity guard: smallest/largest eigenvalue ratio of the source covariance.
DEGENERACY_EIG_RATIO = 1e-12


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element mapping points as ``x_out = rotation @ x_in + translation``.

    ``rotation`` is a proper orthonormal 3x3 matrix, ``translation`` a
    3-vector in meters. Instances are immutable and safe to share.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rodrigues rotation about ``axis`` plus a translation."""
        a = np.asarray(axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0:
            return RigidTransform(np.eye(3), translation)
        a = a / n
        kx = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        r = np.eye(3) + np.sin(angle_rad) * kx + (1 - np.cos(angle_rad)) * (kx @ kx)
        return RigidTransform(r, translation)

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return RigidTransform(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return the transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a (3,) point or an (N, 3) point array."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = ROTATION_TOL) -> bool:
        r = self.rotation
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            return False
        ortho = np.linalg.norm(r.T @ r - np.eye(3))
        return ortho <= tol and abs(np.linalg.det(r) - 1.0) <= tol


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Compose two transforms: apply ``b`` first, then ``a``."""
    return a.compose(b)


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix (0..pi).

    Uses atan2 of the skew-part norm against the trace, which stays
    well-conditioned for angles near zero (unlike arccos of the trace).
    """
    skew = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = np.linalg.norm(skew)
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def transform_distance(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(rotation angle, translation norm) between two transforms."""
    d = a.compose(b.inverse())
    return rotation_angle(d.rotation), float(np.linalg.norm(d.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Pixel (u, v) has u along width, v along height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Correspondence3D:
    """A weighted 3D-3D point correspondence between two frames."""

    source_point: np.ndarray
    target_point: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.source_point, dtype=float).reshape(3)
        t = np.asarray(self.target_point, dtype=float).reshape(3)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
            raise ValueError("correspondence points must be finite")
        if self.weight < 0:
            raise ValueError("weight must be nonnegative")
        object.__setattr__(self, "source_point", s)
        object.__setattr__(self, "target_point", t)


@dataclass(frozen=True)
class RansacParams:
    threshold: float = 0.05
    iterations: int = 256
    seed: int = 0


def _kabsch(src: np.ndarray, dst: np.ndarray, w: np.ndarray) -> RigidTransform:
    """Weighted closed-form rigid fit (SVD), with reflection guard."""
    wsum = w.sum()
    if wsum <= 0:
        w = np.ones_like(w)
        wsum = w.sum()
    wn = w / wsum
    c_src = wn @ src
    c_dst = wn @ dst
    h = (src - c_src).T @ ((dst - c_dst) * wn[:, None])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, c_dst - r @ c_src)


def _check_degenerate(src: np.ndarray, w: np.ndarray) -> None:
    wsum = w.sum()
    wn = w / wsum if wsum > 0 else np.full(len(w), 1.0 / len(w))
    c = wn @ src
    centered = src - c
    cov = centered.T @ (centered * wn[:, None])
    eig = np.linalg.eigvalsh(cov)
    if eig[1] < DEGENERACY_EIG_RATIO * max(eig[2], np.finfo(float).tiny):
        raise DegenerateCorrespondences(
            f"correspondences are collinear (eigenvalues {eig})"
        )


def estimate_rigid_transform(
    corrs, ransac: RansacParams = RansacParams()
) -> tuple[RigidTransform, np.ndarray]:
    """Estimate the source-to-target rigid transform from 3D correspondences.

    Runs a RANSAC loop over 3-point minimal samples with a weighted
    closed-form SVD refit on the best inlier set. Deterministic for a
    fixed ``ransac.seed``.

    Args:
        corrs: sequence of Correspondence3D.
        ransac: inlier threshold (meters), iteration count, and seed.

    Returns:
        (transform, inlier_mask) where inlier_mask marks correspondences
        whose residual under the final transform is <= ransac.threshold.

    Raises:
        DegenerateCorrespondences: fewer than 3 points, or collinear set.
    """
    n = len(corrs)
    if n < 3:
        raise DegenerateCorrespondences(f"need >= 3 correspondences, got {n}")
    src = np.stack([c.source_point for c in corrs])
    dst = np.stack([c.target_point for c in corrs])
    w = np.array([c.weight for c in corrs], dtype=float)
    _check_degenerate(src, w)

    if n == 3:
        tf = _kabsch(src, dst, w)
        res = np.linalg.norm(tf.apply(src) - dst, axis=1)
        return tf, res <= ransac.threshold

    rng = np.random.default_rng(ransac.seed)
    iters = ransac.iterations
    samples = np.empty((iters, 3), dtype=int)
    for i in range(iters):
        samples[i] = rng.choice(n, size=3, replace=False)

    # Batched 3-point Kabsch over all samples.
    a = src[samples]                                   # (I, 3, 3)
    b = dst[samples]
    ca = a.mean(axis=1, keepdims=True)
    cb = b.mean(axis=1, keepdims=True)
    h = np.einsum("ikj,ikl->ijl", a - ca, b - cb)      # (I, 3, 3)
    u, _, vt = np.linalg.svd(h)
    det = np.linalg.det(np.einsum("ijk,ilk->ijl", vt.transpose(0, 2, 1), u))
    flip = np.repeat(np.eye(3)[None], iters, axis=0)
    flip[:, 2, 2] = np.sign(det)
    r = np.einsum("ijk,ikl,iml->ijm", vt.transpose(0, 2, 1), flip, u)
    t = cb[:, 0, :] - np.einsum("ijk,ik->ij", r, ca[:, 0, :])

    mapped = np.einsum("ijk,nk->inj", r, src) + t[:, None, :]   # (I, N, 3)
    resid = np.linalg.norm(mapped - dst[None], axis=2)
    inlier = resid <= ransac.threshold
    counts = inlier.sum(axis=1)
    # Best sample: most inliers, then lowest inlier residual sum.
    score = counts.astype(float) - 1e-9 * np.where(inlier, resid, 0.0).sum(axis=1)
    best = int(np.argmax(score))

    mask = inlier[best]
    if mask.sum() < 3:
        mask = np.ones(n, dtype=bool)
    try:
        _check_degenerate(src[mask], w[mask])
        tf = _kabsch(src[mask], dst[mask], w[mask])
    except DegenerateCorrespondences:
        tf = _kabsch(src, dst, w)
    res = np.linalg.norm(tf.apply(src) - dst, axis=1)
    return tf, res <= ransac.threshold


def project(point_global, pose: RigidTransform, k: CameraIntrinsics):
    """Project a world point through a camera at ``pose`` (camera-to-global).

    Returns (u, v, depth) in pixels/meters, or None when the point lies
    behind the camera (camera-frame z <= 0). The pixel may fall outside
    the image bounds; use ``in_image`` to test visibility.
    """
    p = pose.inverse().apply(np.asarray(point_global, dtype=float))
    if p[2] <= 0:
        return None
    u = k.fx * p[0] / p[2] + k.cx
    v = k.fy * p[1] / p[2] + k.cy
    return float(u), float(v), float(p[2])


def project_points(points, pose: RigidTransform, k: CameraIntrinsics):
    """Vectorized projection of (N, 3) world points.

    Returns (uvz, in_front): an (N, 3) array of pixel coordinates plus
    camera depth and a boolean mask of points with positive depth. Rows
    with in_front == False contain NaN.
    """
    p = pose.inverse().apply(np.asarray(points, dtype=float))
    in_front = p[:, 2] > 0
    uvz = np.full_like(p, np.nan)
    z = p[in_front, 2]
    uvz[in_front, 0] = k.fx * p[in_front, 0] / z + k.cx
    uvz[in_front, 1] = k.fy * p[in_front, 1] / z + k.cy
    uvz[in_front, 2] = z
    return uvz, in_front


def in_image(u: float, v: float, k: CameraIntrinsics) -> bool:
    return 0 <= u < k.width and 0 <= v < k.height


def backproject(u: float, v: float, depth: float, k: CameraIntrinsics) -> np.ndarray:
    """Inverse pinhole: pixel plus depth to a camera-frame 3D point."""
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidDepth(f"depth must be positive and finite, got {depth}")
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])


def backproject_pixels(uv: np.ndarray, depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Vectorized backprojection of (N, 2) pixels with (N,) depths."""
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (uv[:, 0] - k.cx) / k.fx * depth
    y = (uv[:, 1] - k.cy) / k.fy * depth
    return np.stack([x, y, depth], axis=1)


def bilinear_inverse_depth(depth: np.ndarray, valid: np.ndarray, u: float, v: float):
    """Sub-pixel depth lookup by bilinear interpolation of inverse depth.

    On a planar surface 1/z is linear in pixel coordinates, so this is
    exact away from depth discontinuities. Returns None when any of the
    four neighbors is invalid or out of bounds.
    """
    h, w = depth.shape
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    if u0 < 0 or v0 < 0 or u0 + 1 >= w or v0 + 1 >= h:
        u0 = min(max(u0, 0), w - 1)
        v0 = min(max(v0, 0), h - 1)
        return float(depth[v0, u0]) if valid[v0, u0] else None
    block_d = depth[v0 : v0 + 2, u0 : u0 + 2]
    if not valid[v0 : v0 + 2, u0 : u0 + 2].all() or np.any(block_d <= 0):
        return None
    fu, fv = u - u0, v - v0
    inv = 1.0 / block_d.astype(float)
    top = inv[0, 0] * (1 - fu) + inv[0, 1] * fu
    bot = inv[1, 0] * (1 - fu) + inv[1, 1] * fu
    val = top * (1 - fv) + bot * fv
    return 1.0 / val if val > 0 else None
