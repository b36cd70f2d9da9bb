"""Rigid poses, pinhole projection, box-corner targets and PnP."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class ProjectionError(ValueError):
    """A point lies at or behind the camera plane."""


class PnPError(RuntimeError):
    def __init__(self, msg: str, best_pose: "Pose | None" = None):
        super().__init__(msg)
        self.best_pose = best_pose


@dataclass(frozen=True, eq=False)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Object-frame points (..., 3) to camera frame."""
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.R.reshape(-1), self.t])

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:9].reshape(3, 3), a[9:12])

    def same_as(self, other: "Pose") -> bool:
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 32.0
    cy: float = 32.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CornerSet:
    """The 8 corners of an origin-centred box, ordered lexicographically by
    coordinate sign (x, then y, then z; negative first)."""

    half_extents: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise ValueError("box half extents must be positive")
        object.__setattr__(self, "half_extents", h)

    @property
    def points(self) -> np.ndarray:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
        return signs * self.half_extents

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(2.0 * self.half_extents))


def project_points(X: np.ndarray, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Project object-frame points (n, 3) to pixels (n, 2)."""
    Xc = pose.transform(np.atleast_2d(X))
    z = Xc[:, 2]
    if np.any(z <= 1e-6):
        raise ProjectionError(f"point at or behind the camera plane (z={z.min():.3g})")
    u = K.fx * Xc[:, 0] / z + K.cx
    v = K.fy * Xc[:, 1] / z + K.cy
    return np.stack([u, v], axis=1)


def project_point(X, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    return project_points(np.asarray(X, dtype=np.float64).reshape(1, 3), pose, K)[0]


def normalize_pixels(uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    return np.stack([(uv[:, 0] - K.cx) / (K.width / 2.0), (uv[:, 1] - K.cy) / (K.height / 2.0)], axis=1)


def denormalize_targets(targets, K: CameraIntrinsics) -> np.ndarray:
    """16-vector of normalized corner coordinates back to (8, 2) pixels."""
    q = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    return np.stack([q[:, 0] * (K.width / 2.0) + K.cx, q[:, 1] * (K.height / 2.0) + K.cy], axis=1)


def corner_targets(pose: Pose, corners: CornerSet, K: CameraIntrinsics) -> np.ndarray:
    return normalize_pixels(project_points(corners.points, pose, K), K).reshape(-1)


def keypoint3d_targets(pose: Pose, corners: CornerSet, z_ref: float) -> np.ndarray:
    if z_ref <= 0:
        raise ValueError("z_ref must be positive")
    return (pose.transform(corners.points) / z_ref).reshape(-1)


# -- rotations ----------------------------------------------------------------

def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * W @ W


def rotation_about(axis, degrees: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    return axis_angle_to_matrix(a / np.linalg.norm(a) * np.deg2rad(degrees))


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Orthonormal polar factor of M with det = +1."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R)
    return R.shape == (3, 3) and np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1) < tol


def rotation_error_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# -- PnP ------------------------------------------------------------------------

LM_LAMBDA0 = 1e-3
LM_LAMBDA_MAX = 1e10
LM_MAX_ITERS = 100
LM_MIN_DECREASE = 1e-12


def _hartley(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity T so that T @ [p, 1] is centred with mean distance sqrt(dim)."""
    dim = pts.shape[1]
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = np.sqrt(dim) / d
    T = np.eye(dim + 1)
    T[:dim, :dim] *= s
    T[:dim, dim] = -s * c
    return T, (pts - c) * s


def dlt_pose(points3d: np.ndarray, points2d: np.ndarray, K: CameraIntrinsics) -> Pose:
    """Linear pose estimate: DLT for P = K [R | t], then orthonormalize."""
    n = len(points3d)
    T3, X = _hartley(points3d)
    T2, x = _hartley(points2d)
    A = np.zeros((2 * n, 12))
    Xh = np.hstack([X, np.ones((n, 1))])
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -x[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -x[:, 1:2] * Xh
    _, _, Vt = np.linalg.svd(A)
    Pn = Vt[-1].reshape(3, 4)
    P = np.linalg.inv(T2) @ Pn @ T3
    M = np.linalg.inv(K.K) @ P
    if np.linalg.det(M[:, :3]) < 0:
        M = -M
    A3 = M[:, :3]
    scale = np.cbrt(np.linalg.det(A3))
    R = nearest_rotation(A3 / scale)
    t = M[:, 3] / scale
    pose = Pose(R, t)
    if np.mean(pose.transform(points3d)[:, 2]) < 0:
        raise PnPError("DLT produced a pose with the points behind the camera")
    return pose


def _residuals(pose: Pose, points3d, points2d, K) -> np.ndarray:
    Xc = pose.transform(points3d)
    z = Xc[:, 2]
    if np.any(z <= 1e-6):
        return None
    u = K.fx * Xc[:, 0] / z + K.cx
    v = K.fy * Xc[:, 1] / z + K.cy
    return np.stack([u, v], axis=1).reshape(-1) - points2d.reshape(-1)


def _jacobian(pose: Pose, points3d, K) -> np.ndarray:
    """d(projection)/d(axis-angle increment applied on the left, translation)."""
    RX = points3d @ pose.R.T
    Xc = RX + pose.t
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    n = len(points3d)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = K.fx / z
    dproj[:, 0, 2] = -K.fx * x / z**2
    dproj[:, 1, 1] = K.fy / z
    dproj[:, 1, 2] = -K.fy * y / z**2
    dXc = np.zeros((n, 3, 6))
    # d(exp([w]) R X)/dw at w = 0 is -[R X]_x
    dXc[:, :, :3] = -np.array([skew(p) for p in RX])
    dXc[:, :, 3:] = np.eye(3)
    return np.einsum("nij,njk->nik", dproj, dXc).reshape(2 * n, 6)


def reprojection_error(pose: Pose, points3d, points2d, K) -> float:
    """Mean pixel distance between projected model points and observations."""
    proj = project_points(points3d, pose, K)
    return float(np.linalg.norm(proj - np.asarray(points2d).reshape(-1, 2), axis=1).mean())


def refine_pose_lm(pose: Pose, points3d, points2d, K: CameraIntrinsics) -> Pose:
    r = _residuals(pose, points3d, points2d, K)
    if r is None:
        raise PnPError("initial pose places points behind the camera", pose)
    err = float(r @ r)
    lam = LM_LAMBDA0
    for _ in range(LM_MAX_ITERS):
        J = _jacobian(pose, points3d, K)
        JtJ = J.T @ J
        grad = J.T @ r
        improved = False
        while lam <= LM_LAMBDA_MAX:
            step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -grad)
            cand = Pose(axis_angle_to_matrix(step[:3]) @ pose.R, pose.t + step[3:])
            rc = _residuals(cand, points3d, points2d, K)
            if rc is not None and float(rc @ rc) < err:
                improved = True
                break
            lam *= 10.0
        if not improved:
            # no descent step at any damping: fine at a stationary point or at the
            # roundoff floor, divergence otherwise
            at_floor = err < 1e-16 * len(r)
            if not at_floor and np.linalg.norm(grad) > 1e-6 * np.linalg.norm(J) * np.sqrt(err):
                raise PnPError("Levenberg-Marquardt diverged", pose)
            return pose
        new_err = float(rc @ rc)
        decrease = err - new_err
        pose, r, err = cand, rc, new_err
        lam = max(lam / 10.0, 1e-12)
        if decrease < LM_MIN_DECREASE:
            break
    pose = Pose(nearest_rotation(pose.R), pose.t)
    return pose


def solve_pnp(points3d, points2d, K: CameraIntrinsics, refine: bool = True) -> Pose:
    points3d = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    points2d = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(points3d) < 6 or len(points3d) != len(points2d):
        raise PnPError(f"need >= 6 matching correspondences, got {len(points3d)}/{len(points2d)}")
    if not (np.all(np.isfinite(points3d)) and np.all(np.isfinite(points2d))):
        raise PnPError("non-finite correspondences")
    sv = np.linalg.svd(points3d - points3d.mean(axis=0), compute_uv=False)
    if sv[-1] < 1e-9 * sv[0]:
        raise PnPError("degenerate configuration: 3D points are coplanar or collinear")
    sv2 = np.linalg.svd(points2d - points2d.mean(axis=0), compute_uv=False)
    if not sv2[-1] > 1e-9 * max(sv2[0], 1.0):
        raise PnPError("degenerate configuration: image points are collinear or coincident")
    try:
        pose = dlt_pose(points3d, points2d, K)
        if refine:
            pose = refine_pose_lm(pose, points3d, points2d, K)
    except np.linalg.LinAlgError as exc:
        raise PnPError(f"linear algebra failure: {exc}") from None
    return pose
