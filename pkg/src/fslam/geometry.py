"""Rigid and similarity transforms, pinhole projection, two-view geometry.

Convention: a :class:`Pose` maps world coordinates into the camera frame
(T_cw). Camera centres are ``-R.T @ t``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    CollinearDegenerate,
    DegenerateBaseline,
    DegenerateConfiguration,
    InsufficientMatches,
    LowParallax,
    NoConsensus,
    TooFewAssociations,
)

ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; accepts (3,) or (N, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, batched over leading axes."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians (atan2 form, accurate near 0)."""
    c = (np.trace(R) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def project_to_so3(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def snap_to_so3(R: np.ndarray) -> np.ndarray:
    # long composition chains drift off SO(3); snap back before it accumulates
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-12:
        return project_to_so3(R)
    return R


def _check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation is not orthonormal with det +1")


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform world -> camera."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        t = np.array(self.t, dtype=float).reshape(3)
        _check_rotation(R)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray, orthonormalize: bool = False) -> "Pose":
        T = np.asarray(T, dtype=float)
        R = T[:3, :3]
        if orthonormalize:
            R = project_to_so3(R)
        return cls(R, T[:3, 3])

    @classmethod
    def from_rotvec(cls, w, t) -> "Pose":
        return cls(so3_exp(np.asarray(w, dtype=float)), t)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Map world points (3,) or (N, 3) into this frame."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def retract(self, delta: np.ndarray) -> "Pose":
        """Apply a 6-vector increment (rotation axis-angle, translation).

        The rotation part is right-multiplied: R <- R Exp(w); t <- t + v.
        """
        delta = np.asarray(delta, dtype=float)
        return Pose(snap_to_so3(self.R @ so3_exp(delta[:3])), self.t + delta[3:])

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=atol, rtol=0)
            and np.allclose(self.t, other.t, atol=atol, rtol=0)
        )

    def __repr__(self):
        w = so3_log(self.R)
        return f"Pose(rotvec={np.round(w, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying ``b`` first, then ``a``."""
    return Pose(snap_to_so3(a.R @ b.R), a.R @ b.t + a.t)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose of frame b expressed from frame a: ``b @ a.inverse()``."""
    return compose(b, a.inverse())


# ----------------------------------------------------------------------------
# Sim(3)
# ----------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


def _sim3_V(w: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """V = integral_0^1 exp(sigma*tau) Exp(tau*w) dtau, batched.

    Gauss-Legendre quadrature sidesteps the cancellation of the closed form
    near sigma = 0 or |w| = 0.
    """
    V = np.zeros(w.shape[:-1] + (3, 3))
    for tau, weight in zip(_GL_NODES, _GL_WEIGHTS):
        V += (weight * np.exp(sigma * tau))[..., None, None] * so3_exp(tau * w)
    return V


def sim3_exp(xi: np.ndarray):
    """xi = (w[3], u[3], sigma) -> (scale, R, t), batched."""
    xi = np.asarray(xi, dtype=float)
    w, u, sigma = xi[..., :3], xi[..., 3:6], xi[..., 6]
    R = so3_exp(w)
    V = _sim3_V(w, sigma)
    t = np.einsum("...ij,...j->...i", V, u)
    return np.exp(sigma), R, t


def sim3_log(s, R, t) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    batched = R.ndim == 3
    Rb = R if batched else R[None]
    w = Rotation.from_matrix(Rb).as_rotvec()
    if not batched:
        w = w[0]
    sigma = np.log(s)
    V = _sim3_V(w, sigma)
    u = np.linalg.solve(V, t[..., None])[..., 0]
    return np.concatenate([w, u, np.asarray(sigma)[..., None]], axis=-1)


@dataclass(frozen=True, eq=False)
class SimTransform:
    """Similarity x -> scale * R @ x + t."""

    scale: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        t = np.array(self.t, dtype=float).reshape(3)
        _check_rotation(R, tol=1e-7)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "SimTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_pose(cls, pose: Pose) -> "SimTransform":
        return cls(1.0, pose.R, pose.t)

    @classmethod
    def exp(cls, xi) -> "SimTransform":
        s, R, t = sim3_exp(xi)
        return cls(float(s), R, t)

    def log(self) -> np.ndarray:
        return sim3_log(self.scale, self.R, self.t)

    def to_pose(self) -> Pose:
        """Rigid pose of a camera whose world->camera similarity is self."""
        return Pose(self.R, self.t / self.scale)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.R
        T[:3, 3] = self.t
        return T

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.scale * (X @ self.R.T) + self.t

    def inverse(self) -> "SimTransform":
        inv_s = 1.0 / self.scale
        return SimTransform(inv_s, self.R.T, -inv_s * (self.R.T @ self.t))

    def __matmul__(self, other: "SimTransform") -> "SimTransform":
        return SimTransform(
            self.scale * other.scale,
            self.R @ other.R,
            self.scale * (self.R @ other.t) + self.t,
        )

    def allclose(self, other: "SimTransform", atol: float = 1e-9) -> bool:
        return bool(
            abs(self.scale - other.scale) <= atol
            and np.allclose(self.R, other.R, atol=atol, rtol=0)
            and np.allclose(self.t, other.t, atol=atol, rtol=0)
        )

    def __repr__(self):
        return (
            f"SimTransform(scale={self.scale:.9g}, rotvec={np.round(so3_log(self.R), 9).tolist()}, "
            f"t={np.round(self.t, 9).tolist()})"
        )


# ----------------------------------------------------------------------------
# Camera
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        """Pixels -> normalized image coordinates."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def denormalize(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack([xy[..., 0] * self.fx + self.cx, xy[..., 1] * self.fy + self.cy], axis=-1)

    def in_image(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] < self.width - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] < self.height - margin)
        )


class Visibility(Enum):
    VISIBLE = "visible"
    BEHIND_CAMERA = "behind-camera"
    OUT_OF_VIEW = "out-of-view"


def project(point, pose: Pose, K: CameraIntrinsics):
    """Pinhole projection of one landmark.

    Returns ``(uv, visibility)``. ``uv`` is None when the point is behind the
    camera; for out-of-view points the (off-image) pixel is still returned.
    """
    Xc = pose.transform(np.asarray(point, dtype=float))
    if Xc[2] <= 0:
        return None, Visibility.BEHIND_CAMERA
    uv = np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])
    if not K.in_image(uv):
        return uv, Visibility.OUT_OF_VIEW
    return uv, Visibility.VISIBLE


def project_points(X: np.ndarray, pose: Pose, K: CameraIntrinsics):
    """Vectorized projection. Returns (uv (N,2), depth (N,))."""
    Xc = pose.transform(np.asarray(X, dtype=float).reshape(-1, 3))
    z = Xc[:, 2]
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    uv = np.stack([K.fx * Xc[:, 0] / zs + K.cx, K.fy * Xc[:, 1] / zs + K.cy], axis=1)
    return uv, z


# ----------------------------------------------------------------------------
# Triangulation
# ----------------------------------------------------------------------------


def triangulate_normalized(x1: np.ndarray, x2: np.ndarray, pose1: Pose, pose2: Pose) -> np.ndarray:
    """Linear DLT triangulation of normalized observations, batched (N, 2)."""
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    P1 = np.hstack([pose1.R, pose1.t[:, None]])
    P2 = np.hstack([pose2.R, pose2.t[:, None]])
    A = np.empty((len(x1), 4, 4))
    A[:, 0] = x1[:, 0:1] * P1[2] - P1[0]
    A[:, 1] = x1[:, 1:2] * P1[2] - P1[1]
    A[:, 2] = x2[:, 0:1] * P2[2] - P2[0]
    A[:, 3] = x2[:, 1:2] * P2[2] - P2[1]
    # row scaling improves conditioning without changing the null vector
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1]
    w = Xh[:, 3]
    w = np.where(np.abs(w) < 1e-300, 1e-300, w)
    return Xh[:, :3] / w[:, None]


def parallax_angles(X: np.ndarray, c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    """Angle in radians between the rays from two centres to each point."""
    r1 = X - c1
    r2 = X - c2
    cos = np.sum(r1 * r2, axis=-1) / (np.linalg.norm(r1, axis=-1) * np.linalg.norm(r2, axis=-1) + 1e-300)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def ray_parallax(x1: np.ndarray, x2: np.ndarray, pose1: Pose, pose2: Pose) -> np.ndarray:
    """Angle between the two viewing rays in world frame, from normalized coords."""
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    r1 = np.hstack([x1, np.ones((len(x1), 1))]) @ pose1.R
    r2 = np.hstack([x2, np.ones((len(x2), 1))]) @ pose2.R
    cos = np.sum(r1 * r2, axis=1) / (np.linalg.norm(r1, axis=1) * np.linalg.norm(r2, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def triangulate(obs1, obs2, pose1: Pose, pose2: Pose, K: CameraIntrinsics, min_parallax_deg: float = 1.0) -> np.ndarray:
    """Triangulate one landmark from two pixel observations.

    Raises DegenerateBaseline / LowParallax instead of returning a point.
    """
    if np.linalg.norm(pose1.center - pose2.center) < 1e-12:
        raise DegenerateBaseline("camera centres coincide")
    x1 = K.normalize(np.asarray(obs1, dtype=float))
    x2 = K.normalize(np.asarray(obs2, dtype=float))
    angle = ray_parallax(x1, x2, pose1, pose2)[0]
    if np.degrees(angle) < min_parallax_deg:
        raise LowParallax(f"parallax {np.degrees(angle):.4f} deg below {min_parallax_deg} deg")
    return triangulate_normalized(x1, x2, pose1, pose2)[0]


# ----------------------------------------------------------------------------
# Two-view estimation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    threshold: float = 1e-3  # normalized image units
    min_inlier_ratio: float = 0.5
    seed: int = 0


SCORE_LEVELS = 6  # decades below the threshold scored during hypothesis selection


def _hartley(x: np.ndarray):
    mean = x.mean(axis=0)
    d = np.sqrt(((x - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])
    xh = np.hstack([x, np.ones((len(x), 1))]) @ T.T
    return xh, T


def eight_point_essential(x1: np.ndarray, x2: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Normalized 8-point estimate of E from normalized coordinates (N >= 8).

    Optional per-correspondence ``weights`` scale the squared algebraic residuals.
    """
    h1, T1 = _hartley(x1)
    h2, T2 = _hartley(x2)
    A = np.einsum("ni,nj->nij", h2, h1).reshape(-1, 9)
    if weights is not None:
        A = A * np.sqrt(weights)[:, None]
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    E = T2.T @ E @ T1
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _sampson_parts(E: np.ndarray, x1: np.ndarray, x2: np.ndarray):
    h1 = np.hstack([x1, np.ones((len(x1), 1))])
    h2 = np.hstack([x2, np.ones((len(x2), 1))])
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=1) ** 2
    den = np.maximum(Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2, 1e-300)
    return num, den


def sampson_distance(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    num, den = _sampson_parts(E, x1, x2)
    return np.sqrt(num / den)


def msac_cost(E: np.ndarray, x1: np.ndarray, x2: np.ndarray, threshold: float, levels: int = 1) -> float:
    """Squared Sampson distances truncated at ``threshold``, in units of threshold**2.

    With ``levels > 1`` the cost is summed over thresholds shrinking by 10x
    per level, which favours hypotheses whose inliers are fitted far more
    tightly than the threshold demands.
    """
    num, den = _sampson_parts(E, x1, x2)
    d2 = num / den
    return float(sum(np.minimum(d2 / (threshold * 10.0**-k) ** 2, 1.0).sum() for k in range(levels)))


def _local_refit(E: np.ndarray, x1: np.ndarray, x2: np.ndarray, threshold: float, iterations: int = 5) -> np.ndarray:
    """Refit E on the correspondences within a band scaled to the residual
    spread of its consensus set.

    A contaminant just inside ``threshold`` still lies far outside that band
    when the inliers are precise.
    """
    band = 0.0
    for _ in range(iterations):
        d = sampson_distance(E, x1, x2)
        mask = d < threshold
        if mask.sum() < 8:
            break
        # never tighten: refits overfit the band they were fitted on
        band = max(band, min(threshold, 3.0 * 1.4826 * float(np.median(d[mask]))))
        tight = d <= band
        if tight.sum() < 8:
            break
        E_new = eight_point_essential(x1[tight], x2[tight])
        if (sampson_distance(E_new, x1, x2) < threshold).sum() < mask.sum():
            break
        converged = np.abs(E_new - E).max() < 1e-14 or np.abs(E_new + E).max() < 1e-14
        E = E_new
        if converged:
            break
    return E


def decompose_essential(E: np.ndarray) -> list[Pose]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    t = U[:, 2]
    Ra = U @ W @ Vt
    Rb = U @ W.T @ Vt
    return [Pose(Ra, t), Pose(Ra, -t), Pose(Rb, t), Pose(Rb, -t)]


def estimate_two_view(pts1, pts2, K: CameraIntrinsics, ransac: RansacConfig = RansacConfig()):
    """Relative pose of view 2 w.r.t. view 1 from pixel correspondences.

    Returns ``(pose, inlier_mask)`` where ``pose`` maps view-1 camera
    coordinates to view-2 camera coordinates with a unit-norm translation.
    """
    pts1 = np.asarray(pts1, dtype=float).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=float).reshape(-1, 2)
    n = len(pts1)
    if n < 8:
        raise InsufficientMatches(f"{n} matches, need at least 8")
    x1 = K.normalize(pts1)
    x2 = K.normalize(pts2)

    # MSAC with local optimization: every new best hypothesis is refitted on
    # its consensus set, and candidates are ranked by truncated cost rather
    # than inlier count, so an exact fit beats one that absorbs an outlier
    rng = np.random.default_rng(ransac.seed)
    best_cost = np.inf
    for _ in range(ransac.iterations):
        idx = rng.choice(n, size=8, replace=False)
        E = eight_point_essential(x1[idx], x2[idx])
        cost = msac_cost(E, x1, x2, ransac.threshold, SCORE_LEVELS)
        if cost < best_cost:
            best_cost, best_E = cost, E
            E = _local_refit(E, x1, x2, ransac.threshold)
            cost = msac_cost(E, x1, x2, ransac.threshold, SCORE_LEVELS)
            if cost < best_cost:
                best_cost, best_E = cost, E
    E = _local_refit(best_E, x1, x2, ransac.threshold)
    mask = sampson_distance(E, x1, x2) < ransac.threshold
    if mask.sum() < 8 or mask.sum() < ransac.min_inlier_ratio * n:
        raise NoConsensus(f"inlier ratio {mask.sum() / n:.3f} below {ransac.min_inlier_ratio}")

    ident = Pose.identity()
    counts = []
    for cand in decompose_essential(E):
        X = triangulate_normalized(x1[mask], x2[mask], ident, cand)
        z1 = X[:, 2]
        z2 = cand.transform(X)[:, 2]
        counts.append(int(np.sum((z1 > 0) & (z2 > 0) & np.isfinite(z1))))
    order = np.argsort(counts)[::-1]
    best, second = counts[order[0]], counts[order[1]]
    if best == second or best <= mask.sum() // 2:
        raise DegenerateConfiguration(f"cheirality test inconclusive (counts {counts})")
    pose = decompose_essential(E)[order[0]]
    return Pose(pose.R, pose.t / np.linalg.norm(pose.t)), mask


# ----------------------------------------------------------------------------
# Alignment
# ----------------------------------------------------------------------------


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True, allow_degenerate: bool = False) -> SimTransform:
    """Least-squares similarity (or rigid) transform taking ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise TooFewAssociations(f"{n} associated positions, need at least 3")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    if not allow_degenerate:
        for pts in (cs, cd):
            sv = np.linalg.svd(pts, compute_uv=False)
            if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
                raise CollinearDegenerate("positions are collinear")
    cov = cd.T @ cs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = (cs**2).sum() / n
    scale = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - scale * R @ mu_s
    return SimTransform(scale, R, t)


def alignment_objective(T: SimTransform, src: np.ndarray, dst: np.ndarray) -> float:
    return float(np.sum((T.apply(src) - dst) ** 2))


# ----------------------------------------------------------------------------
# PnP
# ----------------------------------------------------------------------------


def pnp_dlt(X: np.ndarray, x: np.ndarray) -> Pose:
    """Linear pose from >= 6 world points and normalized observations."""
    X = np.asarray(X, dtype=float)
    x = np.asarray(x, dtype=float)
    mu = X.mean(axis=0)
    s = np.sqrt(((X - mu) ** 2).sum(axis=1)).mean()
    s = s if s > 0 else 1.0
    Xn = np.hstack([(X - mu) / s, np.ones((len(X), 1))])
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -x[:, 0:1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -x[:, 1:2] * Xn
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4)
    T = np.eye(4)
    T[:3, :3] /= s
    T[:3, 3] = -mu / s
    P = P @ T
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    U, S, Vt = np.linalg.svd(M)
    R = U @ Vt
    lam = S.mean()
    return Pose(R, P[:, 3] / lam)


def pnp_ransac(X, uv, K: CameraIntrinsics, threshold_px: float = 2.45, iterations: int = 200, seed: int = 0):
    """Robust PnP. Returns (pose, inlier mask) or (None, empty mask)."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 6:
        return None, np.zeros(n, dtype=bool)
    x = K.normalize(uv)
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, -1
    for _ in range(iterations):
        idx = rng.choice(n, size=6, replace=False)
        try:
            pose = pnp_dlt(X[idx], x[idx])
        except (np.linalg.LinAlgError, ValueError):
            continue
        proj, z = project_points(X, pose, K)
        mask = (z > 0) & (np.linalg.norm(proj - uv, axis=1) < threshold_px)
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_pose = count, mask, pose
            if count == n:
                break
    if best_mask is None or best_count < 6:
        return None, np.zeros(n, dtype=bool)
    pose = pnp_dlt(X[best_mask], x[best_mask])
    proj, z = project_points(X, pose, K)
    mask = (z > 0) & (np.linalg.norm(proj - uv, axis=1) < threshold_px)
    if mask.sum() < best_count:
        return best_pose, best_mask
    return pose, mask
