"""Independent reference implementations used as test oracles. They share no
code with the package beyond the Pose and Trajectory containers."""
import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from fslam.geometry import Pose, so3_exp
from fslam.optim import reprojection_jacobians
from fslam.trajectory import Trajectory


def random_trajectory(rng, n=50, step=1.0, turn=0.1, t0=0.0):
    """Random walk with smooth heading changes; camera-to-world built explicitly."""
    poses, c, R = [], np.zeros(3), np.eye(3)
    for _ in range(n):
        poses.append(Pose(R.T, -R.T @ c))
        R = R @ Rotation.from_rotvec(rng.normal(scale=turn, size=3)).as_matrix()
        c = c + R @ np.array([0.0, 0.0, step * rng.uniform(0.5, 1.5)])
    return Trajectory(t0 + np.arange(n) * 0.1, poses)


def perturb(traj, rng, sigma_t=0.02, sigma_r=0.01):
    """Per-step perturbation of relative motions (drift accumulates)."""
    C = [np.linalg.inv(p.matrix) for p in traj.poses]
    out = [C[0]]
    for a, b in zip(C, C[1:]):
        rel = np.linalg.inv(a) @ b
        D = np.eye(4)
        D[:3, :3] = Rotation.from_rotvec(rng.normal(scale=sigma_r, size=3)).as_matrix()
        D[:3, 3] = rng.normal(scale=sigma_t, size=3)
        out.append(out[-1] @ rel @ D)
    poses = [Pose(M[:3, :3].T, -M[:3, :3].T @ M[:3, 3]) for M in out]
    return Trajectory(traj.timestamps.copy(), poses)


def exhaustive_rpe(est, ref, lengths, scale=1.0):
    """Every (start, length) pair by forward scan of the reference arc length."""
    Ce = [np.linalg.inv(p.matrix) for p in est.poses]
    Cr = [np.linalg.inv(p.matrix) for p in ref.poses]
    for M in Ce:
        M[:3, 3] *= scale
    t_errs, r_errs = [], []
    for i in range(len(Cr)):
        for ell in lengths:
            arc, j = 0.0, i
            while j + 1 < len(Cr) and arc < ell:
                arc += np.linalg.norm(Cr[j + 1][:3, 3] - Cr[j][:3, 3])
                j += 1
            if arc < ell:
                continue
            E = np.linalg.inv(np.linalg.inv(Cr[i]) @ Cr[j]) @ (np.linalg.inv(Ce[i]) @ Ce[j])
            cos = np.clip((np.trace(E[:3, :3]) - 1) / 2, -1, 1)
            t_errs.append(np.linalg.norm(E[:3, 3]) / ell)
            r_errs.append(np.degrees(np.arccos(cos)) / ell)
    return 100 * float(np.mean(t_errs)), float(np.mean(r_errs))


def brute_force_rigid_ate(src, dst, grid=9):
    """Minimum RMSE over rotations (coarse rotation-vector grid, then local
    refinement from the best cells); translation is the centroid offset."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)

    def rmse(w):
        R = Rotation.from_rotvec(w).as_matrix()
        Y = src @ R.T
        t = dst.mean(0) - Y.mean(0)
        return float(np.sqrt(np.mean(np.sum((Y + t - dst) ** 2, axis=1))))

    axis = np.linspace(-np.pi, np.pi, grid)
    cells = [np.array([a, b, c]) for a in axis for b in axis for c in axis if np.linalg.norm([a, b, c]) <= np.pi]
    starts = sorted(cells, key=rmse)[:10]
    best = min(minimize(rmse, w, method="Nelder-Mead",
                        options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000}).fun for w in starts)
    return best


def numeric_jacobians(R, t, X, K, h=1e-6):
    """Central differences of the projection w.r.t. (w, v) under R Exp(w), t + v, and X."""
    def proj(R_, t_, X_):
        uv, _, _, _ = reprojection_jacobians(R_[None], t_[None], X_[None], K)
        return uv[0]

    Jp = np.zeros((2, 6))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        Jp[:, i] = (proj(R @ so3_exp(e), t, X) - proj(R @ so3_exp(-e), t, X)) / (2 * h)
        Jp[:, 3 + i] = (proj(R, t + e, X) - proj(R, t - e, X)) / (2 * h)
    Jx = np.zeros((2, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        Jx[:, i] = (proj(R, t, X + e) - proj(R, t, X - e)) / (2 * h)
    return Jp, Jx


def random_jacobian_config(rng):
    w = rng.normal(size=3)
    w *= rng.uniform(0, np.pi) / np.linalg.norm(w)
    pose = Pose(so3_exp(w), rng.normal(size=3))
    Xc = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(2, 10)])
    return pose.R, pose.t, pose.inverse().transform(Xc)


def relative_error(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)
