"""Robust reprojection least squares: motion-only LM and Schur-complement BA.

Pose increments are 6-vectors ``(w, v)`` applied as ``R <- R Exp(w)``,
``t <- t + v``. Residuals are ``project(R X + t) - observation`` weighted
by ``info = 1 / sigma_level**2``; the Huber kernel acts on chi2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import CameraIntrinsics, Pose, skew, snap_to_so3, so3_exp

CHI2_MONO = 5.991


@dataclass(frozen=True)
class LMConfig:
    huber_delta: float = float(np.sqrt(CHI2_MONO))
    chi2_threshold: float = CHI2_MONO
    initial_lambda: float = 1e-4
    max_lambda: float = 1e10


def reprojection_jacobians(R: np.ndarray, t: np.ndarray, X: np.ndarray, K: CameraIntrinsics):
    """Projections and Jacobians for N observations.

    R (N,3,3), t (N,3), X (N,3). Returns ``(uv, z, J_pose (N,2,6), J_point (N,2,3))``.
    """
    Xc = np.einsum("nij,nj->ni", R, X) + t
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    iz = 1.0 / zs
    uv = np.stack([K.fx * x * iz + K.cx, K.fy * y * iz + K.cy], axis=1)
    Jproj = np.zeros((len(X), 2, 3))
    Jproj[:, 0, 0] = K.fx * iz
    Jproj[:, 0, 2] = -K.fx * x * iz**2
    Jproj[:, 1, 1] = K.fy * iz
    Jproj[:, 1, 2] = -K.fy * y * iz**2
    J_point = Jproj @ R
    J_rot = -J_point @ skew(X)
    J_pose = np.concatenate([J_rot, Jproj], axis=2)
    return uv, z, J_pose, J_point


def huber_rho(chi2: np.ndarray, delta: float) -> np.ndarray:
    d2 = delta * delta
    return np.where(chi2 <= d2, chi2, 2.0 * delta * np.sqrt(np.maximum(chi2, 0.0)) - d2)


def huber_weight(chi2: np.ndarray, delta: float) -> np.ndarray:
    e = np.sqrt(np.maximum(chi2, 1e-300))
    return np.where(e <= delta, 1.0, delta / e)


def _chi2(uv, z, obs, info):
    r = uv - obs
    chi2 = info * np.einsum("ni,ni->n", r, r)
    return r, np.where(z > 0, chi2, np.inf)


# ----------------------------------------------------------------------------
# motion-only
# ----------------------------------------------------------------------------


@dataclass
class PoseOptResult:
    pose: Pose
    inliers: np.ndarray
    chi2: np.ndarray
    history: list[list[float]] = field(default_factory=list)

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _pose_cost(pose: Pose, X, obs, info, active, K, delta):
    if not active.any():
        return 0.0
    uv, z = _project_all(pose, X[active], K)
    _, chi2 = _chi2(uv, z, obs[active], info[active])
    return float(huber_rho(chi2, delta).sum())


def _lm_pose(pose: Pose, X, obs, info, active, K, cfg: LMConfig, iterations: int, history: list):
    n = int(active.sum())
    if n == 0:
        return pose
    Xa, oa, ia = X[active], obs[active], info[active]
    lam = cfg.initial_lambda
    cost = _pose_cost(pose, X, obs, info, active, K, cfg.huber_delta)
    history.append(cost)
    for _ in range(iterations):
        uv, z, Jp, _ = reprojection_jacobians(np.broadcast_to(pose.R, (n, 3, 3)), np.broadcast_to(pose.t, (n, 3)), Xa, K)
        r, chi2 = _chi2(uv, z, oa, ia)
        valid = np.isfinite(chi2)
        w = np.where(valid, huber_weight(np.where(valid, chi2, 0.0), cfg.huber_delta) * ia, 0.0)
        H = np.einsum("nki,n,nkj->ij", Jp, w, Jp)
        g = np.einsum("nki,n,nk->i", Jp, w, r)
        if cost == 0.0 or np.abs(g).max() < 1e-14:
            break
        diag = np.maximum(np.diag(H), 1e-9 * max(np.diag(H).max(), 1e-12))
        accepted = False
        while lam <= cfg.max_lambda:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = pose.retract(step)
            new_cost = _pose_cost(cand, X, obs, info, active, K, cfg.huber_delta)
            if new_cost < cost:
                pose, cost, accepted = cand, new_cost, True
                lam = max(lam / 10.0, 1e-12)
                history.append(cost)
                break
            lam *= 10
        if not accepted or np.linalg.norm(step) < 1e-15:
            break
    return pose


def optimize_pose(pose: Pose, X: np.ndarray, obs: np.ndarray, info: np.ndarray, K: CameraIntrinsics,
                  cfg: LMConfig = LMConfig(), rounds: int = 4, iterations: int = 10) -> PoseOptResult:
    """Motion-only Huber LM with outlier re-classification between rounds."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    obs = np.asarray(obs, dtype=float).reshape(-1, 2)
    info = np.asarray(info, dtype=float).reshape(-1)
    n = len(X)
    uv, z = _project_all(pose, X, K)
    active = np.isfinite(_chi2(uv, z, obs, info)[1])
    history: list[list[float]] = []
    chi2 = np.zeros(n)
    for _ in range(rounds):
        round_hist: list[float] = []
        pose = _lm_pose(pose, X, obs, info, active, K, cfg, iterations, round_hist)
        history.append(round_hist)
        if n == 0:
            break
        uv, z = _project_all(pose, X, K)
        _, chi2 = _chi2(uv, z, obs, info)
        active = chi2 <= cfg.chi2_threshold
        if active.sum() < 3:
            break
    return PoseOptResult(pose, active, chi2, history)


def _project_all(pose: Pose, X, K):
    Xc = X @ pose.R.T + pose.t
    z = Xc[:, 2]
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    uv = np.stack([K.fx * Xc[:, 0] / zs + K.cx, K.fy * Xc[:, 1] / zs + K.cy], axis=1)
    return uv, z


# ----------------------------------------------------------------------------
# bundle adjustment
# ----------------------------------------------------------------------------


@dataclass
class BAResult:
    poses: dict
    points: dict
    outliers: np.ndarray  # boolean per observation
    history: list[list[float]]
    initial_cost: float
    final_cost: float


def _scatter_add(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``vals`` (any trailing shape) into ``n`` bins by ``idx``."""
    shape = vals.shape[1:]
    k = int(np.prod(shape)) if shape else 1
    if len(idx) == 0:
        return np.zeros((n, *shape))
    flat = (idx[:, None] * k + np.arange(k)).ravel()
    return np.bincount(flat, weights=vals.reshape(-1), minlength=n * k).reshape(n, *shape)


class _BAProblem:
    def __init__(self, poses, points, obs_pose, obs_point, obs_uv, obs_info, fixed, K, cfg):
        self.pose_ids = list(poses)
        self.point_ids = list(points)
        pidx = {k: i for i, k in enumerate(self.pose_ids)}
        lidx = {k: i for i, k in enumerate(self.point_ids)}
        self.R = np.stack([poses[k].R for k in self.pose_ids])
        self.t = np.stack([poses[k].t for k in self.pose_ids])
        self.X = np.stack([np.asarray(points[k], dtype=float) for k in self.point_ids]) if self.point_ids else np.zeros((0, 3))
        self.op = np.array([pidx[k] for k in obs_pose], dtype=np.int64)
        self.ol = np.array([lidx[k] for k in obs_point], dtype=np.int64)
        self.uv = np.asarray(obs_uv, dtype=float).reshape(-1, 2)
        self.info = np.asarray(obs_info, dtype=float).reshape(-1)
        self.free = np.array([k not in fixed for k in self.pose_ids])
        self.free_index = np.full(len(self.pose_ids), -1)
        self.free_index[self.free] = np.arange(self.free.sum())
        self.K = K
        self.cfg = cfg

    def residuals(self, R, t, X, active):
        op, ol = self.op[active], self.ol[active]
        uv, z, Jp, Jl = reprojection_jacobians(R[op], t[op], X[ol], self.K)
        r, chi2 = _chi2(uv, z, self.uv[active], self.info[active])
        return r, chi2, Jp, Jl

    def cost(self, R, t, X, active) -> float:
        if not active.any():
            return 0.0
        _, chi2, _, _ = self.residuals(R, t, X, active)
        return float(huber_rho(chi2, self.cfg.huber_delta).sum())

    def chi2_all(self):
        all_obs = np.ones(len(self.op), dtype=bool)
        _, chi2, _, _ = self.residuals(self.R, self.t, self.X, all_obs)
        return chi2

    def linearize(self, active):
        """Gauss-Newton blocks at the current estimate, reused across damping retries."""
        op, ol = self.op[active], self.ol[active]
        r, chi2, Jp, Jl = self.residuals(self.R, self.t, self.X, active)
        valid = np.isfinite(chi2)
        w = np.where(valid, huber_weight(np.where(valid, chi2, 0.0), self.cfg.huber_delta) * self.info[active], 0.0)
        fi = self.free_index[op]
        isfree = fi >= 0
        n_free = int(self.free.sum())
        m = len(self.X)

        JpT = (Jp * w[:, None, None]).transpose(0, 2, 1)
        JlT = (Jl * w[:, None, None]).transpose(0, 2, 1)
        lin = {"n_free": n_free, "m": m}
        lin["Hll"] = _scatter_add(ol, JlT @ Jl, m)
        lin["gl"] = _scatter_add(ol, (JlT @ r[:, :, None])[:, :, 0], m)
        f_obs = np.flatnonzero(isfree)
        lin["Hpp"] = _scatter_add(fi[f_obs], JpT[f_obs] @ Jp[f_obs], n_free)
        lin["gp"] = _scatter_add(fi[f_obs], (JpT[f_obs] @ r[f_obs, :, None])[:, :, 0], n_free)
        if n_free:
            # dense coupling W (6 n_free x 3 p) over the points seen by free poses;
            # windows are local, so this stays small and the Schur product runs in BLAS
            cols, col_of = np.unique(ol[f_obs], return_inverse=True)
            p = len(cols)
            W = _scatter_add(fi[f_obs] * p + col_of, JpT[f_obs] @ Jl[f_obs], n_free * p)
            lin["cols"] = cols
            lin["W"] = W.reshape(n_free, p, 6, 3).transpose(0, 2, 1, 3).reshape(6 * n_free, 3 * p)
        return lin

    def solve_step(self, lin, lam):
        """Damped normal equations solved by eliminating the point blocks."""
        n_free, m = lin["n_free"], lin["m"]
        Hll, Hpp, gl, gp = lin["Hll"], lin["Hpp"], lin["gl"], lin["gp"]
        dll = np.einsum("nii->ni", Hll)
        dpp = np.einsum("nii->ni", Hpp)
        floor = 1e-9 * max(dll.max(initial=0.0), dpp.max(initial=0.0), 1e-12)
        Hll = Hll + lam * np.maximum(dll, floor)[:, :, None] * np.eye(3)
        Hpp = Hpp + lam * np.maximum(dpp, floor)[:, :, None] * np.eye(6)
        Cinv = np.linalg.inv(Hll)

        dp = np.zeros((n_free, 6))
        back = np.zeros((m, 3))
        if n_free:
            cols, W = lin["cols"], lin["W"]
            p = len(cols)
            WC = (W.reshape(6 * n_free, p, 3)[:, :, None, :] @ Cinv[cols][None]).reshape(6 * n_free, 3 * p)
            S = np.zeros((6 * n_free, 6 * n_free))
            for i in range(n_free):
                S[6 * i:6 * i + 6, 6 * i:6 * i + 6] = Hpp[i]
            S -= WC @ W.T
            S = 0.5 * (S + S.T)
            rhs = -gp.reshape(-1) + WC @ gl[cols].reshape(-1)
            try:
                dp = cho_solve(cho_factor(S), rhs).reshape(n_free, 6)
            except np.linalg.LinAlgError:
                dp = np.linalg.lstsq(S, rhs, rcond=None)[0].reshape(n_free, 6)
            back[cols] = (W.T @ dp.reshape(-1)).reshape(p, 3)
        dl = (Cinv @ (-gl - back)[:, :, None])[:, :, 0]
        return dp, dl

    def apply(self, dp, dl):
        R = self.R.copy()
        t = self.t.copy()
        idx = np.flatnonzero(self.free)
        if len(idx):
            R[idx] = R[idx] @ so3_exp(dp[:, :3])
            t[idx] = t[idx] + dp[:, 3:]
        return R, t, self.X + dl

    def run(self, active, iterations, history):
        lam = self.cfg.initial_lambda
        cost = self.cost(self.R, self.t, self.X, active)
        history.append(cost)
        for _ in range(iterations):
            if cost == 0.0:
                break
            accepted = False
            lin = self.linearize(active)
            while lam <= self.cfg.max_lambda:
                dp, dl = self.solve_step(lin, lam)
                R, t, X = self.apply(dp, dl)
                new_cost = self.cost(R, t, X, active)
                if new_cost < cost:
                    self.R, self.t, self.X = R, t, X
                    cost = new_cost
                    history.append(cost)
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    break
                lam *= 10.0
            if not accepted:
                break
            step = max(np.abs(dp).max(initial=0.0), np.abs(dl).max(initial=0.0))
            if step < 1e-15:
                break
        return cost


def bundle_adjust(poses: dict, points: dict, observations, fixed: set, K: CameraIntrinsics,
                  cfg: LMConfig = LMConfig(), stages=(5, 10)) -> BAResult:
    """Jointly refine poses and points.

    ``observations`` is a sequence of ``(pose_id, point_id, uv, info)``.
    Poses listed in ``fixed`` are held constant. Between stages every
    observation with chi2 above the threshold (or negative depth) is
    dropped as an outlier.
    """
    obs = list(observations)
    if not obs:
        return BAResult(dict(poses), dict(points), np.zeros(0, bool), [], 0.0, 0.0)
    prob = _BAProblem(poses, points, [o[0] for o in obs], [o[1] for o in obs],
                      [o[2] for o in obs], [o[3] for o in obs], fixed, K, cfg)
    active = np.isfinite(prob.chi2_all())
    initial = prob.cost(prob.R, prob.t, prob.X, active)
    history: list[list[float]] = []
    final = initial
    for si, iters in enumerate(stages):
        if si > 0:
            chi2 = prob.chi2_all()
            active = chi2 <= cfg.chi2_threshold
        h: list[float] = []
        final = prob.run(active, iters, h)
        history.append(h)
    chi2 = prob.chi2_all()
    outliers = ~(chi2 <= cfg.chi2_threshold)
    new_poses = {k: (Pose(snap_to_so3(prob.R[i]), prob.t[i]) if prob.free[i] else poses[k]) for i, k in enumerate(prob.pose_ids)}
    new_points = {k: prob.X[i].copy() for i, k in enumerate(prob.point_ids)}
    return BAResult(new_poses, new_points, outliers, history, initial, final)
