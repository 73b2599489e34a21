"""Trajectory error metrics: ATE after alignment and KITTI-style RPE over
path-length windows, plus multi-run aggregation and report emission."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import TooFewAssociations, TrajectoryTooShort
from .geometry import SimTransform, rotation_angle, umeyama
from .io_utils import atomic_write_text
from .trajectory import Trajectory, associate

KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
# arc-length comparisons tolerate accumulated summation error
LENGTH_TOL = 1e-9


@dataclass
class AteResult:
    rmse: float
    alignment: SimTransform
    i_est: np.ndarray
    i_ref: np.ndarray
    residuals: np.ndarray


def ate_details(est: Trajectory, ref: Trajectory, monocular: bool = True, max_dt: float = 0.01) -> AteResult:
    i_est, i_ref = associate(est, ref, max_dt)
    if len(i_est) < 3:
        raise TooFewAssociations(f"{len(i_est)} associated poses, need at least 3")
    src = est.positions[i_est]
    dst = ref.positions[i_ref]
    # straight-line runs are legitimate input; the residual along the line is still defined
    S = umeyama(src, dst, with_scale=monocular, allow_degenerate=True)
    res = np.linalg.norm(S.apply(src) - dst, axis=1)
    return AteResult(float(np.sqrt(np.mean(res**2))), S, i_est, i_ref, res)


def compute_ate(est: Trajectory, ref: Trajectory, monocular: bool = True, max_dt: float = 0.01) -> float:
    """RMSE of camera-centre residuals after Sim(3) (monocular) or SE(3) alignment."""
    return ate_details(est, ref, monocular, max_dt).rmse


def _cam_to_world(traj: Trajectory, idx: np.ndarray) -> np.ndarray:
    out = np.zeros((len(idx), 4, 4))
    for n, i in enumerate(idx):
        p = traj.poses[int(i)]
        out[n, :3, :3] = p.R.T
        out[n, :3, 3] = -p.R.T @ p.t
        out[n, 3, 3] = 1.0
    return out


def _rel(Ti: np.ndarray, Tj: np.ndarray) -> np.ndarray:
    Ri, ti = Ti[:3, :3], Ti[:3, 3]
    M = np.eye(4)
    M[:3, :3] = Ri.T @ Tj[:3, :3]
    M[:3, 3] = Ri.T @ (Tj[:3, 3] - ti)
    return M


def rpe_samples(est: Trajectory, ref: Trajectory, lengths: Sequence[float] = KITTI_LENGTHS,
                max_dt: float = 0.01, scale: float = 1.0) -> list[tuple[int, float, float, float]]:
    """All ``(start, length, trans_err, rot_err)`` samples.

    For each associated start frame and length, the end frame is the first
    one whose reference arc length from the start reaches the length. Errors
    are per unit length: translation as a fraction, rotation in degrees.
    ``scale`` multiplies estimated translations (monocular scale fix).
    """
    i_est, i_ref = associate(est, ref, max_dt)
    if len(i_est) < 2:
        raise TrajectoryTooShort(f"{len(i_est)} associated poses")
    Te = _cam_to_world(est, i_est)
    Te[:, :3, 3] *= scale
    Tr = _cam_to_world(ref, i_ref)
    steps = np.linalg.norm(np.diff(Tr[:, :3, 3], axis=0), axis=1)
    dist = np.r_[0.0, np.cumsum(steps)]
    out = []
    for a in range(len(dist)):
        for ell in lengths:
            b = int(np.searchsorted(dist, dist[a] + ell - LENGTH_TOL, side="left"))
            if b >= len(dist):
                continue
            E = np.linalg.inv(_rel(Tr[a], Tr[b])) @ _rel(Te[a], Te[b])
            t_err = float(np.linalg.norm(E[:3, 3])) / ell
            r_err = float(np.degrees(rotation_angle(E[:3, :3]))) / ell
            out.append((a, float(ell), t_err, r_err))
    return out


def compute_rpe(est: Trajectory, ref: Trajectory, lengths: Sequence[float] = KITTI_LENGTHS,
                max_dt: float = 0.01, scale: float = 1.0) -> tuple[float, float]:
    """Mean relative pose error: (translation in %, rotation in deg per unit length)."""
    samples = rpe_samples(est, ref, lengths, max_dt, scale)
    if not samples:
        raise TrajectoryTooShort(f"reference path shorter than {min(lengths)}")
    arr = np.asarray([s[2:] for s in samples])
    return float(100.0 * arr[:, 0].mean()), float(arr[:, 1].mean())


def default_lengths(ref: Trajectory, n: int = 8) -> tuple[float, ...]:
    """KITTI-style lengths scaled to a short reference: fractions 1/10..8/10 of its path."""
    total = ref.path_length()
    if total <= 0:
        raise TrajectoryTooShort("reference has zero path length")
    return tuple(total * k / (n + 2) for k in range(1, n + 1))


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------


@dataclass
class MetricReport:
    ate_rmse: float
    rpe_trans: float | None  # percent
    rpe_rot: float | None  # degrees per unit length
    coverage: float
    runs: int = 1
    per_run: list[dict] = field(default_factory=list)
    config: str = ""

    def __post_init__(self):
        for name in ("ate_rmse", "rpe_trans", "rpe_rot"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage must lie in [0, 1], got {self.coverage}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not self.per_run:
            self.per_run = [self.values()]

    def values(self) -> dict:
        return {"ate_rmse": self.ate_rmse, "rpe_trans": self.rpe_trans, "rpe_rot": self.rpe_rot,
                "coverage": self.coverage}


def evaluate(est: Trajectory, ref: Trajectory, monocular: bool = True, lengths: Sequence[float] | None = None,
             max_dt: float = 0.01, config: str = "") -> MetricReport:
    """ATE, RPE and coverage of one run; RPE uses the ATE scale in monocular mode."""
    ate = ate_details(est, ref, monocular, max_dt)
    coverage = len(ate.i_ref) / len(ref)
    lengths = default_lengths(ref) if lengths is None else lengths
    try:
        rt, rr = compute_rpe(est, ref, lengths, max_dt, ate.alignment.scale)
    except TrajectoryTooShort:
        rt = rr = None
    return MetricReport(ate.rmse, rt, rr, coverage, config=config)


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(sum(vals) / len(vals)) if vals else None


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Arithmetic mean of each metric; per-run values are kept."""
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    configs = {r.config for r in reports}
    if len(configs) > 1:
        raise ValueError(f"reports come from different configurations: {sorted(configs)}")
    per_run = [v for r in reports for v in r.per_run]
    return MetricReport(
        ate_rmse=_mean([v["ate_rmse"] for v in per_run]),
        rpe_trans=_mean([v["rpe_trans"] for v in per_run]),
        rpe_rot=_mean([v["rpe_rot"] for v in per_run]),
        coverage=_mean([v["coverage"] for v in per_run]),
        runs=len(per_run),
        per_run=per_run,
        config=reports[0].config,
    )


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.9g}"


def format_report(report: MetricReport) -> str:
    lines = [
        f"config: {report.config}" if report.config else None,
        f"runs: {report.runs}",
        f"ate_rmse: {_fmt(report.ate_rmse)}",
        f"rpe_trans_percent: {_fmt(report.rpe_trans)}",
        f"rpe_rot_deg_per_unit: {_fmt(report.rpe_rot)}",
        f"coverage: {_fmt(report.coverage)}",
    ]
    if report.runs > 1:
        for i, v in enumerate(report.per_run):
            lines.append(f"run_{i}: ate_rmse={_fmt(v['ate_rmse'])} rpe_trans={_fmt(v['rpe_trans'])} "
                         f"rpe_rot={_fmt(v['rpe_rot'])} coverage={_fmt(v['coverage'])}")
    return "\n".join(l for l in lines if l is not None) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if ":" in line:
            k, v = line.split(":", 1)
            out[k.strip()] = v.strip()
    return out


def distortion_table(rows: dict) -> str:
    """Distortion x metric table; ``rows`` maps a label (e.g. gamma) to a report.

    Runs that lost tracking show their partial coverage instead of being dropped.
    """
    header = f"{'distortion':>12} {'ATE':>12} {'RPE_t(%)':>12} {'RPE_r(deg/u)':>14} {'coverage':>9} {'runs':>5}"
    lines = [header]
    for label, r in rows.items():
        lines.append(f"{str(label):>12} {_fmt(r.ate_rmse):>12} {_fmt(r.rpe_trans):>12} {_fmt(r.rpe_rot):>14} "
                     f"{r.coverage:>9.3f} {r.runs:>5d}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, path) -> None:
    atomic_write_text(path, format_report(report))


# ----------------------------------------------------------------------------
# top-down plot
# ----------------------------------------------------------------------------


def trajectory_svg(est: Trajectory, ref: Trajectory, alignment: SimTransform | None = None,
                   size: int = 600) -> str:
    """SVG polylines of the estimate, the reference and the aligned estimate.

    The view plane is spanned by the two axes of largest reference extent.
    """
    ref_p = ref.positions
    curves = {"estimate": est.positions, "reference": ref_p}
    if alignment is not None:
        curves["aligned"] = alignment.apply(est.positions)
    axes = np.sort(np.argsort(np.ptp(ref_p, axis=0) if len(ref_p) else np.zeros(3))[-2:])
    allp = np.vstack([c for c in curves.values() if len(c)] or [np.zeros((1, 3))])[:, axes]
    lo = allp.min(axis=0)
    span = max(float(np.ptp(allp, axis=0).max()), 1e-12)
    margin = 20
    k = (size - 2 * margin) / span
    colors = {"estimate": "#c0392b", "reference": "#2c3e50", "aligned": "#27ae60"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for name, pts in curves.items():
        if not len(pts):
            continue
        xy = (pts[:, axes] - lo) * k + margin
        xy[:, 1] = size - xy[:, 1]
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in xy)
        parts.append(f'<polyline id="{name}" fill="none" stroke="{colors[name]}" stroke-width="1.5" points="{coords}"/>')
    for i, name in enumerate(curves):
        parts.append(f'<text x="{margin}" y="{margin + 14 * i}" font-size="12" fill="{colors[name]}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_plot(est: Trajectory, ref: Trajectory, path, alignment: SimTransform | None = None) -> None:
    atomic_write_text(path, trajectory_svg(est, ref, alignment))
