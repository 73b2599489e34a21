"""Timestamped pose sequences, timestamp association and trajectory files.

Two text formats are understood:

* KITTI: 12 numbers per line, row-major 3x4 camera-to-world matrix. The
  line index is used as timestamp unless ``times`` are supplied.
* TUM: ``timestamp tx ty tz qx qy qz qw`` (camera-to-world).

The format is detected from the column count of the first data line.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import TooFewAssociations, TrajectoryParseError
from .geometry import Pose, SimTransform, project_to_so3, umeyama
from .io_utils import atomic_write_text


class Trajectory:
    """Ordered ``(timestamp, pose, frame_id)`` triples with world->camera poses."""

    def __init__(self, timestamps: Sequence[float], poses: Sequence[Pose], frame_ids: Sequence[int] | None = None):
        self.timestamps = np.asarray(timestamps, dtype=float).reshape(-1)
        self.poses = list(poses)
        if len(self.poses) != len(self.timestamps):
            raise ValueError("timestamps and poses differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if frame_ids is None:
            frame_ids = range(len(self.poses))
        self.frame_ids = np.asarray(list(frame_ids), dtype=np.int64)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Trajectory(self.timestamps[idx], self.poses[idx], self.frame_ids[idx])
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Trajectory(self.timestamps[idx], [self.poses[i] for i in idx], self.frame_ids[idx])

    @property
    def positions(self) -> np.ndarray:
        """Camera centres in world coordinates, (N, 3)."""
        if not self.poses:
            return np.zeros((0, 3))
        R = np.stack([p.R for p in self.poses])
        t = np.stack([p.t for p in self.poses])
        return -np.einsum("nji,nj->ni", R, t)

    def camera_to_world(self) -> np.ndarray:
        """(N, 4, 4) camera-to-world matrices."""
        return np.stack([p.inverse().matrix for p in self.poses]) if self.poses else np.zeros((0, 4, 4))

    def transformed(self, S: SimTransform) -> "Trajectory":
        """Apply a world similarity: camera centres c -> sRc + t, orientations rotated."""
        poses = []
        for p in self.poses:
            Rwc = S.R @ p.R.T
            c = S.apply(p.center)
            poses.append(Pose(Rwc.T, -Rwc.T @ c))
        return Trajectory(self.timestamps.copy(), poses, self.frame_ids.copy())

    def path_length(self) -> float:
        pos = self.positions
        return float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum()) if len(pos) > 1 else 0.0


def associate(est: Trajectory, ref: Trajectory, max_dt: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-timestamp association; each reference stamp is used at most once.

    Returns index arrays ``(i_est, i_ref)`` sorted by estimate time.
    """
    if len(est) == 0 or len(ref) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pos = np.searchsorted(ref.timestamps, est.timestamps)
    lo = np.clip(pos - 1, 0, len(ref) - 1)
    hi = np.clip(pos, 0, len(ref) - 1)
    d_lo = np.abs(ref.timestamps[lo] - est.timestamps)
    d_hi = np.abs(ref.timestamps[hi] - est.timestamps)
    nearest = np.where(d_hi < d_lo, hi, lo)
    dt = np.minimum(d_lo, d_hi)
    i_est, i_ref = [], []
    used = set()
    for i in np.argsort(dt, kind="stable"):
        j = int(nearest[i])
        if dt[i] <= max_dt and j not in used:
            used.add(j)
            i_est.append(int(i))
            i_ref.append(j)
    order = np.argsort(i_est)
    return np.asarray(i_est, dtype=int)[order], np.asarray(i_ref, dtype=int)[order]


def umeyama_align(estimate: Trajectory, reference: Trajectory, with_scale: bool = True,
                  max_dt: float = 0.01, allow_degenerate: bool = False) -> SimTransform:
    """Similarity taking estimated camera centres onto the reference ones."""
    i_est, i_ref = associate(estimate, reference, max_dt)
    if len(i_est) < 3:
        raise TooFewAssociations(f"{len(i_est)} associated poses, need at least 3")
    return umeyama(estimate.positions[i_est], reference.positions[i_ref], with_scale, allow_degenerate)


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------


def _data_lines(path: Path):
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield no, s.replace(",", " ").split()


def read_trajectory(path, times: Sequence[float] | None = None) -> Trajectory:
    """Read a KITTI or TUM trajectory file (auto-detected)."""
    path = Path(path)
    rows = list(_data_lines(path))
    if not rows:
        raise TrajectoryParseError(path, 0, "no pose lines")
    ncol = len(rows[0][1])
    if ncol not in (8, 12):
        raise TrajectoryParseError(path, rows[0][0], f"expected 8 (TUM) or 12 (KITTI) columns, got {ncol}")
    stamps, poses = [], []
    for no, cols in rows:
        if len(cols) != ncol:
            raise TrajectoryParseError(path, no, f"expected {ncol} columns, got {len(cols)}")
        try:
            vals = np.array([float(c) for c in cols])
        except ValueError as exc:
            raise TrajectoryParseError(path, no, str(exc)) from None
        if not np.all(np.isfinite(vals)):
            raise TrajectoryParseError(path, no, "non-finite value")
        if ncol == 12:
            M = vals.reshape(3, 4)
            Rwc = project_to_so3(M[:, :3])
            c = M[:, 3]
            stamps.append(float(len(stamps)))
        else:
            q = vals[4:8]
            if np.linalg.norm(q) < 1e-12:
                raise TrajectoryParseError(path, no, "zero quaternion")
            Rwc = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
            c = vals[1:4]
            stamps.append(vals[0])
        poses.append(Pose(Rwc.T, -Rwc.T @ c))
    if times is not None:
        if len(times) != len(poses):
            raise TrajectoryParseError(path, 0, f"{len(poses)} poses but {len(times)} timestamps")
        stamps = list(times)
    try:
        return Trajectory(stamps, poses)
    except ValueError as exc:
        raise TrajectoryParseError(path, 0, str(exc)) from None


def format_tum(traj: Trajectory) -> str:
    lines = []
    for ts, p in zip(traj.timestamps, traj.poses):
        Rwc = p.R.T
        c = p.center
        q = Rotation.from_matrix(Rwc).as_quat()
        vals = [ts, *c, *q]
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def format_kitti(traj: Trajectory) -> str:
    lines = []
    for p in traj.poses:
        M = p.inverse().matrix[:3, :]
        lines.append(" ".join(f"{v:.17g}" for v in M.reshape(-1)))
    return "\n".join(lines) + ("\n" if lines else "")


def write_trajectory(traj: Trajectory, path, fmt: str = "tum") -> None:
    text = format_tum(traj) if fmt == "tum" else format_kitti(traj)
    atomic_write_text(path, text)


def concat(trajs: Iterable[Trajectory]) -> Trajectory:
    ts, poses, ids = [], [], []
    for t in trajs:
        ts.extend(t.timestamps)
        poses.extend(t.poses)
        ids.extend(t.frame_ids)
    return Trajectory(ts, poses, ids)
