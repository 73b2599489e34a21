"""Sequence sources: KITTI odometry, EuRoC MAV and a synthetic scene generator.

A :class:`SequenceSource` yields :class:`FrameData` lazily. Real datasets
provide images; the synthetic generator provides precomputed features (and
can also render images for the built-in extractor).
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .errors import ConfigError, CountMismatch, MalformedCalibration, MissingFiles
from .features import Descriptors, Keypoints
from .geometry import CameraIntrinsics, Pose, project_points
from .imaging import list_images, read_image
from .trajectory import Trajectory, read_trajectory


class FrameData(NamedTuple):
    frame_id: int
    timestamp: float
    image: np.ndarray | None = None
    keypoints: Keypoints | None = None
    descriptors: Descriptors | None = None
    landmark_ids: np.ndarray | None = None  # synthetic only; -1 for none


@dataclass
class SequenceSource:
    name: str
    intrinsics: CameraIntrinsics
    timestamps: np.ndarray
    ground_truth: Trajectory | None
    _loader: Callable[[int], FrameData] = field(repr=False)

    def __len__(self):
        return len(self.timestamps)

    def __iter__(self) -> Iterator[FrameData]:
        for i in range(len(self)):
            yield self._loader(i)

    def frame(self, i: int) -> FrameData:
        return self._loader(i)


# ----------------------------------------------------------------------------
# KITTI
# ----------------------------------------------------------------------------


def _parse_kitti_calib(path: Path) -> np.ndarray:
    for line in path.read_text().splitlines():
        key, _, rest = line.partition(":")
        if key.strip() == "P0":
            try:
                vals = [float(v) for v in rest.split()]
            except ValueError as exc:
                raise MalformedCalibration(f"{path}: {exc}") from None
            if len(vals) != 12:
                raise MalformedCalibration(f"{path}: P0 has {len(vals)} values, expected 12")
            return np.array(vals).reshape(3, 4)
    raise MalformedCalibration(f"{path}: no P0 row")


def load_kitti(root, sequence: str | None = None) -> SequenceSource:
    """KITTI odometry layout: ``sequences/<seq>/{image_0,times.txt,calib.txt}``.

    ``root`` may also point directly at the sequence directory. Ground truth
    is read from ``poses/<seq>.txt`` (next to ``sequences``) or
    ``<seq dir>/poses.txt`` when present.
    """
    root = Path(root)
    candidates = []
    if sequence is not None:
        candidates += [root / "sequences" / sequence, root / sequence]
    candidates.append(root)
    seq_dir = next((c for c in candidates if (c / "image_0").is_dir()), None)
    if seq_dir is None:
        raise MissingFiles(f"no image_0/ directory under {root}")
    for name in ("times.txt", "calib.txt"):
        if not (seq_dir / name).is_file():
            raise MissingFiles(f"{seq_dir / name} is missing")
    P0 = _parse_kitti_calib(seq_dir / "calib.txt")
    images = list_images(seq_dir / "image_0")
    try:
        times = np.loadtxt(seq_dir / "times.txt", ndmin=1, dtype=float)
    except ValueError as exc:
        raise MalformedCalibration(f"times.txt: {exc}") from None
    if len(times) != len(images):
        raise CountMismatch(f"{len(times)} timestamps but {len(images)} images")
    if not images:
        raise MissingFiles(f"no images in {seq_dir / 'image_0'}")
    h, w = read_image(images[0]).shape
    try:
        K = CameraIntrinsics(P0[0, 0], P0[1, 1], P0[0, 2], P0[1, 2], w, h)
    except ValueError as exc:
        raise MalformedCalibration(f"{seq_dir / 'calib.txt'}: {exc}") from None

    gt = None
    seq_name = sequence or seq_dir.name
    for p in (seq_dir.parent.parent / "poses" / f"{seq_name}.txt", root / "poses" / f"{seq_name}.txt",
              seq_dir / "poses.txt"):
        if p.is_file():
            gt = read_trajectory(p, times=times)
            break

    def loader(i: int) -> FrameData:
        return FrameData(i, float(times[i]), read_image(images[i]))

    return SequenceSource(f"kitti-{seq_name}", K, times, gt, loader)


# ----------------------------------------------------------------------------
# EuRoC
# ----------------------------------------------------------------------------


def ns_to_seconds(ns) -> np.ndarray:
    """Integer nanoseconds to float seconds, splitting off whole seconds first
    so the conversion rounds once rather than twice."""
    ns = np.asarray(ns, dtype=np.int64)
    return (ns // 10**9).astype(np.float64) + (ns % 10**9).astype(np.float64) / 1e9


def _read_yaml(path: Path) -> dict:
    text = path.read_text()
    if text.startswith("%YAML"):
        text = text.split("\n", 1)[1]
    return yaml.safe_load(text)


def load_euroc(root, camera: str = "cam0") -> SequenceSource:
    """EuRoC ASL layout rooted at the directory containing ``mav0``.

    Ground-truth body poses (T_WB) are composed with the camera extrinsic
    T_BS so the returned trajectory describes the camera.
    """
    root = Path(root)
    mav = root / "mav0" if (root / "mav0").is_dir() else root
    cam = mav / camera
    data_csv = cam / "data.csv"
    sensor = cam / "sensor.yaml"
    if not data_csv.is_file():
        raise MissingFiles(f"{data_csv} is missing")
    if not sensor.is_file():
        raise MissingFiles(f"{sensor} is missing")
    try:
        calib = _read_yaml(sensor)
        fu, fv, cu, cv = (float(v) for v in calib["intrinsics"])
        w, h = (int(v) for v in calib["resolution"])
        T_BS = np.array(calib["T_BS"]["data"], dtype=float).reshape(4, 4)
        K = CameraIntrinsics(fu, fv, cu, cv, w, h)
    except (KeyError, TypeError, ValueError, yaml.YAMLError) as exc:
        raise MalformedCalibration(f"{sensor}: {exc}") from None

    stamps_ns, files = [], []
    with open(data_csv) as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            stamps_ns.append(int(row[0]))
            files.append(row[1].strip())
    times = ns_to_seconds(stamps_ns)
    for f in files:
        if not (cam / "data" / f).is_file():
            raise CountMismatch(f"data.csv lists {f} but the image is missing")

    gt = None
    gt_csv = mav / "state_groundtruth_estimate0" / "data.csv"
    if gt_csv.is_file():
        gt = _euroc_groundtruth(gt_csv, T_BS)

    def loader(i: int) -> FrameData:
        return FrameData(i, float(times[i]), read_image(cam / "data" / files[i]))

    return SequenceSource(f"euroc-{root.name}", K, times, gt, loader)


def _euroc_groundtruth(path: Path, T_BS: np.ndarray) -> Trajectory:
    stamps, poses = [], []
    with open(path) as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            vals = [float(v) for v in row[:8]]
            T_WB = np.eye(4)
            qw, qx, qy, qz = vals[4:8]
            T_WB[:3, :3] = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
            T_WB[:3, 3] = vals[1:4]
            T_WC = T_WB @ T_BS
            pose = Pose.from_matrix(np.linalg.inv(T_WC), orthonormalize=True)
            stamps.append(ns_to_seconds([int(row[0])])[0])
            poses.append(pose)
    return Trajectory(stamps, poses)


# ----------------------------------------------------------------------------
# synthetic scenes
# ----------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    """Parameters of a generated scene; the field names double as config keys."""

    path: str = "arc"  # line | arc | loop
    n_frames: int = 100
    n_landmarks: int = 500
    sigma: float = 0.0  # pixel noise
    outlier_rate: float = 0.0
    descriptor_regime: str = "id"  # id | real
    descriptor_dim: int = 64
    descriptor_noise: float = 0.008
    fps: float = 10.0
    width: int = 640
    height: int = 480
    focal: float = 400.0
    # line: camera slides along +x looking +z over landmarks in a box
    line_length: float = 10.0
    # arc: camera on a circle looking at a landmark cloud around the centre
    arc_radius: float = 8.0
    arc_degrees: float = 90.0
    cloud_half_extent: float = 2.0
    # loop: camera on a circle looking outward at a ring of landmarks
    loop_radius: float = 1.5
    loop_turns: float = 1.0
    ring_inner: float = 5.0
    ring_outer: float = 9.0
    ring_height: float = 1.5

    def __post_init__(self):
        if self.path not in ("line", "arc", "loop"):
            raise ConfigError(f"unknown path type {self.path!r}")
        if self.descriptor_regime not in ("id", "real"):
            raise ConfigError(f"unknown descriptor regime {self.descriptor_regime!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not (0 <= self.outlier_rate < 1):
            raise ConfigError("outlier_rate must lie in [0, 1)")
        if self.n_frames < 2 or self.n_landmarks < 1:
            raise ConfigError("need at least 2 frames and 1 landmark")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0, self.width, self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic scene keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_scene_config(path) -> SyntheticScene:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if "scene" in data:
        data = data["scene"]
    return SyntheticScene.from_dict(data)


def look_at(center: np.ndarray, target: np.ndarray, down=(0.0, 1.0, 0.0)) -> Pose:
    z = target - center
    z = z / np.linalg.norm(z)
    y = np.asarray(down, dtype=float) - np.dot(down, z) * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    Rwc = np.stack([x, y, z], axis=1)
    return Pose(Rwc.T, -Rwc.T @ center)


def scene_trajectory(scene: SyntheticScene) -> Trajectory:
    n = scene.n_frames
    s = np.arange(n) / (n - 1)
    poses = []
    for k in range(n):
        if scene.path == "line":
            c = np.array([scene.line_length * s[k], 0.0, 0.0])
            poses.append(Pose(np.eye(3), -c))
        elif scene.path == "arc":
            a = math.radians(scene.arc_degrees) * s[k]
            c = scene.arc_radius * np.array([math.sin(a), 0.0, -math.cos(a)])
            poses.append(look_at(c, np.zeros(3)))
        else:
            a = 2 * math.pi * scene.loop_turns * k / n
            radial = np.array([math.sin(a), 0.0, math.cos(a)])
            c = scene.loop_radius * radial
            poses.append(look_at(c, c + radial))
    return Trajectory(np.arange(n) / scene.fps, poses)


def scene_landmarks(scene: SyntheticScene, rng: np.random.Generator) -> np.ndarray:
    n = scene.n_landmarks
    if scene.path == "line":
        lo = np.array([-3.0, -2.0, 4.0])
        hi = np.array([scene.line_length + 3.0, 2.0, 10.0])
        return rng.uniform(lo, hi, size=(n, 3))
    if scene.path == "arc":
        h = scene.cloud_half_extent
        return rng.uniform(-h, h, size=(n, 3))
    ang = rng.uniform(0, 2 * math.pi, n)
    rad = np.sqrt(rng.uniform(scene.ring_inner**2, scene.ring_outer**2, n))
    y = rng.uniform(-scene.ring_height, scene.ring_height, n)
    return np.stack([rad * np.sin(ang), y, rad * np.cos(ang)], axis=1)


@dataclass
class SyntheticWorld:
    """Ground truth behind a generated sequence."""

    scene: SyntheticScene
    landmarks: np.ndarray
    trajectory: Trajectory
    binary_codes: np.ndarray | None
    real_codes: np.ndarray | None
    seed: int


def build_world(scene: SyntheticScene, seed: int = 0) -> SyntheticWorld:
    rng = np.random.default_rng([seed, 0])
    X = scene_landmarks(scene, rng)
    codes_rng = np.random.default_rng([seed, 1])
    binary = codes_rng.integers(0, 256, size=(scene.n_landmarks, 32), dtype=np.uint8)
    real = codes_rng.normal(size=(scene.n_landmarks, scene.descriptor_dim))
    real /= np.linalg.norm(real, axis=1, keepdims=True)
    return SyntheticWorld(scene, X, scene_trajectory(scene), binary, real, seed)


def synthetic_frame(world: SyntheticWorld, k: int) -> FrameData:
    scene = world.scene
    K = scene.intrinsics
    pose = world.trajectory.poses[k]
    rng = np.random.default_rng([world.seed, 2, k])
    uv, z = project_points(world.landmarks, pose, K)
    visible = np.flatnonzero((z > 0.1) & K.in_image(uv, margin=1.0))
    ids = visible[rng.permutation(len(visible))]
    obs = uv[ids].copy()
    if scene.sigma > 0:
        obs += rng.normal(0.0, scene.sigma, size=obs.shape)
    n_out = int(round(scene.outlier_rate * len(ids)))
    if n_out:
        which = rng.choice(len(ids), size=n_out, replace=False)
        obs[which] = rng.uniform([0, 0], [K.width, K.height], size=(n_out, 2))
    obs[:, 0] = np.clip(obs[:, 0], 0, K.width - 1e-6)
    obs[:, 1] = np.clip(obs[:, 1], 0, K.height - 1e-6)
    kps = Keypoints(obs, np.zeros(len(ids), dtype=np.int64), np.ones(len(ids)), np.zeros(len(ids)), 1.0 / z[ids])
    if scene.descriptor_regime == "id":
        desc = Descriptors.binary(world.binary_codes[ids], 256)
    else:
        noisy = world.real_codes[ids] + rng.normal(0.0, scene.descriptor_noise, size=(len(ids), scene.descriptor_dim))
        desc = Descriptors.real(noisy)
    return FrameData(k, float(world.trajectory.timestamps[k]), None, kps, desc, ids)


def generate_synthetic(scene: SyntheticScene, seed: int = 0) -> SequenceSource:
    """Deterministic synthetic sequence with precomputed features and ground truth."""
    world = build_world(scene, seed)
    src = SequenceSource(f"synthetic-{scene.path}", scene.intrinsics, world.trajectory.timestamps.copy(),
                         world.trajectory, lambda i: synthetic_frame(world, i))
    src.world = world
    return src


# ----------------------------------------------------------------------------
# rendered imagery
# ----------------------------------------------------------------------------


def render_frame(world: SyntheticWorld, k: int, background: float = 110.0) -> np.ndarray:
    """Draw every visible landmark as a small textured patch.

    Each patch is a few Gaussian lobes at landmark-specific offsets, signs
    and contrasts, so that patch descriptors are distinctive. Patch size
    scales with inverse depth relative to the median depth of the view.
    """
    scene = world.scene
    K = scene.intrinsics
    pose = world.trajectory.poses[k]
    rng = np.random.default_rng([world.seed, 3])
    n = len(world.landmarks)
    lobes = 4
    amp = rng.uniform(50, 110, (n, lobes)) * rng.choice([-1.0, 1.0], (n, lobes))
    sig = rng.uniform(0.9, 1.8, (n, lobes))
    off = rng.uniform(-3.5, 3.5, (n, lobes, 2))
    off[:, 0] = 0.0
    uv, z = project_points(world.landmarks, pose, K)
    vis = np.flatnonzero((z > 0.1) & K.in_image(uv, margin=-8.0))
    img = np.full((K.height, K.width), background, dtype=np.float64)
    if len(vis) == 0:
        return img.astype(np.uint8)
    z_ref = float(np.median(z[vis]))
    r = 9
    for i in vis[np.argsort(-z[vis])]:
        u, v = uv[i]
        s = float(np.clip(z_ref / z[i], 0.5, 2.0))
        x0, y0 = int(math.floor(u)) - r, int(math.floor(v)) - r
        xs = np.arange(max(x0, 0), min(x0 + 2 * r + 2, K.width))
        ys = np.arange(max(y0, 0), min(y0 + 2 * r + 2, K.height))
        if len(xs) == 0 or len(ys) == 0:
            continue
        patch = img[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
        for j in range(lobes):
            cu, cv = u + s * off[i, j, 0], v + s * off[i, j, 1]
            g = np.exp(-((xs[None, :] - cu) ** 2 + (ys[:, None] - cv) ** 2) / (2 * (s * sig[i, j]) ** 2))
            patch[:] = patch * (1 - g) + (background + amp[i, j]) * g
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def render_synthetic(scene: SyntheticScene, seed: int = 0,
                     transform: Callable[[np.ndarray], np.ndarray] | None = None) -> SequenceSource:
    """Synthetic sequence delivered as images (optionally post-processed)."""
    world = build_world(scene, seed)

    def loader(i: int) -> FrameData:
        img = render_frame(world, i)
        if transform is not None:
            img = transform(img)
        return FrameData(i, float(world.trajectory.timestamps[i]), img)

    src = SequenceSource(f"rendered-{scene.path}", scene.intrinsics, world.trajectory.timestamps.copy(),
                         world.trajectory, loader)
    src.world = world
    return src
