"""Per-frame tracking: map initialization, constant-velocity prediction,
guided matching against the local map, motion-only optimization and the
keyframe decision."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import DegenerateConfiguration, InitializationFailed, InsufficientMatches, LostTracking, NoConsensus
from .features import Descriptors, Keypoints, Matches, MatchThresholds, match, match_in_windows
from .geometry import CameraIntrinsics, Pose, RansacConfig, estimate_two_view, project_points, triangulate_normalized
from .mapping import Map
from .optim import LMConfig, optimize_pose


class TrackingStatus(Enum):
    NOT_INITIALIZED = "not-initialized"
    TRACKING = "tracking"
    LOST = "lost"


@dataclass(eq=False)
class Frame:
    id: int
    timestamp: float
    keypoints: Keypoints
    descriptors: Descriptors
    pose: Pose | None = None
    is_keyframe: bool = False
    map_points: np.ndarray | None = None  # per keypoint: map point id or -1
    sigma2: np.ndarray | None = None
    bow: dict | None = None
    feature_vector: dict | None = None

    def __post_init__(self):
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoint and descriptor counts differ")
        if self.map_points is None:
            self.map_points = np.full(len(self.keypoints), -1, dtype=np.int64)
        if self.sigma2 is None:
            self.sigma2 = np.ones(len(self.keypoints))

    @classmethod
    def from_features(cls, id: int, timestamp: float, keypoints: Keypoints, descriptors: Descriptors,
                      scale_factor: float = 2.0) -> "Frame":
        return cls(id, timestamp, keypoints, descriptors, sigma2=scale_factor ** (2.0 * keypoints.octave))

    @property
    def n_tracked(self) -> int:
        return int((self.map_points >= 0).sum())


@dataclass
class VelocityModel:
    last_relative: Pose = field(default_factory=Pose.identity)

    def update(self, previous: Pose, current: Pose) -> None:
        self.last_relative = current @ previous.inverse()


@dataclass
class TrackingState:
    status: TrackingStatus = TrackingStatus.NOT_INITIALIZED
    reference_keyframe: int | None = None
    inlier_count: int = 0
    last_keyframe_frame: int = -1

    def __post_init__(self):
        if self.inlier_count < 0:
            raise ValueError("inlier_count must be >= 0")


@dataclass(frozen=True)
class TrackingConfig:
    search_radius: float = 15.0
    min_inliers: int = 15
    keyframe_gap: int = 20
    tracked_ratio: float = 0.9
    init_min_points: int = 50
    init_max_gap: int = 30
    min_parallax_deg: float = 1.0
    view_cos: float = 0.5
    local_keyframes: int = 30
    ransac: RansacConfig = RansacConfig()
    # when set, the two-view inlier threshold becomes this many pixels (image features
    # carry pixel quantization that the normalized default does not allow for)
    init_threshold_px: float | None = None
    lm: LMConfig = LMConfig()


# ----------------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------------


@dataclass
class Initialization:
    pose1: Pose
    pose2: Pose
    points: np.ndarray  # (N, 3) world coordinates, median depth in frame 1 is 1
    idx1: np.ndarray
    idx2: np.ndarray


def initialize_map(f1: Frame, f2: Frame, K: CameraIntrinsics, th: MatchThresholds,
                   cfg: TrackingConfig = TrackingConfig()) -> Initialization:
    """Two-view reconstruction from frame ``f1`` (the world origin) and ``f2``."""
    m = match(f1.descriptors, f2.descriptors, th, "relaxed")
    if len(m) < 8:
        raise InitializationFailed("insufficient-matches", f"{len(m)} matches")
    uv1 = f1.keypoints.xy[m.idx_a]
    uv2 = f2.keypoints.xy[m.idx_b]
    try:
        ransac = cfg.ransac
        if cfg.init_threshold_px is not None:
            ransac = replace(ransac, threshold=cfg.init_threshold_px / K.fx)
        rel, mask = estimate_two_view(uv1, uv2, K, ransac)
    except InsufficientMatches as exc:
        raise InitializationFailed("insufficient-matches", str(exc)) from None
    except NoConsensus as exc:
        raise InitializationFailed("no-consensus", str(exc)) from None
    except DegenerateConfiguration as exc:
        raise InitializationFailed("degenerate-configuration", str(exc)) from None
    i1, i2 = m.idx_a[mask], m.idx_b[mask]
    pose1 = Pose.identity()
    x1 = K.normalize(f1.keypoints.xy[i1])
    x2 = K.normalize(f2.keypoints.xy[i2])
    X = triangulate_normalized(x1, x2, pose1, rel)
    ok = np.all(np.isfinite(X), axis=1)
    r1 = X - pose1.center
    r2 = X - rel.center
    cos = np.sum(r1 * r2, axis=1) / np.maximum(np.linalg.norm(r1, axis=1) * np.linalg.norm(r2, axis=1), 1e-300)
    ok &= cos < np.cos(np.radians(cfg.min_parallax_deg))
    p1, z1 = project_points(X, pose1, K)
    p2, z2 = project_points(X, rel, K)
    ok &= (z1 > 0) & (z2 > 0)
    chi = cfg.lm.chi2_threshold
    ok &= ((p1 - f1.keypoints.xy[i1]) ** 2).sum(axis=1) < chi * f1.sigma2[i1]
    ok &= ((p2 - f2.keypoints.xy[i2]) ** 2).sum(axis=1) < chi * f2.sigma2[i2]
    n = int(ok.sum())
    if n < cfg.init_min_points:
        raise InitializationFailed("insufficient-points", f"{n} points, need {cfg.init_min_points}")
    X = X[ok]
    depth = float(np.median(X[:, 2]))
    pose2 = Pose(rel.R, rel.t / depth)
    return Initialization(pose1, pose2, X / depth, i1[ok], i2[ok])


# ----------------------------------------------------------------------------
# tracking
# ----------------------------------------------------------------------------


def predict_pose(prev: Frame, vel: VelocityModel) -> Pose:
    """Constant-velocity prediction: the last inter-frame motion applied again."""
    return vel.last_relative @ prev.pose


@dataclass
class LocalMap:
    point_ids: np.ndarray
    positions: np.ndarray
    normals: np.ndarray
    descriptors: Descriptors | None
    keyframes: list[int]
    reference: int | None

    def __len__(self):
        return len(self.point_ids)


def build_local_map(graph: Map, seed_points, fallback_kf: int | None = None,
                    max_keyframes: int = 30) -> LocalMap:
    """Keyframes sharing the seed points plus their neighbours, and all their points."""
    votes: Counter = Counter()
    for pid in seed_points:
        mp = graph.resolve_point(pid)
        if mp is not None:
            for kid in mp.observations:
                votes[kid] += 1
    if fallback_kf is not None and not graph.keyframes[fallback_kf].bad:
        votes.setdefault(fallback_kf, 0)
    ranked = [k for k, _ in sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))]
    reference = ranked[0] if ranked else None
    kfs = list(ranked[:max_keyframes])
    for kid in list(kfs):
        for n in graph.covisible(kid, 10):
            if len(kfs) >= max_keyframes:
                break
            if n not in kfs:
                kfs.append(n)
    ids: dict[int, None] = {}
    for kid in kfs:
        kf = graph.keyframes[kid]
        for pid in kf.map_points[kf.map_points >= 0]:
            ids.setdefault(int(pid), None)
    pids = np.fromiter(ids, dtype=np.int64, count=len(ids))
    if len(pids) == 0:
        return LocalMap(pids, np.zeros((0, 3)), np.zeros((0, 3)), None, kfs, reference)
    pts = [graph.points[int(p)] for p in pids]
    return LocalMap(pids, np.stack([p.position for p in pts]), np.stack([p.normal for p in pts]),
                    Descriptors.concat([p.descriptor for p in pts]), kfs, reference)


@dataclass
class TrackResult:
    pose: Pose
    n_inliers: int
    keypoint_idx: np.ndarray  # inlier keypoints
    point_ids: np.ndarray  # their map points
    visible_ids: np.ndarray  # local points predicted in view


def _visible(lm: LocalMap, pose: Pose, K: CameraIntrinsics, view_cos: float):
    uv, z = project_points(lm.positions, pose, K)
    ok = (z > 0) & K.in_image(uv)
    ray = lm.positions - pose.center
    ray /= np.maximum(np.linalg.norm(ray, axis=1, keepdims=True), 1e-300)
    nz = np.linalg.norm(lm.normals, axis=1) > 0
    ok &= ~nz | (np.sum(ray * lm.normals, axis=1) >= view_cos)
    return np.flatnonzero(ok), uv


def _search(frame: Frame, lm: LocalMap, pose: Pose, K, gate: float, ratio: float, radius: float, view_cos: float):
    vis, uv = _visible(lm, pose, K, view_cos)
    if len(vis) == 0:
        return vis, Matches.empty()
    m = match_in_windows(lm.descriptors[vis], uv[vis], frame.descriptors, frame.keypoints.xy, radius, gate, ratio)
    return vis, Matches(vis[m.idx_a], m.idx_b, m.distance)


def _optimize(frame: Frame, lm: LocalMap, pose: Pose, m: Matches, K, cfg: TrackingConfig):
    X = lm.positions[m.idx_a]
    uv = frame.keypoints.xy[m.idx_b]
    res = optimize_pose(pose, X, uv, 1.0 / frame.sigma2[m.idx_b], K, cfg.lm)
    return res


def track_frame(frame: Frame, local_map: LocalMap, predicted: Pose, K: CameraIntrinsics, th: MatchThresholds,
                cfg: TrackingConfig = TrackingConfig()) -> TrackResult:
    """Match the local map around the predicted pose and refine the pose.

    Windowed projection search first (then a window three times wider,
    then unguided descriptor matching), motion-only optimization, a second
    projection search from the refined pose and a final optimization.
    Raises LostTracking when fewer than ``cfg.min_inliers`` inliers remain.
    """
    if len(local_map) == 0 or len(frame.keypoints) == 0:
        raise LostTracking(0, cfg.min_inliers)
    gate = th.gate("relaxed")
    vis, m = _search(frame, local_map, predicted, K, gate, th.ratio, cfg.search_radius, cfg.view_cos)
    if len(m) < cfg.min_inliers:
        vis, m = _search(frame, local_map, predicted, K, gate, th.ratio, 3 * cfg.search_radius, cfg.view_cos)
    if len(m) < cfg.min_inliers:
        m = match(local_map.descriptors, frame.descriptors, th, "relaxed")
    if len(m) < cfg.min_inliers:
        raise LostTracking(len(m), cfg.min_inliers)
    res = _optimize(frame, local_map, predicted, m, K, cfg)
    if res.n_inliers < cfg.min_inliers:
        raise LostTracking(res.n_inliers, cfg.min_inliers)
    vis, m2 = _search(frame, local_map, res.pose, K, gate, th.ratio, cfg.search_radius, cfg.view_cos)
    if len(m2) >= cfg.min_inliers:
        res2 = _optimize(frame, local_map, res.pose, m2, K, cfg)
        if res2.n_inliers >= res.n_inliers:
            res, m = res2, m2
    if res.n_inliers < cfg.min_inliers:
        raise LostTracking(res.n_inliers, cfg.min_inliers)
    inl = res.inliers
    return TrackResult(res.pose, res.n_inliers, m.idx_b[inl], local_map.point_ids[m.idx_a[inl]],
                       local_map.point_ids[vis])


def need_keyframe(state: TrackingState, frame: Frame, graph: Map, cfg: TrackingConfig = TrackingConfig(),
                  mapping_idle: bool = True) -> bool:
    """Frame-gap or tracked-ratio trigger, gated by tracking quality and an idle mapper."""
    if state.status != TrackingStatus.TRACKING or state.reference_keyframe is None:
        return False
    ref = graph.keyframes[state.reference_keyframe]
    ref_points = int((ref.map_points >= 0).sum())
    gap = frame.id - state.last_keyframe_frame >= cfg.keyframe_gap
    low = state.inlier_count < cfg.tracked_ratio * ref_points
    return (gap or low) and state.inlier_count >= cfg.min_inliers and mapping_idle
