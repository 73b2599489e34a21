"""The SLAM system: tracking, synchronous local mapping and asynchronous
loop detection wired together.

Loop detection for keyframe ``k`` runs on a worker thread while the next
frame is tracked. Its result is collected at the following inter-frame
boundary, after tracking and before any map mutation, so the outcome does
not depend on thread timing.
"""
from __future__ import annotations

import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import FrameData, SequenceSource
from .errors import InitializationFailed, InsufficientInliers, LostTracking
from .features import (BINARY, Descriptors, FeatureFile, Keypoints, MatchThresholds, PyramidConfig,
                       detect_and_describe)
from .geometry import CameraIntrinsics, Pose, so3_log
from .mapping import (Map, MappingConfig, create_map_points, cull_keyframes, cull_points, fuse_neighbors,
                      insert_keyframe, local_bundle_adjustment)
from .optim import bundle_adjust
from .place_recognition import (KeyFrameDatabase, LoopConfig, LoopCorrection, LoopDetector, Vocabulary,
                                compute_loop_transform, correct_loop, relocalize, train_vocabulary)
from .tracking import (Frame, TrackingConfig, TrackingState, TrackingStatus, VelocityModel, build_local_map,
                       initialize_map, need_keyframe, predict_pose, track_frame)
from .trajectory import Trajectory

log = logging.getLogger(__name__)


@dataclass
class SystemConfig:
    thresholds: MatchThresholds = field(default_factory=MatchThresholds.binary_default)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    n_features: int = 1000
    loop_closing: bool = True
    relocalization: bool = True
    async_loop: bool = True
    seed: int = 0


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    reference: int
    T_cr: Pose  # frame pose relative to its reference keyframe


class System:
    def __init__(self, K: CameraIntrinsics, cfg: SystemConfig | None = None, vocabulary: Vocabulary | None = None):
        self.K = K
        self.cfg = cfg or SystemConfig()
        self.map = Map(self.cfg.mapping)
        self.vocabulary = vocabulary
        self.db = KeyFrameDatabase(vocabulary) if vocabulary is not None else None
        self.detector = LoopDetector(self.cfg.loop)
        self.state = TrackingState()
        self.velocity = VelocityModel()
        self.last_frame: Frame | None = None
        self.init_ref: Frame | None = None
        self.records: list[FrameRecord] = []
        self.loops: list[LoopCorrection] = []
        # keyframe trajectories just before and after each loop correction
        self.loop_snapshots: list[tuple[Trajectory, Trajectory]] = []
        self.init_failures: list[tuple[int, str]] = []
        self.lost_frames: list[int] = []
        self._executor = ThreadPoolExecutor(max_workers=1) if self.cfg.async_loop else None
        self._pending: Future | None = None

    # ------------------------------------------------------------------ public

    def close(self) -> None:
        self._collect_loop(None)
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def initialized(self) -> bool:
        return self.map.root is not None

    def process(self, frame: Frame) -> TrackingStatus:
        st = self.state
        if st.status == TrackingStatus.NOT_INITIALIZED:
            self._initialize(frame)
            return st.status
        if st.status == TrackingStatus.TRACKING:
            try:
                self._track(frame)
            except LostTracking as exc:
                log.info("frame %d lost: %s", frame.id, exc)
                st.status = TrackingStatus.LOST
        if st.status == TrackingStatus.LOST:
            if not self._relocalize(frame):
                self.lost_frames.append(frame.id)
                self._collect_loop(None)
                return st.status
        self._collect_loop(frame)
        self._record(frame)
        if need_keyframe(st, frame, self.map, self.cfg.tracking, self._pending is None):
            self._new_keyframe(frame)
        self.last_frame = frame
        return st.status

    def trajectory(self) -> Trajectory:
        poses = [r.T_cr @ self.map.world_pose(r.reference) for r in self.records]
        return Trajectory([r.timestamp for r in self.records], poses, [r.frame_id for r in self.records])

    def keyframe_trajectory(self) -> Trajectory:
        kfs = sorted(self.map.live_keyframes(), key=lambda k: k.timestamp)
        return Trajectory([k.timestamp for k in kfs], [k.pose for k in kfs], [k.frame_id for k in kfs])

    # ------------------------------------------------------------------ stages

    def _initialize(self, frame: Frame) -> None:
        if self.init_ref is None:
            self.init_ref = frame
            return
        ref = self.init_ref
        try:
            init = initialize_map(ref, frame, self.K, self.cfg.thresholds, self.cfg.tracking)
        except InitializationFailed as exc:
            self.init_failures.append((frame.id, exc.reason))
            if exc.reason == "insufficient-matches" or frame.id - ref.id >= self.cfg.tracking.init_max_gap:
                self.init_ref = frame
            return
        g = self.map
        ref.pose, frame.pose = init.pose1, init.pose2
        kf1 = g.new_keyframe(ref.id, ref.timestamp, ref.keypoints, ref.descriptors, ref.pose)
        kf2 = g.new_keyframe(frame.id, frame.timestamp, frame.keypoints, frame.descriptors, frame.pose)
        kf1.bow, kf1.feature_vector = ref.bow, ref.feature_vector
        insert_keyframe(kf1, g, self.db)
        for X, a, b in zip(init.points, init.idx1, init.idx2):
            mp = g.new_point(X, kf1, int(a))
            g.add_observation(mp, kf1, int(a))
            kf2.map_points[b] = mp.id
        insert_keyframe(kf2, g, self.db)
        for mp in g.live_points():
            g.update_point(mp)
        g.refresh()
        self._initial_ba(kf1.id, kf2.id)
        frame.pose = kf2.pose
        frame.map_points = kf2.map_points.copy()
        frame.is_keyframe = True
        # per-frame share of the initial motion
        rel = kf2.pose @ kf1.pose.inverse()
        gap = max(frame.id - ref.id, 1)
        self.velocity = VelocityModel(Pose.from_rotvec(so3_log(rel.R) / gap, rel.t / gap))
        self.state = TrackingState(TrackingStatus.TRACKING, kf2.id, int(frame.n_tracked), frame.id)
        self.records.append(FrameRecord(ref.id, ref.timestamp, kf1.id, Pose.identity()))
        self.records.append(FrameRecord(frame.id, frame.timestamp, kf2.id, Pose.identity()))
        self.last_frame = frame
        log.info("initialized from frames %d/%d with %d points", ref.id, frame.id, len(init.points))

    def _initial_ba(self, a: int, b: int) -> None:
        g = self.map
        poses = {a: g.keyframes[a].pose, b: g.keyframes[b].pose}
        points = {mp.id: mp.position for mp in g.live_points()}
        obs = []
        for mp in g.live_points():
            for kid, idx in sorted(mp.observations.items()):
                kf = g.keyframes[kid]
                obs.append((kid, mp.id, kf.keypoints.xy[idx], 1.0 / kf.sigma2[idx]))
        res = bundle_adjust(poses, points, obs, {a}, self.K, self.cfg.tracking.lm, (20,))
        # keep the median depth of the first keyframe at one
        X = np.stack([res.points[p] for p in points])
        depth = float(np.median(g.keyframes[a].pose.transform(X)[:, 2]))
        kb = g.keyframes[b]
        kb.pose = Pose(res.poses[b].R, res.poses[b].t / depth)
        for pid in points:
            g.points[pid].position = res.points[pid] / depth
        for mp in g.live_points():
            g.update_point(mp)

    def _track(self, frame: Frame) -> None:
        prev = self.last_frame
        predicted = predict_pose(prev, self.velocity)
        seeds = prev.map_points[prev.map_points >= 0]
        lm = build_local_map(self.map, seeds, self.map.live_ancestor(self.state.reference_keyframe),
                             self.cfg.tracking.local_keyframes)
        res = track_frame(frame, lm, predicted, self.K, self.cfg.thresholds, self.cfg.tracking)
        self._accept(frame, res.pose, res.keypoint_idx, res.point_ids, res.visible_ids)
        ref = build_local_map(self.map, res.point_ids, None, 1).reference
        if ref is not None:
            self.state.reference_keyframe = ref
        self.velocity.update(prev.pose, frame.pose)

    def _accept(self, frame: Frame, pose: Pose, kp_idx, point_ids, visible_ids) -> None:
        frame.pose = pose
        frame.map_points[:] = -1
        frame.map_points[kp_idx] = point_ids
        for pid in visible_ids:
            self.map.points[int(pid)].visible += 1
        for pid in point_ids:
            self.map.points[int(pid)].found += 1
        self.state.inlier_count = len(point_ids)

    def _relocalize(self, frame: Frame) -> bool:
        if not self.cfg.relocalization or self.db is None:
            return False
        r = relocalize(frame, self.db, self.map, self.K, self.cfg.thresholds,
                       self.cfg.tracking.min_inliers, seed=self.cfg.seed, lm=self.cfg.tracking.lm)
        if r is None:
            return False
        self._accept(frame, r.pose, r.keypoint_idx, r.point_ids, r.point_ids)
        self.state.status = TrackingStatus.TRACKING
        self.state.reference_keyframe = r.keyframe
        self.velocity = VelocityModel()
        log.info("frame %d relocalized against keyframe %d", frame.id, r.keyframe)
        return True

    def _record(self, frame: Frame) -> None:
        ref = self.map.live_ancestor(self.state.reference_keyframe)
        self.state.reference_keyframe = ref
        T_cr = frame.pose @ self.map.keyframes[ref].pose.inverse()
        self.records.append(FrameRecord(frame.id, frame.timestamp, ref, T_cr))

    def _new_keyframe(self, frame: Frame) -> None:
        g, K, th = self.map, self.K, self.cfg.thresholds
        kf = g.new_keyframe(frame.id, frame.timestamp, frame.keypoints, frame.descriptors, frame.pose,
                            frame.map_points)
        kf.bow, kf.feature_vector = frame.bow, frame.feature_vector
        insert_keyframe(kf, g, self.db)
        frame.is_keyframe = True
        cull_points(g)
        create_map_points(kf, g, K, th)
        fuse_neighbors(kf, g, K, th)
        local_bundle_adjustment(kf, g, K, self.cfg.tracking.lm)
        cull_keyframes(g, g.covisible(kf.id))
        # the frame now observes what its keyframe observes
        frame.pose = kf.pose
        frame.map_points = kf.map_points.copy()
        self.state.reference_keyframe = kf.id
        self.state.last_keyframe_frame = frame.id
        self.records[-1] = FrameRecord(frame.id, frame.timestamp, kf.id, Pose.identity())
        if self.cfg.loop_closing and self.db is not None:
            if self._executor is not None:
                self._pending = self._executor.submit(self.detector.detect_loop, kf, g, self.db)
            else:
                self._pending = _Done(self.detector.detect_loop(kf, g, self.db))

    def _collect_loop(self, frame: Frame | None) -> None:
        if self._pending is None:
            return
        cand = self._pending.result()
        self._pending = None
        if cand is None:
            return
        try:
            lt = compute_loop_transform(cand, self.map, self.K, self.cfg.thresholds, self.cfg.loop, self.cfg.seed)
        except InsufficientInliers as exc:
            log.info("loop candidate %s rejected: %s", cand, exc)
            return
        # frames in flight keep their pose relative to their reference keyframe
        anchors = []
        for f in (self.last_frame, frame):
            if f is not None and f.pose is not None and self.state.reference_keyframe is not None:
                ref = self.map.live_ancestor(self.state.reference_keyframe)
                anchors.append((f, ref, f.pose @ self.map.world_pose(ref).inverse()))
        before = self.keyframe_trajectory()
        corr = correct_loop(lt, cand, self.map, self.K, self.cfg.thresholds, self.cfg.loop)
        self.loops.append(corr)
        self.loop_snapshots.append((before, self.keyframe_trajectory()))
        self.detector.reset()
        log.info("loop closed between keyframes %d and %d", cand.query, cand.match)
        for f, ref, T in anchors:
            f.pose = T @ self.map.world_pose(ref)


class _Done:
    def __init__(self, value):
        self.value = value

    def result(self):
        return self.value


# ----------------------------------------------------------------------------
# feature front-end
# ----------------------------------------------------------------------------


def make_frame(data: FrameData, cfg: SystemConfig, features: FeatureFile | None = None,
               vocabulary: Vocabulary | None = None) -> Frame:
    """Turn a source frame into a featurized tracking frame."""
    if features is not None:
        kps, descs = features.read(data.frame_id)
    elif data.keypoints is not None:
        kps, descs = data.keypoints, data.descriptors
    else:
        kps, descs = detect_and_describe(data.image, cfg.pyramid, cfg.n_features)
    frame = Frame.from_features(data.frame_id, data.timestamp, kps, descs, cfg.pyramid.scale_factor)
    if vocabulary is not None and descs.compatible(Descriptors(vocabulary.kind, vocabulary.centroids.data[:0],
                                                               vocabulary.length)):
        frame.bow, frame.feature_vector = vocabulary.transform(descs)
    return frame


def bootstrap_vocabulary(source: SequenceSource, cfg: SystemConfig, features: FeatureFile | None = None,
                         k: int = 10, L: int = 3, max_frames: int = 20) -> Vocabulary:
    """Small vocabulary trained on an evenly spaced subset of the sequence itself."""
    n = len(source)
    picks = np.unique(np.linspace(0, n - 1, min(max_frames, n)).round().astype(int))
    docs = []
    for i in picks:
        f = make_frame(source.frame(int(i)), cfg, features)
        if len(f.descriptors):
            docs.append(f.descriptors)
    return train_vocabulary(docs, k, L, cfg.seed)


@dataclass
class RunResult:
    trajectory: Trajectory
    keyframes: Trajectory
    n_frames: int
    initialized: bool
    loops: int
    lost_frames: list
    system: System


def run_sequence(source: SequenceSource, cfg: SystemConfig | None = None, vocabulary: Vocabulary | None = None,
                 features: FeatureFile | None = None, max_frames: int | None = None) -> RunResult:
    cfg = cfg or SystemConfig()
    n = len(source) if max_frames is None else min(max_frames, len(source))
    with System(source.intrinsics, cfg, vocabulary) as sys_:
        for i in range(n):
            frame = make_frame(source.frame(i), cfg, features, vocabulary)
            sys_.process(frame)
        sys_.close()
        traj = sys_.trajectory() if sys_.records else Trajectory([], [])
        kft = sys_.keyframe_trajectory() if sys_.initialized else Trajectory([], [])
        return RunResult(traj, kft, n, sys_.initialized, len(sys_.loops), list(sys_.lost_frames), sys_)
