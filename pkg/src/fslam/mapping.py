"""Map state and local mapping.

The :class:`Map` owns keyframes, map points and the covisibility graph
(edges weighted by shared map points) together with a spanning tree used by
pose-graph correction. The free functions implement the local-mapping
steps executed after every keyframe insertion: map-point creation by
triangulation, duplicate fusion, local bundle adjustment and culling.

Observation bookkeeping is two-sided: ``kf.map_points[idx] == mp.id``
exactly when ``mp.observations[kf.id] == idx``. :func:`check_integrity`
verifies this together with the graph invariants.
"""
from __future__ import annotations

import io
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .features import Descriptors, Keypoints, MatchThresholds, match_distance_matrix, match_in_windows
from .geometry import CameraIntrinsics, Pose, project_points, skew, triangulate_normalized
from .io_utils import atomic_write_bytes
from .optim import BAResult, LMConfig, bundle_adjust


@dataclass(frozen=True)
class MappingConfig:
    covis_min: int = 15
    n_neighbors: int = 10
    min_parallax_deg: float = 1.0
    epipolar_gate: float = 3.84  # px per unit level sigma
    reproj_gate: float = 5.991  # px per unit level sigma
    min_baseline_ratio: float = 0.01  # baseline / median scene depth
    fuse_radius: float = 3.0
    cull_redundancy: float = 0.9
    cull_observers: int = 3
    point_window: int = 3
    point_min_obs: int = 2
    point_min_found_ratio: float = 0.25
    ba_stages: tuple = (5, 10)
    scale_factor: float = 2.0


@dataclass(eq=False)
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: Descriptors  # single row, one of the observation descriptors
    first_kf: int  # keyframe that created the point (also its reference for loop correction)
    created_at: int  # keyframe insertion counter at creation
    observations: dict = field(default_factory=dict)  # kf id -> keypoint index
    normal: np.ndarray = field(default_factory=lambda: np.zeros(3))
    visible: int = 1
    found: int = 1
    bad: bool = False
    replaced_by: int | None = None
    _desc_key: frozenset = field(default=frozenset(), repr=False, compare=False)

    @property
    def n_obs(self) -> int:
        return len(self.observations)

    @property
    def found_ratio(self) -> float:
        return self.found / max(self.visible, 1)


@dataclass(eq=False)
class KeyFrame:
    id: int
    frame_id: int
    timestamp: float
    keypoints: Keypoints
    descriptors: Descriptors
    pose: Pose
    map_points: np.ndarray  # per keypoint: map point id or -1
    sigma2: np.ndarray  # per keypoint level variance
    bow: dict | None = None
    feature_vector: dict | None = None
    covis: dict = field(default_factory=dict)
    parent: int | None = None
    children: set = field(default_factory=set)
    loop_edges: set = field(default_factory=set)
    bad: bool = False
    Tcp: Pose | None = None  # pose relative to parent, kept when culled

    def point_indices(self) -> np.ndarray:
        return np.flatnonzero(self.map_points >= 0)


class Map:
    """Keyframes, map points and the covisibility graph.

    Tracking and local mapping are the only writers; loop correction takes
    ``lock`` for exclusive access.
    """

    def __init__(self, cfg: MappingConfig = MappingConfig()):
        self.cfg = cfg
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self.root: int | None = None
        self.n_inserted = 0
        self._next_kf = 0
        self._next_point = 0
        self._dirty: set[int] = set()
        self.lock = threading.RLock()

    # ------------------------------------------------------------------ creation

    def new_keyframe(self, frame_id: int, timestamp: float, keypoints: Keypoints, descriptors: Descriptors,
                     pose: Pose, map_points: np.ndarray | None = None) -> KeyFrame:
        n = len(keypoints)
        mp = np.full(n, -1, dtype=np.int64) if map_points is None else np.asarray(map_points, dtype=np.int64).copy()
        sigma2 = self.cfg.scale_factor ** (2.0 * keypoints.octave)
        kf = KeyFrame(self._next_kf, frame_id, timestamp, keypoints, descriptors, pose, mp, sigma2)
        self._next_kf += 1
        return kf

    def new_point(self, position, kf: KeyFrame, idx: int) -> MapPoint:
        mp = MapPoint(self._next_point, np.asarray(position, dtype=float).copy(), kf.descriptors[[idx]],
                      kf.id, self.n_inserted)
        self._next_point += 1
        self.points[mp.id] = mp
        return mp

    # ------------------------------------------------------------------ queries

    def live_keyframes(self) -> list[KeyFrame]:
        return [kf for kf in self.keyframes.values() if not kf.bad]

    def live_points(self) -> list[MapPoint]:
        return [mp for mp in self.points.values() if not mp.bad]

    def resolve_point(self, pid: int) -> MapPoint | None:
        """Follow replacement links; None for culled points."""
        mp = self.points.get(int(pid))
        while mp is not None and mp.bad and mp.replaced_by is not None:
            mp = self.points.get(mp.replaced_by)
        return None if mp is None or mp.bad else mp

    def covisible(self, kf_id: int, n: int | None = None) -> list[int]:
        """Neighbour ids by descending weight (ties by id)."""
        kf = self.keyframes[kf_id]
        order = sorted(kf.covis.items(), key=lambda kv: (-kv[1], kv[0]))
        ids = [k for k, _ in order]
        return ids if n is None else ids[:n]

    def world_pose(self, kf_id: int) -> Pose:
        """Pose of a keyframe, resolved through the spanning tree if it was culled."""
        kf = self.keyframes[kf_id]
        chain = Pose.identity()
        while kf.bad:
            chain = chain @ kf.Tcp
            kf = self.keyframes[kf.parent]
        return chain @ kf.pose

    def live_ancestor(self, kf_id: int) -> int:
        kf = self.keyframes[kf_id]
        while kf.bad:
            kf = self.keyframes[kf.parent]
        return kf.id

    # ------------------------------------------------------------------ observations

    def add_observation(self, mp: MapPoint, kf: KeyFrame, idx: int) -> None:
        if kf.id in mp.observations:
            return
        mp.observations[kf.id] = int(idx)
        kf.map_points[idx] = mp.id
        self._dirty.add(kf.id)

    def erase_observation(self, mp: MapPoint, kf: KeyFrame) -> None:
        idx = mp.observations.pop(kf.id, None)
        if idx is not None and kf.map_points[idx] == mp.id:
            kf.map_points[idx] = -1
        self._dirty.add(kf.id)
        if not mp.observations and not mp.bad:
            mp.bad = True

    def set_bad_point(self, mp: MapPoint) -> None:
        for kid in list(mp.observations):
            kf = self.keyframes[kid]
            idx = mp.observations.pop(kid)
            if kf.map_points[idx] == mp.id:
                kf.map_points[idx] = -1
            self._dirty.add(kid)
        mp.bad = True

    def replace_point(self, old: MapPoint, new: MapPoint) -> None:
        """Merge ``old`` into ``new``; shared keyframes keep the existing ``new`` observation."""
        if old.id == new.id or old.bad:
            return
        for kid, idx in list(old.observations.items()):
            kf = self.keyframes[kid]
            del old.observations[kid]
            if kid in new.observations:
                if kf.map_points[idx] == old.id:
                    kf.map_points[idx] = -1
            else:
                new.observations[kid] = idx
                kf.map_points[idx] = new.id
            self._dirty.add(kid)
        new.visible += old.visible
        new.found += old.found
        old.bad = True
        old.replaced_by = new.id
        self.update_point(new)

    def update_point(self, mp: MapPoint) -> None:
        """Refresh the viewing normal and the representative descriptor."""
        if mp.bad or not mp.observations:
            return
        kfs = [self.keyframes[k] for k in mp.observations]
        centers = np.array([-(kf.pose.R.T @ kf.pose.t) for kf in kfs])
        rays = mp.position[None, :] - centers
        rays /= np.maximum(np.linalg.norm(rays, axis=1, keepdims=True), 1e-300)
        n = rays.sum(axis=0)
        mp.normal = n / max(np.linalg.norm(n), 1e-300)
        key = frozenset(mp.observations.items())
        if key == mp._desc_key:
            return
        mp._desc_key = key
        first = kfs[0].descriptors
        rows = np.stack([kf.descriptors.data[mp.observations[kf.id]] for kf in kfs])
        stack = Descriptors(first.kind, rows, first.length)
        if len(kfs) == 1:
            mp.descriptor = stack
            return
        D = stack.distances(stack)
        mp.descriptor = stack[[int(np.argmin(np.median(D, axis=1)))]]

    # ------------------------------------------------------------------ graph

    def update_connections(self, kf: KeyFrame) -> Counter:
        counts: Counter = Counter()
        for pid in kf.map_points[kf.map_points >= 0]:
            mp = self.points[int(pid)]
            for other in mp.observations:
                if other != kf.id:
                    counts[other] += 1
        for other in list(kf.covis):
            self.keyframes[other].covis.pop(kf.id, None)
        kf.covis = {o: w for o, w in counts.items() if w >= self.cfg.covis_min and not self.keyframes[o].bad}
        for o, w in kf.covis.items():
            self.keyframes[o].covis[kf.id] = w
        return counts

    def refresh(self) -> None:
        """Recompute edges of every keyframe whose observations changed."""
        dirty, self._dirty = sorted(self._dirty), set()
        for kid in dirty:
            kf = self.keyframes.get(kid)
            if kf is not None and not kf.bad:
                self.update_connections(kf)

    def set_bad_keyframe(self, kf: KeyFrame) -> bool:
        """Cull a keyframe, re-parenting its children. Returns False when protected."""
        if kf.bad or kf.id == self.root or kf.loop_edges:
            return False
        for o in list(kf.covis):
            self.keyframes[o].covis.pop(kf.id, None)
        kf.covis = {}
        for idx in kf.point_indices():
            mp = self.points[int(kf.map_points[idx])]
            self.erase_observation(mp, kf)
        self._dirty.discard(kf.id)
        self.refresh()

        parent = self.keyframes[kf.parent]
        candidates = {parent.id}
        children = set(kf.children)
        while children:
            best = None
            for cid in sorted(children):
                child = self.keyframes[cid]
                for cand in sorted(candidates):
                    w = child.covis.get(cand, 0)
                    if w > 0 and (best is None or w > best[0]):
                        best = (w, cid, cand)
            if best is None:
                break
            _, cid, cand = best
            self._set_parent(self.keyframes[cid], cand)
            candidates.add(cid)
            children.discard(cid)
        for cid in sorted(children):
            self._set_parent(self.keyframes[cid], parent.id)
        parent.children.discard(kf.id)
        kf.children = set()
        kf.Tcp = kf.pose @ parent.pose.inverse()
        kf.bad = True
        return True

    def _set_parent(self, kf: KeyFrame, pid: int) -> None:
        if kf.parent is not None and kf.parent in self.keyframes:
            self.keyframes[kf.parent].children.discard(kf.id)
        kf.parent = pid
        self.keyframes[pid].children.add(kf.id)

    def add_loop_edge(self, a: int, b: int) -> None:
        self.keyframes[a].loop_edges.add(b)
        self.keyframes[b].loop_edges.add(a)


# ----------------------------------------------------------------------------
# insertion
# ----------------------------------------------------------------------------


def insert_keyframe(kf: KeyFrame, graph: Map, database=None) -> KeyFrame:
    """Register a keyframe: observations, covisibility edges, tree parent, BoW."""
    graph.keyframes[kf.id] = kf
    graph.n_inserted += 1
    if graph.root is None:
        graph.root = kf.id
    for idx in kf.point_indices():
        mp = graph.resolve_point(kf.map_points[idx])
        kf.map_points[idx] = -1
        if mp is None or kf.id in mp.observations:
            continue
        graph.add_observation(mp, kf, int(idx))
        graph.update_point(mp)
    graph._dirty.discard(kf.id)
    counts = graph.update_connections(kf)
    graph.refresh()
    if kf.id != graph.root and kf.parent is None:
        live = {k: w for k, w in counts.items() if not graph.keyframes[k].bad}
        if live:
            pid = min(live, key=lambda k: (-live[k], k))
        else:
            pid = max(k.id for k in graph.live_keyframes() if k.id != kf.id)
        graph._set_parent(kf, pid)
    if database is not None:
        database.add(kf)
    return kf


# ----------------------------------------------------------------------------
# triangulation of new points
# ----------------------------------------------------------------------------


def _median_depth(kf: KeyFrame, graph: Map) -> float:
    idx = kf.point_indices()
    if len(idx) == 0:
        return 1.0
    X = np.stack([graph.points[int(p)].position for p in kf.map_points[idx]])
    return float(np.median(kf.pose.transform(X)[:, 2]))


def fundamental(kf1: KeyFrame, kf2: KeyFrame, K: CameraIntrinsics) -> np.ndarray:
    """F with x2^T F x1 = 0 for pixel coordinates."""
    T21 = kf2.pose @ kf1.pose.inverse()
    E = skew(T21.t) @ T21.R
    Kinv = np.linalg.inv(K.K)
    return Kinv.T @ E @ Kinv


def epipolar_distances(F: np.ndarray, uv1: np.ndarray, uv2: np.ndarray) -> np.ndarray:
    """(n1, n2) pixel distances of uv2 points to the epipolar lines of uv1 points."""
    x1 = np.hstack([uv1, np.ones((len(uv1), 1))])
    lines = x1 @ F.T  # (n1, 3)
    num = np.abs(lines[:, :2] @ uv2.T + lines[:, 2:3])
    return num / np.maximum(np.linalg.norm(lines[:, :2], axis=1, keepdims=True), 1e-300)


def create_map_points(kf: KeyFrame, graph: Map, K: CameraIntrinsics, th: MatchThresholds) -> list[MapPoint]:
    """Triangulate unassociated features of ``kf`` against its strongest neighbours."""
    cfg = graph.cfg
    created: list[MapPoint] = []
    cos_min = np.cos(np.radians(cfg.min_parallax_deg))
    gate = th.gate("relaxed")
    c1 = kf.pose.center
    for nid in graph.covisible(kf.id, cfg.n_neighbors):
        kf2 = graph.keyframes[nid]
        baseline = np.linalg.norm(kf2.pose.center - c1)
        if baseline < 1e-12 or baseline / max(_median_depth(kf2, graph), 1e-12) < cfg.min_baseline_ratio:
            continue
        free1 = np.flatnonzero(kf.map_points < 0)
        free2 = np.flatnonzero(kf2.map_points < 0)
        if len(free1) == 0 or len(free2) == 0:
            continue
        D = kf.descriptors[free1].distances(kf2.descriptors[free2])
        uv1 = kf.keypoints.xy[free1]
        uv2 = kf2.keypoints.xy[free2]
        epi = epipolar_distances(fundamental(kf, kf2, K), uv1, uv2)
        D[epi >= cfg.epipolar_gate * np.sqrt(kf2.sigma2[free2])[None, :]] = np.inf
        m = match_distance_matrix(D, gate, th.ratio)
        if len(m) == 0:
            continue
        i1, i2 = free1[m.idx_a], free2[m.idx_b]
        x1 = K.normalize(kf.keypoints.xy[i1])
        x2 = K.normalize(kf2.keypoints.xy[i2])
        X = triangulate_normalized(x1, x2, kf.pose, kf2.pose)
        ok = np.all(np.isfinite(X), axis=1)
        r1 = X - c1
        r2 = X - kf2.pose.center
        cos = np.sum(r1 * r2, axis=1) / np.maximum(np.linalg.norm(r1, axis=1) * np.linalg.norm(r2, axis=1), 1e-300)
        ok &= cos < cos_min
        p1, z1 = project_points(X, kf.pose, K)
        p2, z2 = project_points(X, kf2.pose, K)
        ok &= (z1 > 0) & (z2 > 0)
        ok &= np.linalg.norm(p1 - kf.keypoints.xy[i1], axis=1) < cfg.reproj_gate * np.sqrt(kf.sigma2[i1])
        ok &= np.linalg.norm(p2 - kf2.keypoints.xy[i2], axis=1) < cfg.reproj_gate * np.sqrt(kf2.sigma2[i2])
        for a, b, Xi in zip(i1[ok], i2[ok], X[ok]):
            mp = graph.new_point(Xi, kf, int(a))
            graph.add_observation(mp, kf, int(a))
            graph.add_observation(mp, kf2, int(b))
            graph.update_point(mp)
            created.append(mp)
    graph.refresh()
    return created


# ----------------------------------------------------------------------------
# fusion of duplicates
# ----------------------------------------------------------------------------


def fuse_points(target: KeyFrame, point_ids, graph: Map, K: CameraIntrinsics, gate: float,
                radius: float | None = None, positions: dict | None = None) -> int:
    """Project points into ``target`` and merge them with what they land on.

    ``positions`` optionally overrides point positions (used after loop
    correction). Returns the number of fused or added observations.
    """
    radius = graph.cfg.fuse_radius if radius is None else radius
    pts = []
    for pid in point_ids:
        mp = graph.resolve_point(pid)
        if mp is not None and target.id not in mp.observations:
            pts.append(mp)
    pts = list({mp.id: mp for mp in pts}.values())
    if not pts:
        return 0
    X = np.stack([positions.get(mp.id, mp.position) if positions else mp.position for mp in pts])
    uv, z = project_points(X, target.pose, K)
    vis = np.flatnonzero((z > 0) & K.in_image(uv))
    if len(vis) == 0:
        return 0
    desc = Descriptors.concat([pts[i].descriptor for i in vis])
    m = match_in_windows(desc, uv[vis], target.descriptors, target.keypoints.xy, radius, gate)
    n = 0
    for qi, ci in zip(m.idx_a, m.idx_b):
        mp = pts[vis[qi]]
        if mp.bad or target.id in mp.observations:
            continue
        existing = target.map_points[ci]
        if existing >= 0:
            other = graph.points[int(existing)]
            if other.id == mp.id or other.bad:
                continue
            if other.n_obs >= mp.n_obs:
                graph.replace_point(mp, other)
            else:
                graph.replace_point(other, mp)
        else:
            graph.add_observation(mp, target, int(ci))
            graph.update_point(mp)
        n += 1
    return n


def fuse_neighbors(kf: KeyFrame, graph: Map, K: CameraIntrinsics, th: MatchThresholds) -> int:
    """Two-way duplicate search between ``kf`` and its first and second order neighbours."""
    cfg = graph.cfg
    targets = []
    for nid in graph.covisible(kf.id, cfg.n_neighbors):
        if nid not in targets:
            targets.append(nid)
        for nid2 in graph.covisible(nid, 5):
            if nid2 != kf.id and nid2 not in targets:
                targets.append(nid2)
    gate = th.gate("strict")
    n = 0
    for tid in targets:
        n += fuse_points(graph.keyframes[tid], kf.map_points[kf.map_points >= 0], graph, K, gate)
    candidates = []
    for tid in targets:
        t = graph.keyframes[tid]
        candidates.extend(int(p) for p in t.map_points[t.map_points >= 0])
    n += fuse_points(kf, sorted(set(candidates)), graph, K, gate)
    for pid in kf.map_points[kf.map_points >= 0]:
        graph.update_point(graph.points[int(pid)])
    graph.refresh()
    return n


# ----------------------------------------------------------------------------
# local bundle adjustment
# ----------------------------------------------------------------------------


def local_window(kf: KeyFrame, graph: Map):
    """(local keyframe ids, local point ids, anchor keyframe ids)."""
    local = [kf.id] + [k for k in graph.covisible(kf.id) if not graph.keyframes[k].bad]
    local_set = set(local)
    pts: dict[int, None] = {}
    for kid in local:
        k = graph.keyframes[kid]
        for pid in k.map_points[k.map_points >= 0]:
            pts.setdefault(int(pid), None)
    anchors = set()
    for pid in pts:
        for kid in graph.points[pid].observations:
            if kid not in local_set:
                anchors.add(kid)
    return local, list(pts), sorted(anchors)


def local_bundle_adjustment(kf: KeyFrame, graph: Map, K: CameraIntrinsics,
                            lm: LMConfig = LMConfig()) -> BAResult | None:
    """Refine the covisible window of ``kf`` with anchors held fixed.

    Keyframes that observe window points without being covisible are fixed
    anchors; the root keyframe is always fixed. Without any fixed keyframe
    the lowest id in the window fixes the gauge. Outlier observations are
    removed from the map afterwards.
    """
    local, pts, anchors = local_window(kf, graph)
    if len(local) < 2 or not pts:
        return None
    fixed = set(anchors)
    if graph.root in local:
        fixed.add(graph.root)
    if not fixed:
        fixed.add(min(local))
    poses = {k: graph.keyframes[k].pose for k in local + anchors}
    points = {p: graph.points[p].position for p in pts}
    obs = []
    for pid in pts:
        for kid, idx in sorted(graph.points[pid].observations.items()):
            if kid in poses:
                k = graph.keyframes[kid]
                obs.append((kid, pid, k.keypoints.xy[idx], 1.0 / k.sigma2[idx]))
    res = bundle_adjust(poses, points, obs, fixed, K, lm, graph.cfg.ba_stages)
    for kid, pose in res.poses.items():
        if kid not in fixed:
            graph.keyframes[kid].pose = pose
    for pid, X in res.points.items():
        graph.points[pid].position = X
    for (kid, pid, _, _), out in zip(obs, res.outliers):
        if out:
            mp = graph.points[pid]
            if kid in mp.observations:
                graph.erase_observation(mp, graph.keyframes[kid])
    for pid in pts:
        graph.update_point(graph.points[pid])
    graph.refresh()
    return res


# ----------------------------------------------------------------------------
# culling
# ----------------------------------------------------------------------------


def cull_points(graph: Map, point_ids=None) -> int:
    """Drop points with too few observers after their window, or rarely found."""
    cfg = graph.cfg
    ids = list(graph.points) if point_ids is None else list(point_ids)
    n = 0
    for pid in ids:
        mp = graph.points.get(int(pid))
        if mp is None or mp.bad:
            continue
        aged = graph.n_inserted - mp.created_at >= cfg.point_window
        if mp.found_ratio < cfg.point_min_found_ratio or (aged and mp.n_obs < cfg.point_min_obs):
            graph.set_bad_point(mp)
            n += 1
    graph.refresh()
    return n


def is_redundant(kf: KeyFrame, graph: Map) -> bool:
    cfg = graph.cfg
    idx = kf.point_indices()
    if len(idx) == 0:
        return False
    redundant = 0
    for i in idx:
        mp = graph.points[int(kf.map_points[i])]
        level = kf.keypoints.octave[i]
        observers = 0
        for other, j in mp.observations.items():
            if other != kf.id and graph.keyframes[other].keypoints.octave[j] <= level:
                observers += 1
                if observers >= cfg.cull_observers:
                    redundant += 1
                    break
    return redundant >= cfg.cull_redundancy * len(idx)


def cull_keyframes(graph: Map, candidates=None) -> list[int]:
    """Cull redundant keyframes. The root and loop keyframes are protected."""
    ids = sorted(k.id for k in graph.live_keyframes()) if candidates is None else list(candidates)
    culled = []
    for kid in ids:
        kf = graph.keyframes[kid]
        if kf.bad or kid == graph.root or kf.loop_edges:
            continue
        if is_redundant(kf, graph) and graph.set_bad_keyframe(kf):
            culled.append(kid)
    return culled


def cull(graph: Map, candidates=None) -> tuple[int, list[int]]:
    return cull_points(graph), cull_keyframes(graph, candidates)


# ----------------------------------------------------------------------------
# integrity and snapshots
# ----------------------------------------------------------------------------


def check_integrity(graph: Map) -> list[str]:
    """Return a list of invariant violations (empty when consistent)."""
    errs = []
    for mp in graph.points.values():
        if mp.bad:
            continue
        if not mp.observations:
            errs.append(f"point {mp.id} has no observations")
        for kid, idx in mp.observations.items():
            kf = graph.keyframes.get(kid)
            if kf is None or kf.bad:
                errs.append(f"point {mp.id} observed by dead keyframe {kid}")
            elif kf.map_points[idx] != mp.id:
                errs.append(f"point {mp.id} -> kf {kid}[{idx}] not mirrored")
    live = {k.id: k for k in graph.live_keyframes()}
    for kf in live.values():
        for idx in kf.point_indices():
            mp = graph.points.get(int(kf.map_points[idx]))
            if mp is None or mp.bad or mp.observations.get(kf.id) != idx:
                errs.append(f"kf {kf.id}[{idx}] -> point {kf.map_points[idx]} not mirrored")
        counts: Counter = Counter()
        for pid in kf.map_points[kf.map_points >= 0]:
            for other in graph.points[int(pid)].observations:
                if other != kf.id:
                    counts[other] += 1
        expected = {o: w for o, w in counts.items() if w >= graph.cfg.covis_min}
        if kf.covis != expected:
            errs.append(f"kf {kf.id} edges {kf.covis} != shared counts {expected}")
        for o, w in kf.covis.items():
            if live.get(o) is None or live[o].covis.get(kf.id) != w:
                errs.append(f"edge {kf.id}-{o} not symmetric")
        if kf.id != graph.root:
            seen = {kf.id}
            cur = kf
            while cur.id != graph.root:
                if cur.parent is None or cur.parent not in live or cur.parent in seen:
                    errs.append(f"kf {kf.id} does not reach the root")
                    break
                seen.add(cur.parent)
                cur = live[cur.parent]
    return errs


SNAPSHOT_VERSION = 1


def save_snapshot(graph: Map, path) -> None:
    """Write a diagnostic ``.npz`` dump.

    Arrays: ``version``; ``kf_id``, ``kf_frame``, ``kf_time``, ``kf_pose``
    (N,3,4 world->camera), ``kf_parent`` (-1 for none), ``kf_bad``;
    ``pt_id``, ``pt_xyz``; ``obs`` rows ``(point, keyframe, keypoint)``;
    ``edges`` rows ``(kf_a, kf_b, weight)`` with kf_a < kf_b.
    """
    kfs = sorted(graph.keyframes.values(), key=lambda k: k.id)
    pts = sorted(graph.live_points(), key=lambda p: p.id)
    obs = [(mp.id, k, i) for mp in pts for k, i in sorted(mp.observations.items())]
    edges = sorted({(min(a.id, b), max(a.id, b), w) for a in kfs if not a.bad for b, w in a.covis.items()})
    buf = io.BytesIO()
    np.savez(
        buf,
        version=np.array(SNAPSHOT_VERSION),
        kf_id=np.array([k.id for k in kfs], dtype=np.int64),
        kf_frame=np.array([k.frame_id for k in kfs], dtype=np.int64),
        kf_time=np.array([k.timestamp for k in kfs]),
        kf_pose=np.array([graph.world_pose(k.id).matrix[:3] for k in kfs]).reshape(-1, 3, 4),
        kf_parent=np.array([-1 if k.parent is None else k.parent for k in kfs], dtype=np.int64),
        kf_bad=np.array([k.bad for k in kfs], dtype=bool),
        pt_id=np.array([p.id for p in pts], dtype=np.int64),
        pt_xyz=np.array([p.position for p in pts]).reshape(-1, 3),
        obs=np.array(obs, dtype=np.int64).reshape(-1, 3),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 3),
    )
    atomic_write_bytes(path, buf.getvalue())


def load_snapshot(path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}
