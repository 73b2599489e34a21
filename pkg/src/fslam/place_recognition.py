"""Bag-of-words place recognition, loop closing and relocalization.

A :class:`Vocabulary` is a k-ary tree built by recursive k-means over a
descriptor corpus; its leaves are visual words weighted by IDF. Keyframes
are summarised as sparse, L1-normalised TF-IDF vectors and indexed by a
:class:`KeyFrameDatabase`. Loop closing confirms candidates over
consecutive keyframes, estimates a similarity between the two sides,
propagates it, fuses duplicated points and runs a pose-graph optimisation
on Sim(3) over the essential graph.
"""
from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (CollinearDegenerate, CorpusTooSmall, InsufficientInliers, TooFewAssociations,
                     VariantMismatch, VocabularyFileError)
from .features import (BINARY, REAL, Descriptors, Matches, MatchThresholds, match_distance_matrix,
                       match_in_windows)
from .geometry import CameraIntrinsics, Pose, SimTransform, pnp_ransac, project_points, sim3_exp, sim3_log, umeyama
from .io_utils import atomic_write_bytes
from .mapping import KeyFrame, Map
from .optim import LMConfig, optimize_pose

# ----------------------------------------------------------------------------
# vocabulary
# ----------------------------------------------------------------------------

VOCAB_MAGIC = b"FSLV"
VOCAB_VERSION = 1
_VOCAB_HEADER = struct.Struct("<4sIIIBIII")  # magic, version, k, L, variant, length, words, nodes
_MEDOID_CANDIDATES = 256


class BowVector(dict):
    """Sparse word id -> weight map."""

    def normalized(self) -> "BowVector":
        total = sum(self.values())
        return BowVector({w: v / total for w, v in self.items()}) if total > 0 else BowVector()


@dataclass(eq=False)
class Vocabulary:
    k: int
    L: int
    kind: str
    length: int
    parent: np.ndarray  # (n_nodes,) int32, -1 for the root
    centroids: Descriptors  # one row per node (the root row is zeros)
    is_leaf: np.ndarray
    word_id: np.ndarray  # -1 for internal nodes
    idf: np.ndarray  # per node, 0 for internal nodes
    children: list = field(init=False, repr=False)
    depth: np.ndarray = field(init=False, repr=False)
    word_node: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.parent)
        kids = [[] for _ in range(n)]
        depth = np.zeros(n, dtype=np.int64)
        for i in range(1, n):
            kids[self.parent[i]].append(i)
            depth[i] = depth[self.parent[i]] + 1
        self.children = [np.asarray(c, dtype=np.int64) for c in kids]
        self.depth = depth
        words = np.flatnonzero(self.is_leaf)
        self.word_node = np.empty(len(words), dtype=np.int64)
        self.word_node[self.word_id[words]] = words

    @property
    def n_words(self) -> int:
        return int(self.is_leaf.sum())

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    def check(self, descs: Descriptors) -> None:
        if descs.kind != self.kind or descs.length != self.length:
            raise VariantMismatch(f"vocabulary is {self.kind}/{self.length}, descriptors are {descs.kind}/{descs.length}")

    def descend(self, descs: Descriptors) -> np.ndarray:
        """Leaf node reached by greedy descent for each descriptor."""
        self.check(descs)
        node = np.zeros(len(descs), dtype=np.int64)
        active = np.flatnonzero(~self.is_leaf[node])
        while len(active):
            cur = node[active]
            for nd in np.unique(cur):
                sel = active[cur == nd]
                kids = self.children[nd]
                D = descs[sel].distances(self.centroids[kids])
                node[sel] = kids[np.argmin(D, axis=1)]
            active = active[~self.is_leaf[node[active]]]
        return node

    def ancestor(self, nodes: np.ndarray, depth: int) -> np.ndarray:
        out = np.asarray(nodes, dtype=np.int64).copy()
        for i in range(len(out)):
            while self.depth[out[i]] > depth:
                out[i] = self.parent[out[i]]
        return out

    def words(self, descs: Descriptors) -> np.ndarray:
        return self.word_id[self.descend(descs)]

    def transform(self, descs: Descriptors, fv_levels_up: int = 2) -> tuple[BowVector, dict]:
        """(BoW vector, feature vector) of a descriptor set.

        The feature vector groups keypoint indices by their ancestor node
        ``fv_levels_up`` levels above the leaves; it restricts matching to
        descriptors sharing a branch.
        """
        if len(descs) == 0:
            self.check(descs)
            return BowVector(), {}
        leaves = self.descend(descs)
        w = self.word_id[leaves]
        tf = np.bincount(w, minlength=self.n_words).astype(float) / len(w)
        weights = tf * self.idf[self.word_node]
        nz = np.flatnonzero(weights > 0)
        bow = BowVector({int(i): float(weights[i]) for i in nz}).normalized()
        fv_depth = max(1, self.L - fv_levels_up)
        anc = self.ancestor(leaves, fv_depth)
        fv: dict[int, list[int]] = defaultdict(list)
        for i, a in enumerate(anc):
            fv[int(a)].append(i)
        return bow, {k: np.asarray(v, dtype=np.int64) for k, v in sorted(fv.items())}

    # --------------------------------------------------------------- file IO

    def to_bytes(self) -> bytes:
        variant = 0 if self.kind == BINARY else 1
        head = _VOCAB_HEADER.pack(VOCAB_MAGIC, VOCAB_VERSION, self.k, self.L, variant, self.length,
                                  self.n_words, self.n_nodes)
        rec = np.zeros(self.n_nodes, dtype=_node_dtype(self.kind, self.length))
        rec["parent"] = self.parent
        rec["leaf"] = self.is_leaf
        rec["word"] = self.word_id
        rec["idf"] = self.idf
        rec["centroid"] = self.centroids.data
        return head + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Vocabulary":
        if len(data) < _VOCAB_HEADER.size:
            raise VocabularyFileError("truncated vocabulary header")
        magic, version, k, L, variant, length, n_words, n_nodes = _VOCAB_HEADER.unpack_from(data)
        if magic != VOCAB_MAGIC:
            raise VocabularyFileError(f"bad magic {magic!r}")
        if version != VOCAB_VERSION:
            raise VocabularyFileError(f"unsupported vocabulary version {version}")
        if variant not in (0, 1):
            raise VocabularyFileError(f"unknown descriptor variant {variant}")
        kind = BINARY if variant == 0 else REAL
        dt = _node_dtype(kind, length)
        body = data[_VOCAB_HEADER.size:]
        if len(body) != n_nodes * dt.itemsize:
            raise VocabularyFileError("node table size does not match header")
        rec = np.frombuffer(body, dtype=dt)
        parent = rec["parent"].astype(np.int32)
        if n_nodes == 0 or parent[0] != -1 or np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, n_nodes)):
            raise VocabularyFileError("malformed node table")
        leaf = rec["leaf"].astype(bool)
        if int(leaf.sum()) != n_words:
            raise VocabularyFileError("word count does not match header")
        cent = Descriptors(kind, rec["centroid"].copy(), length)
        return cls(k, L, kind, length, parent, cent, leaf, rec["word"].astype(np.int32), rec["idf"].astype(np.float64))

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise VocabularyFileError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(data)


def _node_dtype(kind: str, length: int) -> np.dtype:
    payload = ("u1", ((length + 7) // 8,)) if kind == BINARY else ("<f4", (length,))
    return np.dtype([("parent", "<i4"), ("leaf", "u1"), ("word", "<i4"), ("idf", "<f8"), ("centroid",) + payload])


def _kmeanspp(descs: Descriptors, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(descs)
    centers = [int(rng.integers(n))]
    d2 = descs.distances(descs[[centers[0]]])[:, 0] ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        c = int(rng.choice(n, p=d2 / total))
        centers.append(c)
        d2 = np.minimum(d2, descs.distances(descs[[c]])[:, 0] ** 2)
    return np.asarray(centers)


def _centroid(descs: Descriptors, rng: np.random.Generator) -> np.ndarray:
    if descs.kind == REAL:
        return descs.data.astype(np.float64).mean(axis=0).astype(np.float32)
    n = len(descs)
    cand = np.arange(n) if n <= _MEDOID_CANDIDATES else np.sort(rng.choice(n, _MEDOID_CANDIDATES, replace=False))
    cost = descs[cand].distances(descs).sum(axis=1)
    return descs.data[cand[int(np.argmin(cost))]]


def _kmeans(descs: Descriptors, k: int, rng: np.random.Generator, max_iter: int = 25) -> list[np.ndarray]:
    seeds = _kmeanspp(descs, k, rng)
    cent = Descriptors(descs.kind, descs.data[seeds], descs.length)
    assign = None
    for _ in range(max_iter):
        new = np.argmin(descs.distances(cent), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        rows = []
        for c in range(len(cent)):
            members = np.flatnonzero(assign == c)
            rows.append(_centroid(descs[members], rng) if len(members) else cent.data[c])
        cent = Descriptors(descs.kind, np.stack(rows), descs.length)
    return [np.flatnonzero(assign == c) for c in range(len(cent)) if np.any(assign == c)]


def train_vocabulary(corpus, k: int = 10, L: int = 6, seed: int = 0) -> Vocabulary:
    """Hierarchical k-means vocabulary.

    ``corpus`` is either one :class:`Descriptors` (every descriptor counts as
    a document for IDF) or a list of per-image descriptor sets.
    """
    docs = [corpus] if isinstance(corpus, Descriptors) else list(corpus)
    if not docs:
        raise CorpusTooSmall("empty corpus")
    allD = Descriptors.concat(docs)
    if k < 2 or L < 1:
        raise ValueError("need k >= 2 and L >= 1")
    if len(allD) < k:
        raise CorpusTooSmall(f"corpus has {len(allD)} descriptors, need at least k={k}")
    rng = np.random.default_rng(seed)
    parent = [-1]
    rows = [np.zeros_like(allD.data[0])]
    queue = [(0, np.arange(len(allD)), 0)]
    has_children = [False]
    while queue:
        node, idx, level = queue.pop(0)
        sub = allD[idx]
        _, uniq = np.unique(sub.data, axis=0, return_index=True)
        uniq = np.sort(uniq)
        if len(uniq) <= k:
            groups = [np.flatnonzero(np.all(sub.data == sub.data[u], axis=1)) for u in uniq]
            cents = [sub.data[u] for u in uniq]
        else:
            groups = _kmeans(sub, k, rng)
            cents = [_centroid(sub[g], rng) for g in groups]
        has_children[node] = True
        for g, c in zip(groups, cents):
            child = len(parent)
            parent.append(node)
            rows.append(c)
            has_children.append(False)
            if level + 1 < L and len(np.unique(sub.data[g], axis=0)) > 1:
                queue.append((child, idx[g], level + 1))
    parent_a = np.asarray(parent, dtype=np.int32)
    leaf = ~np.asarray(has_children)
    word = np.full(len(parent), -1, dtype=np.int32)
    word[leaf] = np.arange(int(leaf.sum()), dtype=np.int32)
    cent = Descriptors(allD.kind, np.stack(rows), allD.length)
    vocab = Vocabulary(k, L, allD.kind, allD.length, parent_a, cent, leaf, word, np.zeros(len(parent)))
    # document frequencies via the same descent used at query time
    if len(docs) == 1:
        w = vocab.words(allD)
        n_docs = len(allD)
        df = np.bincount(w, minlength=vocab.n_words)
    else:
        n_docs = len(docs)
        df = np.zeros(vocab.n_words, dtype=np.int64)
        for d in docs:
            if len(d):
                df[np.unique(vocab.words(d))] += 1
    idf = np.zeros(len(parent))
    seen = df > 0
    idf[vocab.word_node[seen]] = np.log(n_docs / df[seen])
    vocab.idf = idf
    return vocab


def to_bow(descriptors: Descriptors, vocab: Vocabulary) -> BowVector:
    return vocab.transform(descriptors)[0]


def score(a: dict, b: dict) -> float:
    """L1 similarity 1 - |a - b|_1 / 2 of L1-normalised vectors."""
    if not a or not b:
        return 0.0
    sa = sum(a.values())
    sb = sum(b.values())
    if sa <= 0 or sb <= 0:
        return 0.0
    if len(b) < len(a):
        a, b, sa, sb = b, a, sb, sa
    s = sum(min(v / sa, b[w] / sb) for w, v in a.items() if w in b)
    return float(min(max(s, 0.0), 1.0))


# ----------------------------------------------------------------------------
# database
# ----------------------------------------------------------------------------


class KeyFrameDatabase:
    """Inverted index from words to keyframes."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.index: dict[int, set[int]] = defaultdict(set)
        self.entries: dict[int, KeyFrame] = {}

    def __len__(self):
        return len(self.entries)

    def compute(self, kf) -> None:
        if getattr(kf, "bow", None) is None:
            kf.bow, kf.feature_vector = self.vocab.transform(kf.descriptors)

    def add(self, kf: KeyFrame) -> None:
        self.compute(kf)
        self.entries[kf.id] = kf
        for w in kf.bow:
            self.index[w].add(kf.id)

    def erase(self, kf_id: int) -> None:
        kf = self.entries.pop(kf_id, None)
        if kf is not None:
            for w in kf.bow:
                self.index[w].discard(kf_id)

    def query(self, bow: dict, exclude=(), min_score: float = 0.0) -> list[tuple[int, float]]:
        """Keyframes sharing a word with ``bow`` and scoring at least ``min_score``."""
        shared = set()
        for w in bow:
            shared |= self.index.get(w, set())
        out = []
        for kid in sorted(shared - set(exclude)):
            kf = self.entries[kid]
            if kf.bad:
                continue
            s = score(bow, kf.bow)
            if s > 0 and s >= min_score:
                out.append((kid, s))
        out.sort(key=lambda x: (-x[1], x[0]))
        return out


# ----------------------------------------------------------------------------
# loop detection
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LoopConfig:
    min_keyframes: int = 10
    consistency: int = 3
    min_inliers: int = 20
    ransac_iterations: int = 300
    ransac_chi2: float = 9.21
    fix_scale: bool = False
    essential_min_weight: int = 100
    group_ratio: float = 0.75
    pgo_iterations: int = 20
    fuse_radius: float = 4.0


@dataclass(frozen=True)
class LoopCandidate:
    query: int
    match: int
    score: float
    consistency: int


class LoopDetector:
    """Stateful candidate search with covisibility-group consistency."""

    def __init__(self, cfg: LoopConfig = LoopConfig()):
        self.cfg = cfg
        self.groups: list[tuple[frozenset, int]] = []

    def reset(self) -> None:
        self.groups = []

    def detect_loop(self, kf: KeyFrame, graph: Map, db: KeyFrameDatabase) -> LoopCandidate | None:
        others = [k for k in db.entries if k != kf.id and not db.entries[k].bad]
        if len(others) < self.cfg.min_keyframes or not kf.bow:
            self.groups = []
            return None
        neighbors = graph.covisible(kf.id)
        s_min = min((score(kf.bow, graph.keyframes[n].bow or {}) for n in neighbors), default=0.0)
        exclude = set(neighbors) | {kf.id}
        cands = db.query(kf.bow, exclude, s_min)
        if not cands:
            self.groups = []
            return None
        sc = dict(cands)
        # accumulate over covisibility groups, keep the strongest groups
        reps = []
        for kid, s in cands:
            acc, best, best_s = s, kid, s
            for n in graph.covisible(kid, 10):
                if n in sc and n not in exclude:
                    acc += sc[n]
                    if sc[n] > best_s:
                        best, best_s = n, sc[n]
            reps.append((acc, best, best_s))
        top = max(r[0] for r in reps)
        chosen: dict[int, float] = {}
        for acc, best, best_s in reps:
            if acc >= self.cfg.group_ratio * top:
                chosen[best] = best_s
        new_groups = []
        confirmed = []
        for kid in sorted(chosen):
            group = frozenset([kid, *graph.covisible(kid)])
            count = 1
            for prev, c in self.groups:
                if group & prev:
                    count = max(count, c + 1)
            new_groups.append((group, count))
            if count >= self.cfg.consistency:
                confirmed.append((chosen[kid], kid, count))
        self.groups = new_groups
        if not confirmed:
            return None
        s, kid, count = max(confirmed, key=lambda x: (x[0], -x[1]))
        return LoopCandidate(kf.id, kid, float(s), count)


# ----------------------------------------------------------------------------
# loop transform
# ----------------------------------------------------------------------------


def match_by_bow(kf1, kf2, th: MatchThresholds, mode: str = "strict", only_points2: bool = True,
                 graph: Map | None = None) -> Matches:
    """Descriptor matching restricted to shared vocabulary branches.

    With ``only_points2`` only keypoints of ``kf2`` carrying map points take
    part. Falls back to exhaustive matching without feature vectors.
    """
    sel2 = np.flatnonzero(kf2.map_points >= 0) if only_points2 else np.arange(len(kf2.descriptors))
    fv1 = getattr(kf1, "feature_vector", None)
    fv2 = getattr(kf2, "feature_vector", None)
    gate = th.gate(mode)
    if not fv1 or not fv2:
        m = match_distance_matrix(kf1.descriptors.distances(kf2.descriptors[sel2]), gate, th.ratio)
        return Matches(m.idx_a, sel2[m.idx_b], m.distance)
    allowed2 = np.zeros(len(kf2.descriptors), dtype=bool)
    allowed2[sel2] = True
    ia, ib, dd = [], [], []
    for node in sorted(set(fv1) & set(fv2)):
        a = fv1[node]
        b = fv2[node][allowed2[fv2[node]]]
        if len(a) == 0 or len(b) == 0:
            continue
        m = match_distance_matrix(kf1.descriptors[a].distances(kf2.descriptors[b]), gate, th.ratio)
        ia.append(a[m.idx_a])
        ib.append(b[m.idx_b])
        dd.append(m.distance)
    if not ia:
        return Matches.empty()
    return Matches(np.concatenate(ia), np.concatenate(ib), np.concatenate(dd))


@dataclass
class LoopTransform:
    S12: SimTransform  # loop keyframe camera -> query keyframe camera
    S_query: SimTransform  # corrected world->camera similarity of the query keyframe
    points_query: np.ndarray  # matched map point ids (query side)
    points_loop: np.ndarray  # matched map point ids (loop side)
    inliers: np.ndarray

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def world_correction(lt: LoopTransform, query_pose: Pose) -> SimTransform:
    """Similarity taking the drifted world frame of the query side to the corrected one."""
    return lt.S_query.inverse() @ SimTransform.from_pose(query_pose)


def _reproj_inliers(S12: SimTransform, P1, P2, uv1, uv2, s1, s2, K, chi2):
    Q1 = S12.apply(P2)
    Q2 = S12.inverse().apply(P1)
    ok = (Q1[:, 2] > 0) & (Q2[:, 2] > 0)
    ident = Pose.identity()
    p1, _ = project_points(Q1, ident, K)
    p2, _ = project_points(Q2, ident, K)
    e1 = ((p1 - uv1) ** 2).sum(axis=1) / s1
    e2 = ((p2 - uv2) ** 2).sum(axis=1) / s2
    return ok & (e1 < chi2) & (e2 < chi2)


def compute_loop_transform(candidate: LoopCandidate, graph: Map, K: CameraIntrinsics, th: MatchThresholds,
                           cfg: LoopConfig = LoopConfig(), seed: int = 0) -> LoopTransform:
    """Similarity between the loop keyframe and the query keyframe from matched map points."""
    kf1 = graph.keyframes[candidate.query]
    kf2 = graph.keyframes[candidate.match]
    m = match_by_bow(kf1, kf2, th, "relaxed")
    keep = kf1.map_points[m.idx_a] >= 0
    i1, i2 = m.idx_a[keep], m.idx_b[keep]
    pts1 = kf1.map_points[i1]
    pts2 = kf2.map_points[i2]
    # one pair per distinct point on each side
    _, u1 = np.unique(pts1, return_index=True)
    u1 = np.sort(u1)
    i1, i2, pts1, pts2 = i1[u1], i2[u1], pts1[u1], pts2[u1]
    n = len(i1)
    if n < cfg.min_inliers:
        raise InsufficientInliers(f"{n} matched map points, need {cfg.min_inliers}")
    P1 = kf1.pose.transform(np.stack([graph.points[int(p)].position for p in pts1]))
    P2 = kf2.pose.transform(np.stack([graph.points[int(p)].position for p in pts2]))
    uv1, uv2 = kf1.keypoints.xy[i1], kf2.keypoints.xy[i2]
    s1, s2 = kf1.sigma2[i1], kf2.sigma2[i2]
    rng = np.random.default_rng(seed)
    best, best_mask = None, None
    for _ in range(cfg.ransac_iterations):
        idx = rng.choice(n, 3, replace=False)
        try:
            S = umeyama(P2[idx], P1[idx], with_scale=not cfg.fix_scale)
        except (CollinearDegenerate, TooFewAssociations, ValueError):
            continue
        mask = _reproj_inliers(S, P1, P2, uv1, uv2, s1, s2, K, cfg.ransac_chi2)
        if best_mask is None or mask.sum() > best_mask.sum():
            best, best_mask = S, mask
            if mask.all():
                break
    if best is None or best_mask.sum() < max(cfg.min_inliers, 3):
        got = 0 if best_mask is None else int(best_mask.sum())
        raise InsufficientInliers(f"{got} similarity inliers, need {cfg.min_inliers}")
    for _ in range(2):
        best = umeyama(P2[best_mask], P1[best_mask], with_scale=not cfg.fix_scale, allow_degenerate=True)
        mask = _reproj_inliers(best, P1, P2, uv1, uv2, s1, s2, K, cfg.ransac_chi2)
        if mask.sum() < cfg.min_inliers:
            raise InsufficientInliers(f"{int(mask.sum())} similarity inliers after refinement")
        if np.array_equal(mask, best_mask):
            break
        best_mask = mask
    S_query = best @ SimTransform.from_pose(kf2.pose)
    return LoopTransform(best, S_query, pts1, pts2, best_mask)


# ----------------------------------------------------------------------------
# pose graph on Sim(3)
# ----------------------------------------------------------------------------


def _sim_compose(a, b):
    sa, Ra, ta = a
    sb, Rb, tb = b
    return sa * sb, Ra @ Rb, sa[:, None] * np.einsum("nij,nj->ni", Ra, tb) + ta


def _sim_inverse(a):
    s, R, t = a
    Rt = np.transpose(R, (0, 2, 1))
    return 1.0 / s, Rt, -(1.0 / s)[:, None] * np.einsum("nij,nj->ni", Rt, t)


def _edge_residuals(S, meas, ei, ej):
    """log(meas_ij * S_j * S_i^-1) for all edges."""
    s, R, t = S
    Sj = (s[ej], R[ej], t[ej])
    Si_inv = _sim_inverse((s[ei], R[ei], t[ei]))
    return sim3_log(*_sim_compose(_sim_compose(meas, Sj), Si_inv))


@dataclass
class PoseGraphResult:
    sims: dict  # kf id -> SimTransform (world -> camera)
    initial_cost: float
    final_cost: float
    history: list


def optimize_pose_graph(sims: dict, edges: list[tuple[int, int, SimTransform]], fixed: set,
                        iterations: int = 20, h: float = 1e-6) -> PoseGraphResult:
    """Minimise sum |log(S_ij * S_j * S_i^-1)|^2 over world->camera similarities.

    Variables are updated on the left, ``S_i <- Exp(d) S_i``; Jacobians are
    central differences evaluated for all edges at once.
    """
    ids = sorted(sims)
    pos = {k: i for i, k in enumerate(ids)}
    n = len(ids)
    s = np.array([sims[k].scale for k in ids])
    R = np.stack([sims[k].R for k in ids])
    t = np.stack([sims[k].t for k in ids])
    S = (s, R, t)
    if not edges:
        return PoseGraphResult(dict(sims), 0.0, 0.0, [0.0])
    ei = np.array([pos[e[0]] for e in edges])
    ej = np.array([pos[e[1]] for e in edges])
    meas = (np.array([e[2].scale for e in edges]), np.stack([e[2].R for e in edges]), np.stack([e[2].t for e in edges]))
    free = np.array([k not in fixed for k in ids])
    col = np.full(n, -1)
    col[free] = np.arange(free.sum())
    nv = int(free.sum())

    def cost_of(S_):
        r = _edge_residuals(S_, meas, ei, ej)
        return float((r**2).sum()), r

    cost, r = cost_of(S)
    history = [cost]
    initial = cost
    lam = 1e-4
    E = len(edges)
    for _ in range(iterations):
        if nv == 0 or cost < 1e-24:
            break
        Ji = np.zeros((E, 7, 7))
        Jj = np.zeros((E, 7, 7))
        for d in range(7):
            delta = np.zeros(7)
            delta[d] = h
            for side, J in ((0, Ji), (1, Jj)):
                rp = _edge_residuals_side(S, side, delta, meas, ei, ej)
                rm = _edge_residuals_side(S, side, -delta, meas, ei, ej)
                J[:, :, d] = (rp - rm) / (2 * h)
        H = np.zeros((7 * nv, 7 * nv))
        g = np.zeros(7 * nv)
        for e in range(E):
            blocks = []
            if free[ei[e]]:
                blocks.append((col[ei[e]], Ji[e]))
            if free[ej[e]]:
                blocks.append((col[ej[e]], Jj[e]))
            for a, Ja in blocks:
                g[7 * a:7 * a + 7] += Ja.T @ r[e]
                for b, Jb in blocks:
                    H[7 * a:7 * a + 7, 7 * b:7 * b + 7] += Ja.T @ Jb
        accepted = False
        while lam < 1e12:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                dx = -cho_solve(cho_factor(A), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            Snew = _apply_update(S, free, dx.reshape(nv, 7))
            new_cost, new_r = cost_of(Snew)
            if new_cost < cost:
                S, cost, r = Snew, new_cost, new_r
                history.append(cost)
                lam = max(lam / 10, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted or np.abs(dx).max() < 1e-14:
            break
    out = {k: SimTransform(float(S[0][i]), S[1][i], S[2][i]) for i, k in enumerate(ids)}
    for k in fixed:
        if k in sims:
            out[k] = sims[k]
    return PoseGraphResult(out, initial, cost, history)


def _edge_residuals_side(S, side, delta, meas, ei, ej):
    """Edge residuals with Exp(delta) applied to the first (side 0) or second endpoint."""
    s, R, t = S
    ds, dR, dt = sim3_exp(delta)
    rows = ei if side == 0 else ej
    Sp = (ds * s[rows], dR @ R[rows], ds * (t[rows] @ dR.T) + dt)
    Si = Sp if side == 0 else (s[ei], R[ei], t[ei])
    Sj = Sp if side == 1 else (s[ej], R[ej], t[ej])
    return sim3_log(*_sim_compose(_sim_compose(meas, Sj), _sim_inverse(Si)))


def _apply_update(S, free, dx):
    s, R, t = (a.copy() for a in S)
    idx = np.flatnonzero(free)
    ds, dR, dt = sim3_exp(dx)
    s[idx] = ds * s[idx]
    t[idx] = ds[:, None] * np.einsum("nij,nj->ni", dR, t[idx]) + dt
    R[idx] = dR @ R[idx]
    return s, R, t


def essential_graph_edges(graph: Map, sims_before: dict, extra_loop: dict | None = None,
                          sims_loop: dict | None = None, min_weight: int = 100):
    """Spanning tree, strong covisibility and loop edges with their measurements.

    Ordinary edges take their measurement from ``sims_before``; pairs in
    ``extra_loop`` (kf id -> set of kf ids) use ``sims_loop``.
    """
    live = {k.id for k in graph.live_keyframes()}
    pairs: dict[tuple[int, int], str] = {}
    for kid in sorted(live):
        kf = graph.keyframes[kid]
        if kf.parent is not None and kf.parent in live:
            pairs.setdefault(tuple(sorted((kid, kf.parent))), "tree")
        for o in kf.loop_edges:
            if o in live:
                pairs.setdefault(tuple(sorted((kid, o))), "tree")
        for o, w in kf.covis.items():
            if w >= min_weight and o in live:
                pairs.setdefault(tuple(sorted((kid, o))), "tree")
    if extra_loop:
        for a, bs in extra_loop.items():
            for b in bs:
                if a in live and b in live:
                    pairs[tuple(sorted((a, b)))] = "loop"
    edges = []
    for (a, b), kind in sorted(pairs.items()):
        src = sims_loop if kind == "loop" else sims_before
        edges.append((a, b, src[a] @ src[b].inverse()))
    return edges


def loop_edge_residual(sims: dict, a: int, b: int, meas: SimTransform) -> float:
    r = (meas @ sims[b] @ sims[a].inverse()).log()
    return float(np.linalg.norm(r))


@dataclass
class LoopCorrection:
    query: int
    match: int
    fused: int
    residual_before: float
    residual_after: float
    pgo: PoseGraphResult


def correct_loop(lt: LoopTransform, candidate: LoopCandidate, graph: Map, K: CameraIntrinsics,
                 th: MatchThresholds, cfg: LoopConfig = LoopConfig()) -> LoopCorrection:
    """Propagate the loop similarity, fuse duplicates and optimise the essential graph."""
    with graph.lock:
        q = graph.keyframes[candidate.query]
        loop_kf = graph.keyframes[candidate.match]
        group = [q.id] + [k for k in graph.covisible(q.id) if not graph.keyframes[k].bad]
        prev_conn = {k: set(graph.keyframes[k].covis) for k in group}

        sims_before = {k.id: SimTransform.from_pose(k.pose) for k in graph.live_keyframes()}
        corrected = {}
        Twq = q.pose.inverse()
        for kid in group:
            Tiq = graph.keyframes[kid].pose @ Twq
            corrected[kid] = SimTransform.from_pose(Tiq) @ lt.S_query
        meas_loop = lt.S_query @ sims_before[loop_kf.id].inverse()
        residual_before = loop_edge_residual(sims_before, q.id, loop_kf.id, meas_loop)

        # move the points seen by the group, then the group poses
        point_ref: dict[int, int] = {}
        for kid in group:
            kf = graph.keyframes[kid]
            for pid in kf.map_points[kf.map_points >= 0]:
                pid = int(pid)
                if pid in point_ref:
                    continue
                mp = graph.points[pid]
                mp.position = corrected[kid].inverse().apply(sims_before[kid].apply(mp.position))
                point_ref[pid] = kid
        for kid in group:
            graph.keyframes[kid].pose = corrected[kid].to_pose()
        for pid in point_ref:
            graph.update_point(graph.points[pid])

        # fuse loop-side points into the corrected group
        loop_group = [loop_kf.id] + [k for k in graph.covisible(loop_kf.id) if not graph.keyframes[k].bad]
        loop_points = sorted({int(p) for k in loop_group for p in graph.keyframes[k].map_points
                              if p >= 0})
        fused = 0
        for kid in group:
            fused += _fuse_loop_points(graph.keyframes[kid], loop_points, graph, K, th.gate("strict"), cfg.fuse_radius)
        for kid in group:
            graph._dirty.add(kid)
        graph.refresh()
        new_links = {}
        for kid in group:
            links = set(graph.keyframes[kid].covis) - prev_conn[kid] - set(group)
            if links:
                new_links[kid] = links
        new_links.setdefault(q.id, set()).add(loop_kf.id)

        # pose graph: corrected sims for the group, previous sims elsewhere
        sims_init = dict(sims_before)
        sims_init.update({k: corrected[k] for k in group})
        edges = essential_graph_edges(graph, sims_before, new_links, sims_init, cfg.essential_min_weight)
        res = optimize_pose_graph(sims_init, edges, {loop_kf.id}, cfg.pgo_iterations)
        residual_after = loop_edge_residual(res.sims, q.id, loop_kf.id, meas_loop)

        # points follow their reference keyframe
        for mp in graph.live_points():
            ref = point_ref.get(mp.id)
            if ref is None:
                ref = mp.first_kf if mp.first_kf in res.sims else min(mp.observations)
                if ref not in res.sims:
                    continue
            mp.position = res.sims[ref].inverse().apply(sims_init[ref].apply(mp.position))
        for kid, S in res.sims.items():
            graph.keyframes[kid].pose = S.to_pose()
        for mp in graph.live_points():
            graph.update_point(mp)
        graph.add_loop_edge(q.id, loop_kf.id)
        graph.refresh()
        return LoopCorrection(q.id, loop_kf.id, fused, residual_before, residual_after, res)


def _fuse_loop_points(target: KeyFrame, point_ids, graph: Map, K, gate, radius) -> int:
    """Like mapping.fuse_points, but a loop point always replaces the local duplicate."""
    pts = [graph.resolve_point(p) for p in point_ids]
    pts = [mp for mp in pts if mp is not None and target.id not in mp.observations]
    if not pts:
        return 0
    X = np.stack([mp.position for mp in pts])
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
            if other.id != mp.id and not other.bad:
                graph.replace_point(other, mp)
                n += 1
        else:
            graph.add_observation(mp, target, int(ci))
            n += 1
    return n


# ----------------------------------------------------------------------------
# relocalization
# ----------------------------------------------------------------------------


@dataclass
class Relocalization:
    pose: Pose
    keyframe: int
    keypoint_idx: np.ndarray
    point_ids: np.ndarray


def relocalize(frame, db: KeyFrameDatabase, graph: Map, K: CameraIntrinsics, th: MatchThresholds,
               min_inliers: int = 15, max_candidates: int = 10, seed: int = 0,
               lm: LMConfig = LMConfig()) -> Relocalization | None:
    """Recover the pose of ``frame`` from database candidates via PnP.

    ``frame`` needs ``descriptors``, ``keypoints`` and ``sigma2``; its BoW is
    computed when missing.
    """
    db.compute(frame)
    if not frame.bow:
        return None
    cands = db.query(frame.bow)
    if not cands:
        return None
    best = cands[0][1]
    cands = [c for c in cands if c[1] >= 0.75 * best][:max_candidates]
    for kid, _ in cands:
        kf = graph.keyframes[kid]
        if kf.bad:
            continue
        m = match_by_bow(frame, kf, th, "relaxed")
        if len(m) < min_inliers:
            continue
        pids = kf.map_points[m.idx_b]
        _, first = np.unique(pids, return_index=True)
        first = np.sort(first)
        qi, pids = m.idx_a[first], pids[first]
        X = np.stack([graph.points[int(p)].position for p in pids])
        uv = frame.keypoints.xy[qi]
        pose, mask = pnp_ransac(X, uv, K, seed=seed)
        if pose is None or mask.sum() < min_inliers:
            continue
        res = optimize_pose(pose, X[mask], uv[mask], 1.0 / frame.sigma2[qi[mask]], K, lm)
        if res.n_inliers >= min_inliers:
            keep = np.flatnonzero(mask)[res.inliers]
            return Relocalization(res.pose, kid, qi[keep], pids[keep])
    return None
