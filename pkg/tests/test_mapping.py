from collections import Counter

import numpy as np
import pytest

from synth import K_TEST, build_graph, make_frame, make_world, slide
from fslam.features import MatchThresholds
from fslam.geometry import Pose, project_points
from fslam.mapping import (Map, MappingConfig, check_integrity, create_map_points, cull_keyframes, cull_points,
                           insert_keyframe, load_snapshot, local_bundle_adjustment, local_window, save_snapshot)

TH = MatchThresholds.binary_default()


def brute_force_edges(graph, min_w):
    edges = {}
    for kf in graph.live_keyframes():
        c = Counter()
        for pid in kf.map_points[kf.map_points >= 0]:
            for other in graph.points[int(pid)].observations:
                if other != kf.id:
                    c[other] += 1
        edges[kf.id] = {o: w for o, w in c.items() if w >= min_w}
    return edges


def assert_consistent(graph):
    assert check_integrity(graph) == []
    edges = brute_force_edges(graph, graph.cfg.covis_min)
    for kf in graph.live_keyframes():
        assert kf.covis == edges[kf.id]


# ---------------------------------------------------------------- insertion

def test_first_keyframe_is_root():
    world = make_world(50)
    graph, (kf,), _ = build_graph(world, [Pose.identity()], min_obs=1)
    assert graph.root == kf.id and kf.covis == {} and kf.parent is None


def test_edges_respect_threshold():
    world = make_world(200)
    ids_a = np.arange(0, 100)
    ids_b = np.arange(100, 200)
    shared = np.concatenate([np.arange(0, 40), np.arange(100, 103)])
    graph, (a, b, c), _ = build_graph(world, [Pose.identity(), slide(x=0.2), slide(x=0.4)],
                                      ids_per_kf=[ids_a, ids_b, shared])
    assert c.covis == {a.id: 40}
    assert a.covis == {c.id: 40} and b.covis == {}
    assert c.parent == a.id
    assert_consistent(graph)


def test_edges_symmetric_with_equal_weight():
    world = make_world(100)
    graph, (a, b), _ = build_graph(world, [Pose.identity(), slide(x=0.3)])
    assert a.covis[b.id] == b.covis[a.id] == 100


# ---------------------------------------------------------------- triangulation

def _two_keyframes(world, mapped_fraction=0.6, seed=0):
    p1, p2 = Pose.identity(), slide(x=0.8, yaw=0.03)
    _, v1 = make_frame(world, p1)
    _, v2 = make_frame(world, p2)
    common = np.intersect1d(v1, v2)
    rng = np.random.default_rng(seed)
    mapped = np.sort(rng.choice(common, size=int(mapped_fraction * len(common)), replace=False))
    graph, (kf1,), _ = build_graph(world, [p1], min_obs=1)
    # keep only the mapped subset as points
    for pid, mp in list(graph.points.items()):
        lid = int(np.flatnonzero(np.all(world.X == mp.position, axis=1))[0])
        if lid not in mapped:
            graph.set_bad_point(mp)
            del graph.points[pid]
    f2, vis2 = make_frame(world, p2, 1)
    kf2 = graph.new_keyframe(1, 0.1, f2.keypoints, f2.descriptors, p2)
    lid_to_pid = {int(np.flatnonzero(np.all(world.X == mp.position, axis=1))[0]): pid
                  for pid, mp in graph.points.items()}
    for idx, lid in enumerate(vis2):
        if int(lid) in lid_to_pid:
            kf2.map_points[idx] = lid_to_pid[int(lid)]
    insert_keyframe(kf2, graph)
    return graph, kf1, kf2, common, mapped


def test_create_map_points_coverage():
    world = make_world(500)
    graph, kf1, kf2, common, mapped = _two_keyframes(world)
    remaining = np.setdiff1d(common, mapped)
    created = create_map_points(kf2, graph, K_TEST, TH)
    assert len(created) >= 0.8 * len(remaining)
    for mp in created:
        err = np.linalg.norm(world.X - mp.position, axis=1)
        assert err.min() < 1e-6
        assert int(np.argmin(err)) in remaining
        assert set(mp.observations) == {kf1.id, kf2.id}
    assert_consistent(graph)


def test_create_map_points_zero_baseline():
    world = make_world(200)
    graph, (kf1, kf2), _ = build_graph(world, [Pose.identity(), Pose.identity()], min_obs=2)
    # detach half of the points so there is something left to triangulate
    for mp in list(graph.points.values())[:100]:
        graph.set_bad_point(mp)
    graph.refresh()
    assert kf2.covis
    assert create_map_points(kf2, graph, K_TEST, TH) == []


def test_create_map_points_rejects_off_epipolar_decoys():
    world = make_world(500)
    graph, kf1, kf2, common, mapped = _two_keyframes(world)
    remaining = np.setdiff1d(common, mapped)
    _, vis2 = make_frame(world, kf2.pose, 1)
    decoys = [i for i, lid in enumerate(vis2) if lid in remaining[:20]]
    kf2.keypoints.xy[decoys, 1] += 25.0  # vertical shift leaves the (mostly horizontal) epipolar lines
    created = create_map_points(kf2, graph, K_TEST, TH)
    used = {mp.observations[kf2.id] for mp in created}
    assert not used & set(decoys)


# ---------------------------------------------------------------- local BA

def _ba_graph():
    world = make_world(300)
    poses = [slide(x=0.25 * i, yaw=0.01 * i) for i in range(4)]
    ids = [None] * 4 + [np.arange(10)]
    graph, kfs, landmark = build_graph(world, poses + [slide(x=-0.5)], ids_per_kf=ids)
    return world, graph, kfs, landmark


def _reprojection_rmse(graph, ids):
    err = []
    for kid in ids:
        kf = graph.keyframes[kid]
        idx = kf.point_indices()
        X = np.stack([graph.points[int(p)].position for p in kf.map_points[idx]])
        uv, _ = project_points(X, kf.pose, K_TEST)
        err.append(np.linalg.norm(uv - kf.keypoints.xy[idx], axis=1))
    return float(np.sqrt(np.mean(np.concatenate(err) ** 2)))


def test_local_window_has_anchor():
    _, graph, kfs, _ = _ba_graph()
    local, pts, anchors = local_window(kfs[3], graph)
    assert sorted(local) == [0, 1, 2, 3] and anchors == [4]


def test_local_ba_perturb_and_recover():
    world, graph, kfs, _ = _ba_graph()
    rng = np.random.default_rng(0)
    anchor_pose = kfs[4].pose
    for kf in kfs[1:4]:
        kf.pose = kf.pose.retract(rng.normal(scale=0.01, size=6))
    for mp in graph.points.values():
        mp.position = mp.position + rng.normal(scale=0.01, size=3)
    res = local_bundle_adjustment(kfs[3], graph, K_TEST)
    assert _reprojection_rmse(graph, range(5)) < 1e-6
    assert kfs[4].pose is anchor_pose
    for h in res.history:
        assert all(b <= a for a, b in zip(h, h[1:]))
    assert_consistent(graph)


def test_local_ba_fixed_point():
    _, graph, kfs, _ = _ba_graph()
    before = {k.id: k.pose for k in kfs}
    pts = {p.id: p.position.copy() for p in graph.points.values()}
    local_bundle_adjustment(kfs[3], graph, K_TEST)
    for k in kfs:
        assert k.pose.allclose(before[k.id], atol=1e-9)
    for pid, X in pts.items():
        assert np.allclose(graph.points[pid].position, X, atol=1e-9)


def test_local_ba_single_keyframe_is_noop():
    world = make_world(50)
    graph, (kf,), _ = build_graph(world, [Pose.identity()], min_obs=1)
    assert local_bundle_adjustment(kf, graph, K_TEST) is None


# ---------------------------------------------------------------- culling

def test_redundant_keyframe_is_culled():
    world = make_world(120)
    poses = [slide(x=0.2 * i) for i in range(6)]
    graph, kfs, _ = build_graph(world, poses)
    culled = cull_keyframes(graph, [kfs[2].id])
    assert culled == [kfs[2].id]
    assert kfs[2].bad
    assert_consistent(graph)


def test_unique_keyframe_is_retained():
    world = make_world(200)
    ids = [np.arange(100)] * 4 + [np.arange(100, 200)]
    graph, kfs, _ = build_graph(world, [slide(x=0.2 * i) for i in range(5)], ids_per_kf=ids, min_obs=1)
    assert cull_keyframes(graph, [kfs[4].id]) == []


def test_root_and_loop_keyframes_protected():
    world = make_world(120)
    graph, kfs, _ = build_graph(world, [slide(x=0.2 * i) for i in range(6)])
    graph.add_loop_edge(kfs[3].id, kfs[5].id)
    assert cull_keyframes(graph, [kfs[0].id, kfs[3].id]) == []


def test_single_observation_point_culled_after_window():
    world = make_world(60)
    graph, kfs, _ = build_graph(world, [slide(x=0.2 * i) for i in range(4)], min_obs=1)
    lonely = graph.new_point(np.array([0.0, 0.0, 5.0]), kfs[3], 0)
    graph.points[lonely.id] = lonely
    lonely.created_at = graph.n_inserted - graph.cfg.point_window
    # give it the observation of a fresh keypoint slot
    kf = kfs[3]
    idx = int(np.flatnonzero(kf.map_points >= 0)[0])
    old = graph.points[int(kf.map_points[idx])]
    graph.erase_observation(old, kf)
    graph.add_observation(lonely, kf, idx)
    assert cull_points(graph, [lonely.id]) == 1 and lonely.bad
    assert check_integrity(graph) == []


def test_rarely_found_point_culled():
    world = make_world(60)
    graph, kfs, _ = build_graph(world, [slide(x=0.2 * i) for i in range(3)])
    mp = next(iter(graph.points.values()))
    mp.visible, mp.found = 10, 2
    assert cull_points(graph, [mp.id]) == 1


def test_culling_keeps_tree_connected():
    world = make_world(150)
    graph, kfs, _ = build_graph(world, [slide(x=0.1 * i) for i in range(10)])
    culled = cull_keyframes(graph)
    assert culled
    assert_consistent(graph)
    # culled keyframes still resolve to a world pose through the tree
    for kid in culled:
        assert graph.world_pose(kid).allclose(kfs[kid].pose, atol=1e-9)


# ---------------------------------------------------------------- snapshot

def test_snapshot_roundtrip(tmp_path):
    world = make_world(80)
    graph, kfs, _ = build_graph(world, [slide(x=0.2 * i) for i in range(3)])
    save_snapshot(graph, tmp_path / "map.npz")
    snap = load_snapshot(tmp_path / "map.npz")
    assert int(snap["version"]) == 1
    assert list(snap["kf_id"]) == [0, 1, 2]
    assert len(snap["pt_xyz"]) == len(graph.points)
    assert len(snap["obs"]) == sum(mp.n_obs for mp in graph.points.values())
    assert {tuple(e) for e in snap["edges"]} == {(0, 1, 80), (0, 2, 80), (1, 2, 80)}
    assert np.allclose(snap["kf_pose"][1], kfs[1].pose.matrix[:3])


def test_representative_descriptor_is_an_observation():
    world = make_world(40)
    graph, kfs, _ = build_graph(world, [slide(x=0.2 * i) for i in range(3)])
    for mp in graph.points.values():
        rows = [graph.keyframes[k].descriptors.data[i] for k, i in mp.observations.items()]
        assert any(np.array_equal(mp.descriptor.data[0], r) for r in rows)
