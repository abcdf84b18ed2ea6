"""Tests for the frontier-constrained RRT planner and path pipeline."""

import numpy as np
import pytest

from fwnav.depthsim import CameraModel, render_depth, to_point_cloud
from fwnav.fovmap import (BatchReply, DepthMeasurement, FovMap, FovStatus,
                          WorldFrameView)
from fwnav.planner import (GlobalPath, PlannerConfig, PlanningFailureError,
                           RrtTree, _segment_clear, build_rrt, extract_prune,
                           horizon_point, plan_path, smooth_bezier,
                           truncate_reuse)
from fwnav.se3 import Pose, compose, invert, quat_from_axis_angle
from fwnav.world import Box, WorldModel

FREE = int(FovStatus.FREE_SPACE)
UNSEEN = int(FovStatus.OUTSIDE_FOV)


class StubMap:
    """Duck-typed map: axis-aligned known-free box + explicit point set."""

    def __init__(self, free_lo=None, free_hi=None, points=(), sigma=0.1):
        self.free_lo = None if free_lo is None else np.asarray(free_lo, float)
        self.free_hi = None if free_hi is None else np.asarray(free_hi, float)
        self.points = np.asarray(points, float).reshape(-1, 3)
        self.sigma = sigma

    def query_batch(self, pts, k):
        pts = np.atleast_2d(np.asarray(pts, float))
        q = len(pts)
        if self.free_lo is None:
            status = np.full(q, FREE)
        else:
            inside = np.all((pts >= self.free_lo) & (pts <= self.free_hi), axis=1)
            status = np.where(inside, FREE, UNSEEN)
        means = np.full((q, k, 3), np.nan)
        counts = np.zeros(q, dtype=int)
        if len(self.points):
            d = np.linalg.norm(pts[:, None, :] - self.points[None], axis=2)
            kk = min(k, len(self.points))
            idx = np.argsort(d, axis=1)[:, :kk]
            means[:, :kk, :] = self.points[idx]
            counts[:] = kk
        cov = np.broadcast_to(np.eye(3) * self.sigma**2, (q, 3, 3)).copy()
        return BatchReply(means, counts, cov, status,
                          np.zeros(q, dtype=int))


def chain_tree(waypoints):
    tree = RrtTree(waypoints[0])
    parent = 0
    for w in np.asarray(waypoints, float)[1:]:
        parent = tree.add(parent, w, w - tree.vertices[parent], frontier=False)
    return tree, parent


# ----------------------------------------------------------------------
# build_rrt
# ----------------------------------------------------------------------

def test_rrt_connects_in_free_space():
    # all-known-free stub degenerates the planner to a standard RRT
    goal = np.array([5.0, 0.0, 0.0])
    tree, idx = build_rrt([0, 0, 0], goal, 1e-6, StubMap(), 5000,
                          np.random.default_rng(3))
    assert np.allclose(tree.vertices[idx], goal)
    assert tree.frontier_list == []
    path = tree.path_to(idx)
    assert np.allclose(path[0], [0, 0, 0]) and np.allclose(path[-1], goal)
    steps = np.linalg.norm(np.diff(path, axis=0), axis=1)
    assert np.all(steps <= 1.0 + 1e-9)


def test_rrt_goal_behind_unknown_becomes_frontier_goal():
    m = StubMap(free_lo=[-1, -5, -3], free_hi=[6, 5, 0])
    goal = np.array([12.0, 0.0, -1.0])
    cfg = PlannerConfig(sample_lo=np.array([-1, -5, -3.0]),
                        sample_hi=np.array([13, 5, 0.0]))
    tree, idx = build_rrt([0, 0, -1], goal, 0.5, m, 4000,
                          np.random.default_rng(11), cfg)
    assert idx in tree.frontier_list
    # frontier soundness: not free itself, parent observed free
    for f in tree.frontier_list:
        r = m.query_batch(tree.vertices[f][None], 1)
        assert r.status[0] != FREE
        p = tree.parents[f]
        rp = m.query_batch(tree.vertices[p][None], 1)
        assert rp.status[0] == FREE
    # path stays in known space except its final vertex
    path = tree.path_to(idx)
    inside = np.all((path[:-1] >= m.free_lo) & (path[:-1] <= m.free_hi), axis=1)
    assert inside.all()
    assert not np.all((path[-1] >= m.free_lo) & (path[-1] <= m.free_hi))
    # frontier leaves never expand: nothing deeper than one step into unknown
    assert tree.vertices[:tree.count, 0].max() <= 6.0 + 1.0 + 1e-9


def test_rrt_effective_goal_is_frontier_closest_to_goal():
    m = StubMap(free_lo=[-1, -5, -2], free_hi=[4, 5, 0])
    goal = np.array([9.0, 3.0, -1.0])
    cfg = PlannerConfig(sample_lo=np.array([-1, -5, -2.0]),
                        sample_hi=np.array([10, 5, 0.0]))
    tree, idx = build_rrt([0, 0, -1], goal, 0.5, m, 3000,
                          np.random.default_rng(4), cfg)
    d = np.linalg.norm(tree.vertices[tree.frontier_list] - goal, axis=1)
    assert np.isclose(np.linalg.norm(tree.vertices[idx] - goal), d.min())


def test_rrt_blocked_start_raises():
    ring = [[np.cos(a), np.sin(a), 0.0] for a in np.linspace(0, 2 * np.pi, 24)]
    m = StubMap(points=ring)
    with pytest.raises(PlanningFailureError):
        build_rrt([0, 0, 0], [8, 0, 0], 0.5, m, 200,
                  np.random.default_rng(0), PlannerConfig(clearance=1.2))


def test_rrt_deterministic_across_reruns():
    m = StubMap(free_lo=[-2, -6, -3], free_hi=[8, 6, 0],
                points=[[4.0, 0.0, -1.5], [4.0, 1.0, -1.5]])
    goal = [10.0, 0.0, -1.5]
    for seed in range(30):
        runs = []
        for _ in range(2):
            tree, idx = build_rrt([0, 0, -1.5], goal, 1.0, m, 800,
                                  np.random.default_rng(seed))
            runs.append((tree.count, idx, tree.vertices.copy(),
                         list(tree.frontier_list)))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        assert np.array_equal(runs[0][2], runs[1][2])
        assert runs[0][3] == runs[1][3]


def test_rrt_seed_path_reuse_captures_without_iterations():
    seed_path = np.array([[1, 0, 0], [2, 0, 0], [5, 0, 0.0]])
    tree, idx = build_rrt([0.4, 0, 0], [5, 0, 0], 0.5, StubMap(), 0,
                          np.random.default_rng(0), seed_path=seed_path)
    assert np.allclose(tree.vertices[idx], [5, 0, 0])
    assert np.allclose(tree.path_to(idx)[0], [0.4, 0, 0])


# ----------------------------------------------------------------------
# extract_prune
# ----------------------------------------------------------------------

def test_prune_collinear_to_two_waypoints():
    tree, goal = chain_tree([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3.3, 0, 0]])
    path = extract_prune(tree, goal, StubMap())
    assert path.waypoints.shape == (2, 3)
    assert np.allclose(path.waypoints[-1], [3.3, 0, 0])


def test_prune_keeps_necessary_corner():
    m = StubMap(points=[[2.5, 2.5, 0.0]])
    tree, goal = chain_tree([[0, 0, 0], [5, 0, 0], [5, 5, 0]])
    path = extract_prune(tree, goal, m, PlannerConfig(clearance=1.2))
    assert len(path.waypoints) == 3
    assert np.allclose(path.waypoints[1], [5, 0, 0])


def test_prune_recheck_and_idempotence():
    rng = np.random.default_rng(5)
    cfg = PlannerConfig(clearance=1.0)
    for _ in range(10):
        pts = rng.uniform(-6, 6, size=(8, 3))
        m = StubMap(points=pts)
        w = [np.array([-9.0, 0, 0])]
        for x in np.linspace(-6, 9, 8):
            w.append(np.array([x, rng.uniform(-7, 7), rng.uniform(-2, 0)]))
        # keep only chain edges that clear; guarantees a valid input path
        kept = [w[0]]
        for cand in w[1:]:
            if _segment_clear(m, kept[-1], cand, cfg):
                kept.append(cand)
        if len(kept) < 3:
            continue
        tree, goal = chain_tree(kept)
        pruned = extract_prune(tree, goal, m, cfg)
        for a, b in zip(pruned.waypoints, pruned.waypoints[1:]):
            assert _segment_clear(m, a, b, cfg)
        tree2, goal2 = chain_tree(pruned.waypoints)
        again = extract_prune(tree2, goal2, m, cfg)
        assert np.array_equal(again.waypoints, pruned.waypoints)


# ----------------------------------------------------------------------
# smooth_bezier
# ----------------------------------------------------------------------

def test_smooth_straight_two_waypoints():
    path = smooth_bezier(GlobalPath(np.array([[0, 0, 0], [7, 0, 0.0]])), 5.0)
    assert path.duration == pytest.approx(7.0 / 5.0, rel=1e-12)
    assert np.allclose(path.position(0.0), [0, 0, 0])
    assert np.allclose(path.position(path.duration), [7, 0, 0])
    assert np.allclose(path.position(0.7), [3.5, 0, 0], atol=1e-9)
    assert path.heading(0.5) == pytest.approx(0.0)


def test_smooth_corner_deviation_bound():
    w = GlobalPath(np.array([[0, 0, 0], [5, 0, 0], [5, 5, 0.0]]))
    path = smooth_bezier(w, 5.0, blend_radius=1.5)
    corner = np.array([5, 0, 0.0])
    dev = np.linalg.norm(path.samples - corner, axis=1).min()
    assert dev <= 1.5  # configured blend radius bound
    assert dev <= 1.5 * np.sqrt(2.0) / 8.0 + 1e-6  # cubic-blend geometry
    assert np.allclose(path.samples[0], w.waypoints[0])
    assert np.allclose(path.samples[-1], w.waypoints[-1])
    # blends clip to half the shorter adjacent segment
    tight = smooth_bezier(GlobalPath(np.array([[0, 0, 0], [1, 0, 0],
                                               [1, 4, 0.0]])), 5.0,
                          blend_radius=1.5)
    assert np.allclose(tight.samples[0], [0, 0, 0])
    assert np.linalg.norm(tight.samples - [1, 0, 0], axis=1).min() < 0.5


def test_smooth_curve_clears_when_radius_below_corner_clearance():
    inside_corner = np.array([3.5, 1.5, 0.0])
    m = StubMap(points=[inside_corner])
    cfg = PlannerConfig(clearance=1.2)
    w = GlobalPath(np.array([[0, 0, 0], [5, 0, 0], [5, 5, 0.0]]))
    assert _segment_clear(m, w.waypoints[0], w.waypoints[1], cfg)
    assert _segment_clear(m, w.waypoints[1], w.waypoints[2], cfg)
    path = smooth_bezier(w, 5.0, blend_radius=1.0)
    d = np.linalg.norm(path.samples - inside_corner, axis=1)
    assert np.all(d >= cfg.clearance)


def test_smooth_time_parameterization_tracks_speed():
    rng = np.random.default_rng(2)
    w = np.cumsum(rng.uniform(-1, 3, size=(6, 3)), axis=0)
    path = smooth_bezier(GlobalPath(w), 4.0)
    ts = np.linspace(0.05, path.duration - 0.05, 40)
    dt = 1e-4
    for t in ts:
        v = np.linalg.norm(path.position(t + dt) - path.position(t - dt)) / (2 * dt)
        assert v == pytest.approx(4.0, rel=2e-2)


# ----------------------------------------------------------------------
# truncate_reuse
# ----------------------------------------------------------------------

def test_truncate_front_trims_to_vehicle():
    prior = GlobalPath(np.array([[0, 0, 0], [5, 0, 0], [10, 0, 0.0]]))
    out = truncate_reuse(prior, np.array([3.0, 0.4, 0.0]), StubMap())
    assert np.allclose(out.waypoints[0], [3, 0, 0])
    assert np.allclose(out.waypoints[1:], prior.waypoints[1:])


def test_truncate_cuts_at_new_obstacle():
    prior = GlobalPath(np.array([[0, 0, 0], [5, 0, 0], [10, 0, 0.0]]))
    m = StubMap(points=[[7.0, 0.0, 0.0]])
    out = truncate_reuse(prior, np.array([0.5, 0, 0.0]), m,
                         PlannerConfig(clearance=1.2))
    assert np.allclose(out.waypoints[-1], [5, 0, 0])


def test_truncate_none_when_nothing_survives():
    prior = GlobalPath(np.array([[0, 0, 0], [5, 0, 0.0]]))
    m = StubMap(points=[[1.5, 0.0, 0.0]])
    assert truncate_reuse(prior, np.array([0.1, 0, 0.0]), m,
                          PlannerConfig(clearance=1.2)) is None
    consumed = GlobalPath(np.array([[4.9, 0, 0.0], [5.0, 0, 0.0]]))
    assert truncate_reuse(consumed, np.array([5.0, 0, 0.0]), StubMap()) is None
    nearly = truncate_reuse(consumed, np.array([4.95, 0, 0.0]), StubMap())
    assert nearly is not None and np.allclose(nearly.waypoints[-1], [5, 0, 0])


def test_truncate_successive_outputs_are_suffixes():
    prior = GlobalPath(np.array([[0, 0, 0], [4, 0, 0], [8, 0, 0],
                                 [8, 4, 0.0]]))
    m = StubMap()
    outs = []
    for x in ([1.0, 0.1, 0], [5.0, -0.1, 0], [8.0, 1.0, 0]):
        outs.append(truncate_reuse(prior, np.array(x), m))
    for a, b in zip(outs, outs[1:]):
        tail = a.waypoints[1:]
        bt = b.waypoints[1:]
        assert np.allclose(tail[len(tail) - len(bt):], bt)


# ----------------------------------------------------------------------
# horizon_point
# ----------------------------------------------------------------------

def test_horizon_point_straight_known_path():
    path = smooth_bezier(GlobalPath(np.array([[0, 0, 0], [20, 0, 0.0]])), 5.0)
    pt, yaw = horizon_point(path, 0.0, 1.0, StubMap())
    assert np.allclose(pt, [5, 0, 0], atol=1e-9)
    assert yaw == pytest.approx(0.0)
    pt2, _ = horizon_point(path, 0.6, 1.0, StubMap())
    assert np.allclose(pt2, [8, 0, 0], atol=1e-9)


def test_horizon_point_pulls_back_to_known_space():
    m = StubMap(free_lo=[-1, -1, -1], free_hi=[3, 1, 1])
    path = smooth_bezier(GlobalPath(np.array([[0, 0, 0], [20, 0, 0.0]])), 5.0)
    pt, _ = horizon_point(path, 0.0, 1.0, m)
    assert pt[0] <= 3.0 + 1e-9
    assert pt[0] >= 3.0 - 0.3  # pulled back no further than needed


def test_horizon_point_errors_when_nothing_known():
    m = StubMap(free_lo=[50, 50, 50], free_hi=[51, 51, 51])
    path = smooth_bezier(GlobalPath(np.array([[0, 0, 0], [20, 0, 0.0]])), 5.0)
    with pytest.raises(PlanningFailureError):
        horizon_point(path, 0.0, 1.0, m)


# ----------------------------------------------------------------------
# real-map integration
# ----------------------------------------------------------------------

CAM = CameraModel(width=64, height=44, horizontal_fov_deg=87.0,
                  vertical_fov_deg=58.0, max_range=20.0)


def sensed_map(world, body_poses, history=50):
    fm = FovMap(history_limit=history)
    prev = None
    for bp in body_poses:
        img = render_depth(world, CAM, compose(bp, CAM.mount_pose), 0.0)
        pts = to_point_cloud(img, CAM, downsample=6)
        edge = bp if prev is None else compose(invert(prev), bp)
        fm.insert(DepthMeasurement(
            points=pts, camera=CAM, pose_edge=edge,
            edge_covariance=np.zeros((3, 3)), timestamp=0.0,
            point_covariance=np.eye(3) * 0.01, depths=img.depths))
        prev = bp
    return fm.snapshot(), body_poses[-1]


def corridor_world():
    return WorldModel(boxes=(
        Box(center=(10.0, 4.0, -2.0), half_extents=(14.0, 0.5, 3.0)),
        Box(center=(10.0, -4.0, -2.0), half_extents=(14.0, 0.5, 3.0)),
    ))


def test_horizon_point_free_space_oracle_on_rendered_scenes():
    rng = np.random.default_rng(9)
    world = corridor_world()
    hits = 0
    for _ in range(20):
        start = np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5), -2.0])
        body = Pose(start, quat_from_axis_angle(np.array([0, 0, 1.0]),
                                                rng.uniform(-0.3, 0.3)))
        view, pose = sensed_map(world, [body])
        wmap = WorldFrameView(view, pose)
        end = start + np.array([30.0, rng.uniform(-1, 1), 0.0])
        path = smooth_bezier(GlobalPath(np.vstack([start, end])), 5.0)
        t_now = rng.uniform(0.0, 2.0)
        try:
            pt, _ = horizon_point(path, t_now, 1.0, wmap,
                                  PlannerConfig(clearance=0.8))
        except PlanningFailureError:
            continue
        hits += 1
        reply = view.query(invert(pose).matrix()[:3] @ np.append(pt, 1.0), k=1)
        assert reply.status == FovStatus.FREE_SPACE
    assert hits >= 15  # most scenes must actually exercise the pullback


def test_plan_path_through_corridor_map():
    world = corridor_world()
    poses = [Pose(np.array([x, 0.0, -2.0]), np.array([1.0, 0, 0, 0]))
             for x in (-2.0, -1.0, 0.0)]
    view, pose = sensed_map(world, poses)
    wmap = WorldFrameView(view, pose)
    cfg = PlannerConfig(clearance=1.2, max_iters=4000,
                        sample_lo=np.array([-2, -3.5, -3.0]),
                        sample_hi=np.array([25, 3.5, -1.0]))
    goal = np.array([22.0, 0.0, -2.0])
    path = plan_path(np.array([0.0, 0.0, -2.0]), goal, wmap,
                     np.random.default_rng(12), cfg)
    assert path.smoothed
    assert np.allclose(path.samples[0], [0, 0, -2.0], atol=1e-6)
    # every sampled point keeps planning clearance from observed walls
    d = np.abs(path.samples[:, 1])
    assert np.all(d <= 4.0 - 0.5 - cfg.clearance + 1e-6)
    # replan with reuse: new path as good, still reaches toward the goal
    path2 = plan_path(np.array([1.0, 0.2, -2.0]), goal, wmap,
                      np.random.default_rng(13), cfg, prior=path)
    assert path2.smoothed
    assert path2.samples[-1][0] > 10.0
