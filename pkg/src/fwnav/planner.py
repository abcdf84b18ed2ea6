"""Frontier-constrained RRT global planner with path reuse and smoothing.

The tree grows in 3-D position space by fixed-length straight steering;
dynamic feasibility is the trajectory optimizer's job. Vertices that land
in space the map has not confirmed free become *frontier* leaves: they stay
in the tree (and may be chosen as a surrogate goal) but are never expanded,
so every root-to-leaf path runs through observed free space except possibly
at its final node. When the requested goal is unreachable or unobserved,
the frontier node closest to it stands in as the effective goal.

The extracted path is iteratively pruned (bypass segments that clear
obstacles), rounded with cubic Bezier corner blends, and parameterized in
time by arc length at a nominal speed. Between replans the prior path is
truncated (front: to the vehicle; back: at newly blocked segments) and used
to seed the next tree, which keeps successive plans incremental.

The map argument everywhere is duck-typed: any object with
``query_batch(points, k) -> BatchReply`` works, in particular a
fovmap ``WorldFrameView``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fovmap import FovStatus


class PlanningFailureError(RuntimeError):
    """Raised when no path to any goal candidate can be produced."""


@dataclass(frozen=True)
class PlannerConfig:
    step: float = 1.0                 # m, RRT extension length
    goal_bias: float = 0.1            # probability of sampling the goal
    goal_tolerance: float = 1.0       # m, capture radius delta_x
    max_iters: int = 2000             # K
    clearance: float = 1.2            # m, minimum distance to observed points
    check_spacing: float = 0.1        # m, collision sampling step
    blend_radius: float = 1.5         # m, Bezier corner rounding
    speed: float = 5.0                # m/s, nominal path speed
    horizon_time: float = 1.0         # s, receding-horizon lookahead
    pullback_step: float = 0.05       # s, horizon-point retreat step
    neighbors: int = 1                # k for clearance queries
    sample_lo: np.ndarray | None = None  # explicit sampling box (world)
    sample_hi: np.ndarray | None = None
    sample_margin: float = 5.0        # m, box inflation when auto-sized

    def __post_init__(self):
        if self.step <= 0 or self.clearance < 0 or self.check_spacing <= 0:
            raise ValueError("step/clearance/check_spacing out of range")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must be within [0, 1]")
        if self.speed <= 0 or self.max_iters < 0 or self.neighbors < 1:
            raise ValueError("speed/max_iters/neighbors out of range")


class RrtTree:
    """Growable tree: vertex positions, parent links with inputs, frontiers."""

    def __init__(self, root: np.ndarray):
        self._verts = np.empty((16, 3))
        self._verts[0] = np.asarray(root, dtype=float)
        self.count = 1
        self.parents = [-1]
        self.inputs = [np.zeros(3)]
        self.frontier_list: list[int] = []
        # frontier leaves are excluded from nearest-neighbor expansion
        self._expandable = np.zeros(16, dtype=bool)
        self._expandable[0] = True

    @property
    def vertices(self) -> np.ndarray:
        return self._verts[: self.count]

    def add(self, parent: int, position: np.ndarray, u: np.ndarray,
            frontier: bool) -> int:
        if self.count == len(self._verts):
            self._verts = np.vstack([self._verts, np.empty_like(self._verts)])
            self._expandable = np.concatenate(
                [self._expandable, np.zeros(self.count, dtype=bool)])
        idx = self.count
        self._verts[idx] = position
        self._expandable[idx] = not frontier
        self.count += 1
        self.parents.append(parent)
        self.inputs.append(np.asarray(u, dtype=float))
        if frontier:
            self.frontier_list.append(idx)
        return idx

    def nearest_expandable(self, point: np.ndarray) -> int:
        verts = self._verts[: self.count]
        d2 = np.einsum("ij,ij->i", verts - point, verts - point)
        d2[~self._expandable[: self.count]] = np.inf
        return int(np.argmin(d2))

    def path_to(self, index: int) -> np.ndarray:
        """Waypoints root -> index, shape (W, 3)."""
        chain = []
        while index >= 0:
            chain.append(self._verts[index])
            index = self.parents[index]
        return np.array(chain[::-1])


@dataclass
class GlobalPath:
    """Pruned waypoint path, optionally smoothed and time-parameterized."""

    waypoints: np.ndarray               # (W, 3)
    valid_until: int = -1               # last collision-checked waypoint
    speed: float | None = None
    samples: np.ndarray | None = None   # (M, 3) dense smoothed curve
    sample_s: np.ndarray | None = None  # (M,) cumulative arc length
    duration: float | None = None

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        if self.valid_until < 0:
            self.valid_until = len(self.waypoints) - 1

    @property
    def smoothed(self) -> bool:
        return self.samples is not None

    @property
    def length(self) -> float:
        d = np.diff(self.waypoints, axis=0)
        return float(np.linalg.norm(d, axis=1).sum())

    def position(self, t: float) -> np.ndarray:
        if not self.smoothed:
            raise ValueError("path is not time-parameterized; smooth it first")
        s = np.clip(t * self.speed, 0.0, self.sample_s[-1])
        return np.array([np.interp(s, self.sample_s, self.samples[:, i])
                         for i in range(3)])

    def heading(self, t: float) -> float:
        if not self.smoothed:
            raise ValueError("path is not time-parameterized; smooth it first")
        s = np.clip(t * self.speed, 0.0, self.sample_s[-1])
        i = int(np.clip(np.searchsorted(self.sample_s, s) - 1, 0,
                        len(self.samples) - 2))
        d = self.samples[i + 1] - self.samples[i]
        return float(np.arctan2(d[1], d[0]))


# ----------------------------------------------------------------------
# clearance and status helpers
# ----------------------------------------------------------------------

def _probe(map_view, points: np.ndarray, k: int = 1):
    """(min distance to observed neighbor means, FovStatus codes)."""
    reply = map_view.query_batch(np.atleast_2d(points), k)
    diff = reply.neighbor_means - np.atleast_2d(points)[:, None, :]
    dist = np.linalg.norm(diff, axis=2)           # NaN where padded
    dist = np.where(np.isnan(dist), np.inf, dist)
    dmin = dist.min(axis=1)
    dmin[reply.neighbor_count == 0] = np.inf
    return dmin, np.asarray(reply.status)


def _segment_points(a: np.ndarray, b: np.ndarray, spacing: float) -> np.ndarray:
    """Sample (a, b] at most `spacing` apart; excludes a, includes b."""
    n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
    ts = np.arange(1, n + 1) / n
    return a + ts[:, None] * (b - a)

def _segment_clear(map_view, a, b, cfg: PlannerConfig) -> bool:
    pts = _segment_points(np.asarray(a, float), np.asarray(b, float),
                          cfg.check_spacing)
    dmin, _ = _probe(map_view, pts, cfg.neighbors)
    return bool(np.all(dmin >= cfg.clearance))


def _is_free(status) -> np.ndarray:
    return np.asarray(status) == int(FovStatus.FREE_SPACE)


# ----------------------------------------------------------------------
# tree construction
# ----------------------------------------------------------------------

def build_rrt(x_init, x_goal, delta_x: float, map_view, max_iters: int,
              rng: np.random.Generator, cfg: PlannerConfig = PlannerConfig(),
              seed_path: np.ndarray | None = None):
    """Grow a frontier-constrained tree toward x_goal.

    Returns (tree, effective_goal_index). The effective goal is the capture
    vertex when the goal was reached through observed free space; otherwise
    the frontier vertex closest to the requested goal. Raises
    PlanningFailureError when neither exists.
    """
    x_init = np.asarray(x_init, dtype=float)
    x_goal = np.asarray(x_goal, dtype=float)
    lo, hi = _sample_bounds(x_init, x_goal, cfg)
    tree = RrtTree(x_init)
    captured = -1

    if np.linalg.norm(x_init - x_goal) <= delta_x:
        captured = 0

    if captured < 0 and seed_path is not None and len(seed_path) > 0:
        captured = _seed_tree(tree, np.atleast_2d(seed_path), x_goal, delta_x,
                              map_view, cfg)

    iters = 0
    while captured < 0 and iters < max_iters:
        iters += 1
        if rng.uniform() < cfg.goal_bias:
            x_rand = x_goal
        else:
            x_rand = rng.uniform(lo, hi)
        near = tree.nearest_expandable(x_rand)
        x_near = tree.vertices[near]
        gap = x_rand - x_near
        dist = np.linalg.norm(gap)
        if dist < 1e-9:
            continue
        u = gap / dist * min(cfg.step, dist)
        x_new = x_near + u
        if not _segment_clear(map_view, x_near, x_new, cfg):
            continue
        _, status = _probe(map_view, x_new[None], 1)
        frontier = not _is_free(status)[0]
        idx = tree.add(near, x_new, u, frontier)
        if np.linalg.norm(x_new - x_goal) <= delta_x:
            captured = idx
            break

    if captured >= 0:
        _, status = _probe(map_view, tree.vertices[captured][None], 1)
        if _is_free(status)[0]:
            return tree, captured
    if not tree.frontier_list:
        raise PlanningFailureError(
            "goal unreachable and no frontier candidates")
    fv = tree.vertices[tree.frontier_list]
    best = int(np.argmin(np.linalg.norm(fv - x_goal, axis=1)))
    return tree, tree.frontier_list[best]


def _sample_bounds(x_init, x_goal, cfg: PlannerConfig):
    if cfg.sample_lo is not None and cfg.sample_hi is not None:
        return (np.asarray(cfg.sample_lo, dtype=float),
                np.asarray(cfg.sample_hi, dtype=float))
    lo = np.minimum(x_init, x_goal) - cfg.sample_margin
    hi = np.maximum(x_init, x_goal) + cfg.sample_margin
    return lo, hi


def _seed_tree(tree: RrtTree, seed: np.ndarray, x_goal, delta_x,
               map_view, cfg) -> int:
    """Chain reused waypoints under the root; returns capture index or -1."""
    parent = 0
    for w in seed:
        if np.linalg.norm(w - tree.vertices[parent]) < 1e-9:
            continue
        if not _segment_clear(map_view, tree.vertices[parent], w, cfg):
            break
        _, status = _probe(map_view, w[None], 1)
        frontier = not _is_free(status)[0]
        parent = tree.add(parent, w, w - tree.vertices[parent], frontier)
        if np.linalg.norm(w - x_goal) <= delta_x:
            return parent
        if frontier:
            break  # frontier leaves are terminal
    return -1


# ----------------------------------------------------------------------
# extraction, pruning, smoothing
# ----------------------------------------------------------------------

def extract_prune(tree: RrtTree, effective_goal: int, map_view,
                  cfg: PlannerConfig = PlannerConfig()) -> GlobalPath:
    """Root-to-goal waypoints with bypassable interior waypoints removed.

    Iterates to a fixed point, so pruning an already-pruned path is a
    no-op.
    """
    pts = tree.path_to(effective_goal)
    changed = True
    while changed and len(pts) > 2:
        changed = False
        keep = [0]
        i = 0
        while i < len(pts) - 1:
            j = len(pts) - 1
            while j > i + 1:
                if _segment_clear(map_view, pts[i], pts[j], cfg):
                    break
                j -= 1
            if j > i + 1:
                changed = True
            keep.append(j)
            i = j
        pts = pts[keep]
    return GlobalPath(pts)


def smooth_bezier(path: GlobalPath, speed: float, blend_radius: float = 1.5,
                  sample_spacing: float = 0.1) -> GlobalPath:
    """Round interior corners with cubic Bezier blends and time-parameterize.

    Blend entry/exit sit `d` before/after each corner, with d = min(radius,
    half of either adjacent segment); the two middle control points sit on
    the corner itself, so the curve deviates from the corner by at most
    d*|u_out - u_in|/8 <= d/4 and endpoints/tangents match the polyline.
    """
    if speed <= 0:
        raise ValueError("speed must be positive")
    w = path.waypoints
    if len(w) == 1:
        samples = np.repeat(w, 2, axis=0)
        return _with_samples(path, speed, samples, np.array([0.0, 0.0]))
    pieces = [w[0][None]]
    cursor = w[0]
    for i in range(1, len(w) - 1):
        seg_in = w[i] - w[i - 1]
        seg_out = w[i + 1] - w[i]
        len_in, len_out = np.linalg.norm(seg_in), np.linalg.norm(seg_out)
        d = min(blend_radius, 0.5 * len_in, 0.5 * len_out)
        if d < 1e-9 or len_in < 1e-9 or len_out < 1e-9:
            pieces.append(w[i][None])
            cursor = w[i]
            continue
        p0 = w[i] - seg_in / len_in * d
        p3 = w[i] + seg_out / len_out * d
        pieces.append(_segment_points(cursor, p0, sample_spacing))
        n = max(8, int(np.ceil(2.0 * d / sample_spacing)))
        ts = np.arange(1, n + 1)[:, None] / n
        bez = ((1 - ts) ** 3 * p0 + 3 * (1 - ts) ** 2 * ts * w[i]
               + 3 * (1 - ts) * ts ** 2 * w[i] + ts ** 3 * p3)
        pieces.append(bez)
        cursor = p3
    pieces.append(_segment_points(cursor, w[-1], sample_spacing))
    samples = np.vstack(pieces)
    step = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    keep = np.concatenate([[True], step > 1e-12])
    samples = samples[keep]
    s = np.concatenate([[0.0], np.cumsum(
        np.linalg.norm(np.diff(samples, axis=0), axis=1))])
    return _with_samples(path, speed, samples, s)


def _with_samples(path: GlobalPath, speed, samples, s) -> GlobalPath:
    return GlobalPath(path.waypoints, path.valid_until, float(speed),
                      samples, s, float(s[-1] / speed))


# ----------------------------------------------------------------------
# reuse and horizon selection
# ----------------------------------------------------------------------

def truncate_reuse(prior: GlobalPath, x_now, map_view,
                   cfg: PlannerConfig = PlannerConfig()) -> GlobalPath | None:
    """Trim a prior path for reuse: front to the vehicle, back at the first
    segment the updated map no longer clears. None when nothing survives."""
    pos = np.asarray(getattr(x_now, "position", x_now), dtype=float)
    w = prior.waypoints
    if len(w) < 2:
        return None
    a, b = w[:-1], w[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", pos - a, ab) / np.maximum(denom, 1e-12),
                0.0, 1.0)
    proj = a + t[:, None] * ab
    seg = int(np.argmin(np.linalg.norm(proj - pos, axis=1)))
    start = proj[seg]
    rest = w[seg + 1:]
    if len(rest) and np.linalg.norm(rest[0] - start) < 1e-9:
        rest = rest[1:]
    pts = np.vstack([start[None], rest]) if len(rest) else start[None]
    if len(pts) < 2:
        return None
    keep = 1
    while keep < len(pts) and _segment_clear(map_view, pts[keep - 1],
                                             pts[keep], cfg):
        keep += 1
    pts = pts[:keep]
    if len(pts) < 2:
        return None
    return GlobalPath(pts)


def horizon_point(path: GlobalPath, t_now: float, horizon: float, map_view,
                  cfg: PlannerConfig = PlannerConfig()):
    """Target on the smoothed path at t_now + horizon, pulled back along the
    path until it lies in observed free space. Returns (point, yaw)."""
    if not path.smoothed:
        raise ValueError("horizon_point needs a smoothed path")
    t_target = t_now + horizon
    times = np.arange(t_target, -cfg.pullback_step / 2, -cfg.pullback_step)
    if len(times) == 0 or times[-1] > 1e-12:
        times = np.append(times, 0.0)
    candidates = np.array([path.position(t) for t in times])
    _, status = _probe(map_view, candidates, 1)
    ok = _is_free(status)
    if not ok.any():
        raise PlanningFailureError("no observed-free point on path")
    pick = int(np.argmax(ok))
    return candidates[pick], path.heading(float(times[pick]))


def plan_path(x_init, x_goal, map_view, rng: np.random.Generator,
              cfg: PlannerConfig = PlannerConfig(),
              prior: GlobalPath | None = None) -> GlobalPath:
    """One full planning cycle: reuse, grow, extract, prune, smooth."""
    seed = None
    if prior is not None:
        trimmed = truncate_reuse(prior, x_init, map_view, cfg)
        if trimmed is not None:
            seed = trimmed.waypoints
    tree, goal_idx = build_rrt(x_init, x_goal, cfg.goal_tolerance, map_view,
                               cfg.max_iters, rng, cfg, seed_path=seed)
    path = extract_prune(tree, goal_idx, map_view, cfg)
    return smooth_bezier(path, cfg.speed, cfg.blend_radius, cfg.check_spacing)
