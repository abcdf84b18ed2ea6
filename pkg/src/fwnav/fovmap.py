"""Rolling-history field-of-view-aware point-cloud map.

Instead of fusing measurements into a global grid, the map keeps the last N
depth measurements (default 50), each with the relative pose edge linking its
body frame to the previous measurement's body frame. A query point given in
the current body frame is chained backward through the edges and classified
against each measurement's frustum and depth image:

  FreeSpace   projects inside the frustum at a depth shorter than the
              measured return on that ray (no-return rays count as free out
              to max range)
  Occluded    projects inside the frustum but beyond the measured return
  OutsideFov  projects behind, beyond max range, or off the image

The query answer comes from the most recent measurement that saw the point
in free space; failing that, the most recent measurement in which it is
occluded; failing that, the newest measurement (status OutsideFov).
Measurements without points are used for classification but never answer.
Neighbor covariance grows with the pose-edge covariances accumulated from
the answering measurement back to the present.

Measurement logs replay deterministically via save/load_measurement_log
(NumPy .npz layout documented on those functions).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .depthsim import CameraModel
from .se3 import GaussianPoint, Pose, compose, invert, transform_points


class FovStatus(enum.IntEnum):
    FREE_SPACE = 0
    OCCLUDED = 1
    OUTSIDE_FOV = 2


class EmptyMapError(LookupError):
    """Raised when querying a map that holds no measurements at all."""


@dataclass(frozen=True)
class DepthMeasurement:
    """One depth frame: points in the sensor frame plus its pose edge.

    pose_edge maps THIS measurement's body frame into the PREVIOUS
    measurement's body frame; edge_covariance is the translation covariance
    of that edge (expressed in the previous frame). depths optionally keeps
    the full image grid for per-ray occlusion tests; without it every ray
    counts as free to max range.
    """

    points: np.ndarray
    camera: CameraModel
    pose_edge: Pose
    edge_covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    timestamp: float = 0.0
    point_covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    depths: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        ec = np.asarray(self.edge_covariance, dtype=float)
        if ec.shape == (3,):
            ec = np.diag(ec)
        object.__setattr__(self, "edge_covariance", ec)
        pc = np.asarray(self.point_covariance, dtype=float)
        if pc.shape == (3,):
            pc = np.diag(pc)
        object.__setattr__(self, "point_covariance", pc)
        # body-frame copies feed the k-NN index so queries skip the mount
        body = transform_points(self.camera.mount_pose, pts)
        object.__setattr__(self, "body_points", body)
        object.__setattr__(self, "tree", cKDTree(body) if len(body) else None)

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass
class QueryReply:
    neighbors: list[GaussianPoint]
    status: FovStatus
    depth_index: int
    transform_to_current: Pose


@dataclass
class BatchReply:
    """Vectorized query answer for Q points.

    neighbor_means: (Q, k, 3) current-body-frame positions, NaN-padded.
    neighbor_count: (Q,) valid neighbors per query.
    covariance:     (Q, 3, 3) shared per-query neighbor covariance.
    status:         (Q,) FovStatus codes.
    depth_index:    (Q,) answering measurement age (0 = newest), -1 if none.
    """

    neighbor_means: np.ndarray
    neighbor_count: np.ndarray
    covariance: np.ndarray
    status: np.ndarray
    depth_index: np.ndarray


class MapView:
    """Immutable query view over a fixed tuple of measurements."""

    def __init__(self, measurements: tuple[DepthMeasurement, ...],
                 frustum_margin_px: float = 0.0):
        self._m = measurements
        self.frustum_margin_px = frustum_margin_px
        self._chain = None  # lazy per-frame transforms/covariances

    def __len__(self) -> int:
        return len(self._m)

    @property
    def measurements(self) -> tuple[DepthMeasurement, ...]:
        return self._m

    # ------------------------------------------------------------------
    def _chains(self):
        """T_{j<-newest} and accumulated covariance (current frame) per j.

        Storage is newest-first: _m[0] is the current frame. Edge i maps
        frame i into frame i+1 (its predecessor in arrival order), so
        T_{j<-0} = edge_{j-1} o ... o edge_0.
        """
        if self._chain is None:
            n = len(self._m)
            trans = [Pose.identity()] * n
            covs = [np.zeros((3, 3))] * n
            t = Pose.identity()
            c = np.zeros((3, 3))
            for j in range(1, n):
                t = compose(self._m[j - 1].pose_edge, t)
                r_cur_from_j = t.rotation_matrix().T
                c = c + r_cur_from_j @ self._m[j - 1].edge_covariance @ r_cur_from_j.T
                trans[j] = t
                covs[j] = c
            self._chain = (trans, covs)
        return self._chain

    def _classify_frame(self, j: int, pts_current: np.ndarray) -> np.ndarray:
        """FovStatus codes of current-body-frame points against frame j."""
        trans, _ = self._chains()
        m = self._m[j]
        body_j = transform_points(trans[j], pts_current)
        mount = m.camera.mount_pose
        p_cam = (body_j - mount.translation) @ mount.rotation_matrix()
        z = p_cam[:, 2]
        out = np.full(len(pts_current), int(FovStatus.OUTSIDE_FOV), dtype=np.int8)
        cam = m.camera
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(cam.fx * p_cam[:, 0] / z + cam.cx)
            v = np.rint(cam.fy * p_cam[:, 1] / z + cam.cy)
        mg = self.frustum_margin_px
        inside = ((z > 1e-9) & (z <= cam.max_range)
                  & (u >= mg) & (u <= cam.width - 1 - mg)
                  & (v >= mg) & (v <= cam.height - 1 - mg))
        if not inside.any():
            return out
        ui = u[inside].astype(int)
        vi = v[inside].astype(int)
        if m.depths is None:
            measured = np.full(len(ui), np.nan)
        else:
            measured = m.depths[vi, ui]
        # z > NaN is False: no-return rays are free out to max range
        occluded = z[inside] > measured
        codes = np.where(occluded, int(FovStatus.OCCLUDED), int(FovStatus.FREE_SPACE))
        out[inside] = codes
        return out

    def _status_table(self, pts_current: np.ndarray) -> np.ndarray:
        """(Q, F) status codes, column j = frame j (0 = newest)."""
        q = len(pts_current)
        table = np.full((q, len(self._m)), int(FovStatus.OUTSIDE_FOV), dtype=np.int8)
        for j in range(len(self._m)):
            table[:, j] = self._classify_frame(j, pts_current)
        return table

    # ------------------------------------------------------------------
    def classify(self, point: np.ndarray, m) -> FovStatus:
        """Status of a current-body-frame point against one measurement.

        ``m`` is a history index (0 = newest) or a DepthMeasurement that is
        in the history.
        """
        if not self._m:
            raise EmptyMapError("no measurements in history")
        if isinstance(m, DepthMeasurement):
            idx = next((i for i, x in enumerate(self._m) if x is m), None)
            if idx is None:
                raise ValueError("measurement is not in this map's history")
        else:
            idx = int(m)
        return FovStatus(int(self._classify_frame(idx, np.atleast_2d(point))[0]))

    def known_free_mask(self, points: np.ndarray) -> np.ndarray:
        """True where a point was seen in free space by any measurement."""
        if not self._m:
            raise EmptyMapError("no measurements in history")
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        table = self._status_table(pts)
        return (table == int(FovStatus.FREE_SPACE)).any(axis=1)

    def query_batch(self, points: np.ndarray, k: int) -> BatchReply:
        if not self._m:
            raise EmptyMapError("no measurements in history")
        if k < 1:
            raise ValueError("k must be >= 1")
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        q = len(pts)
        table = self._status_table(pts)
        has_pts = np.array([m.n_points > 0 for m in self._m])

        free = (table == int(FovStatus.FREE_SPACE)) & has_pts[None, :]
        occl = (table == int(FovStatus.OCCLUDED)) & has_pts[None, :]
        answer = np.full(q, -1, dtype=int)
        status = np.full(q, int(FovStatus.OUTSIDE_FOV), dtype=int)

        any_free = free.any(axis=1)
        answer[any_free] = np.argmax(free[any_free], axis=1)
        status[any_free] = int(FovStatus.FREE_SPACE)
        rest = ~any_free
        any_occl = rest & occl.any(axis=1)
        answer[any_occl] = np.argmax(occl[any_occl], axis=1)
        status[any_occl] = int(FovStatus.OCCLUDED)
        left = ~any_free & ~any_occl
        if has_pts.any():
            newest_with_pts = int(np.argmax(has_pts))
            answer[left] = newest_with_pts

        trans, covs = self._chains()
        means = np.full((q, k, 3), np.nan)
        counts = np.zeros(q, dtype=int)
        covariance = np.zeros((q, 3, 3))
        for j in np.unique(answer):
            sel = answer == j
            if j < 0:
                continue
            m = self._m[j]
            body_j = transform_points(trans[j], pts[sel])
            kk = min(k, m.n_points)
            dist, idx = m.tree.query(body_j, k=kk)
            idx = np.atleast_2d(idx.reshape(len(body_j), kk))
            dist = np.atleast_2d(dist.reshape(len(body_j), kk))
            # deterministic tie-break: stable sort by (distance, index)
            order = np.lexsort((idx, dist), axis=1)
            idx = np.take_along_axis(idx, order, axis=1)
            found = m.body_points[idx]  # (S, kk, 3) in frame j
            to_cur = invert(trans[j])
            rot = to_cur.rotation_matrix()
            cur = found @ rot.T + to_cur.translation
            means[sel, :kk, :] = cur
            counts[sel] = kk
            covariance[sel] = m.point_covariance + covs[j]
        return BatchReply(means, counts, covariance, status, answer)

    def query(self, point: np.ndarray, k: int) -> QueryReply:
        """Single-point query returning GaussianPoint neighbors."""
        reply = self.query_batch(np.atleast_2d(point), k)
        j = int(reply.depth_index[0])
        trans, _ = self._chains()
        neigh = [GaussianPoint(reply.neighbor_means[0, i], reply.covariance[0])
                 for i in range(int(reply.neighbor_count[0]))]
        t_to_current = invert(trans[j]) if j >= 0 else Pose.identity()
        return QueryReply(neigh, FovStatus(int(reply.status[0])),
                          max(j, 0), t_to_current)


class FovMap(MapView):
    """Mutable rolling-history map: single writer, snapshot readers."""

    def __init__(self, history_limit: int = 50, frustum_margin_px: float = 0.0):
        if history_limit < 1:
            raise ValueError("history limit must be >= 1")
        super().__init__((), frustum_margin_px)
        self.history_limit = history_limit

    def insert(self, m: DepthMeasurement) -> None:
        hist = (m,) + self._m
        self._m = hist[: self.history_limit]
        self._chain = None

    def snapshot(self) -> MapView:
        """O(1) immutable view; later inserts leave it untouched."""
        return MapView(self._m, self.frustum_margin_px)


# ----------------------------------------------------------------------
# measurement-log replay
# ----------------------------------------------------------------------

class WorldFrameView:
    """World-coordinate facade over a map snapshot.

    The planner and controller reason in world coordinates; the snapshot
    answers in the newest measurement's body frame. This adapter carries the
    (estimated) body pose of that newest measurement and converts queries
    and replies, including rotating the neighbor covariance.
    """

    def __init__(self, view: MapView, body_pose: Pose):
        self.view = view
        self.body_pose = body_pose
        self._to_body = invert(body_pose)
        self._rot = body_pose.rotation_matrix()

    def query_batch(self, points_world: np.ndarray, k: int) -> BatchReply:
        pts = np.atleast_2d(np.asarray(points_world, dtype=float))
        reply = self.view.query_batch(transform_points(self._to_body, pts), k)
        means = reply.neighbor_means @ self._rot.T + self.body_pose.translation
        cov = np.einsum("ab,qbc,dc->qad", self._rot, reply.covariance, self._rot)
        return BatchReply(means, reply.neighbor_count, cov,
                          reply.status, reply.depth_index)

    def known_free_mask(self, points_world: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points_world, dtype=float))
        return self.view.known_free_mask(transform_points(self._to_body, pts))


def save_measurement_log(path, measurements, camera: CameraModel) -> None:
    """Write measurements to a .npz archive for deterministic replay.

    Layout: scalar camera parameters under ``camera``; per record i the
    arrays ``ts_i`` (float), ``edge_q_i`` (wxyz quaternion), ``edge_t_i``,
    ``edge_cov_i`` (3x3), ``point_cov_i`` (3x3), ``points_i`` (N, 3,
    sensor frame) and optionally ``depths_i`` (H, W). Records are indexed
    oldest-first so replay re-inserts in arrival order.
    """
    arrays = {
        "camera": np.array([camera.width, camera.height,
                            camera.horizontal_fov_deg, camera.vertical_fov_deg,
                            camera.max_range, camera.rate_hz], dtype=float),
        "n_records": np.array(len(measurements)),
    }
    ordered = list(measurements)[::-1]  # stored newest-first; write oldest-first
    for i, m in enumerate(ordered):
        arrays[f"ts_{i}"] = np.array(m.timestamp)
        arrays[f"edge_q_{i}"] = m.pose_edge.rotation
        arrays[f"edge_t_{i}"] = m.pose_edge.translation
        arrays[f"edge_cov_{i}"] = m.edge_covariance
        arrays[f"point_cov_{i}"] = m.point_covariance
        arrays[f"points_{i}"] = m.points
        if m.depths is not None:
            arrays[f"depths_{i}"] = m.depths
    np.savez_compressed(Path(path), **arrays)


def load_measurement_log(path) -> tuple[list[DepthMeasurement], CameraModel]:
    """Read a .npz measurement log; returns records oldest-first."""
    with np.load(Path(path)) as data:
        w, h, hf, vf, rng_m, rate = data["camera"]
        camera = CameraModel(int(w), int(h), float(hf), float(vf),
                             float(rng_m), float(rate))
        out = []
        for i in range(int(data["n_records"])):
            out.append(DepthMeasurement(
                points=data[f"points_{i}"],
                camera=camera,
                pose_edge=Pose(data[f"edge_t_{i}"], data[f"edge_q_{i}"]),
                edge_covariance=data[f"edge_cov_{i}"],
                timestamp=float(data[f"ts_{i}"]),
                point_covariance=data[f"point_cov_{i}"],
                depths=data[f"depths_{i}"] if f"depths_{i}" in data else None,
            ))
    return out, camera
