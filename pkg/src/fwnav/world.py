"""Obstacle world models: axis-aligned boxes plus optional triangle soup.

Worlds live in the NED-style world frame used across the stack (z points
down, so "up" is negative z and the ground sits near z = 0). Files are YAML:

    name: hallway-two-turns
    bounds:                  # sampling / rendering extent
      min: [x, y, z]
      max: [x, y, z]
    boxes:
      - name: south-wall     # optional
        center: [x, y, z]
        half_extents: [hx, hy, hz]
    meshes:                  # optional OBJ references, resolved
      - file: pillars.obj    #   relative to the YAML file
    triangles:               # optional inline triangle soup
      - [[x,y,z], [x,y,z], [x,y,z]]
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml


def _as_array(x, shape) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("geometry must be finite")
    return a


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "center", _as_array(self.center, (3,)))
        object.__setattr__(self, "half_extents", _as_array(self.half_extents, (3,)))
        if np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extents

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extents


@dataclass
class WorldModel:
    """Static obstacle set queried by the raycaster and the trial scorer."""

    boxes: list[Box] = field(default_factory=list)
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    bounds_min: np.ndarray = field(default_factory=lambda: np.full(3, -50.0))
    bounds_max: np.ndarray = field(default_factory=lambda: np.full(3, 50.0))
    name: str = "unnamed"

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=float).reshape(-1, 3, 3)
        self.bounds_min = _as_array(self.bounds_min, (3,))
        self.bounds_max = _as_array(self.bounds_max, (3,))
        if not np.all(np.isfinite(self.triangles)):
            raise ValueError("geometry must be finite")
        # cached stacked corners for vectorized queries
        self._lo = np.array([b.lo for b in self.boxes]).reshape(-1, 3)
        self._hi = np.array([b.hi for b in self.boxes]).reshape(-1, 3)

    # ------------------------------------------------------------------
    # geometry queries
    # ------------------------------------------------------------------
    def box_corners(self) -> tuple[np.ndarray, np.ndarray]:
        """(B, 3) lower and upper corners of every box."""
        return self._lo, self._hi

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance from each point to the nearest obstacle surface.

        Positive outside all obstacles, negative inside a box (depth of
        penetration). Triangles contribute non-negative distances only.
        Returns +inf for an empty world.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(pts), np.inf)
        if len(self.boxes):
            # outside: norm of per-axis excursion; inside: -min face gap
            d_lo = self._lo[None, :, :] - pts[:, None, :]
            d_hi = pts[:, None, :] - self._hi[None, :, :]
            excur = np.maximum(np.maximum(d_lo, d_hi), 0.0)
            outside = np.linalg.norm(excur, axis=2)
            face_gap = np.minimum(pts[:, None, :] - self._lo[None, :, :],
                                  self._hi[None, :, :] - pts[:, None, :]).min(axis=2)
            inside = face_gap > 0.0
            dist = np.where(inside, -face_gap, outside)
            out = np.minimum(out, dist.min(axis=1))
        if len(self.triangles):
            out = np.minimum(out, _point_triangle_distance(pts, self.triangles).min(axis=1))
        return out if np.asarray(points).ndim == 2 else out[0]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True where a point lies strictly inside any box."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if not len(self.boxes):
            hit = np.zeros(len(pts), dtype=bool)
        else:
            inside = np.all((pts[:, None, :] > self._lo[None, :, :])
                            & (pts[:, None, :] < self._hi[None, :, :]), axis=2)
            hit = inside.any(axis=1)
        return hit if np.asarray(points).ndim == 2 else hit[0]

    # ------------------------------------------------------------------
    # file IO
    # ------------------------------------------------------------------
    @staticmethod
    def from_yaml(path) -> "WorldModel":
        path = Path(path)
        data = yaml.safe_load(path.read_text())
        return WorldModel._from_dict(data, base_dir=path.parent)

    @staticmethod
    def _from_dict(data: dict, base_dir: Path | None = None) -> "WorldModel":
        boxes = [Box(np.asarray(b["center"], float),
                     np.asarray(b["half_extents"], float),
                     str(b.get("name", "")))
                 for b in data.get("boxes", []) or []]
        tris = [np.asarray(t, dtype=float) for t in data.get("triangles", []) or []]
        for m in data.get("meshes", []) or []:
            mesh_path = Path(m["file"])
            if base_dir is not None and not mesh_path.is_absolute():
                mesh_path = base_dir / mesh_path
            tris.extend(load_obj_triangles(mesh_path))
        triangles = np.array(tris).reshape(-1, 3, 3)
        bounds = data.get("bounds", {})
        return WorldModel(
            boxes=boxes,
            triangles=triangles,
            bounds_min=np.asarray(bounds.get("min", [-50.0] * 3), float),
            bounds_max=np.asarray(bounds.get("max", [50.0] * 3), float),
            name=str(data.get("name", "unnamed")),
        )

    def to_yaml(self, path) -> None:
        data = {
            "name": self.name,
            "bounds": {"min": self.bounds_min.tolist(), "max": self.bounds_max.tolist()},
            "boxes": [{"name": b.name, "center": b.center.tolist(),
                       "half_extents": b.half_extents.tolist()} for b in self.boxes],
        }
        if len(self.triangles):
            data["triangles"] = self.triangles.tolist()
        Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def load_obj_triangles(path) -> list[np.ndarray]:
    """Minimal wavefront-OBJ reader: v and f records, fan triangulation."""
    verts: list[list[float]] = []
    tris: list[np.ndarray] = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for a, b in zip(idx[1:-1], idx[2:]):
                tris.append(np.array([verts[idx[0]], verts[a], verts[b]], dtype=float))
    return tris


def load_bundled_world(name: str) -> WorldModel:
    """Load one of the worlds shipped inside the package by bare name."""
    res = importlib.resources.files("fwnav") / "worlds" / f"{name}.yaml"
    with importlib.resources.as_file(res) as p:
        return WorldModel.from_yaml(p)


def _point_triangle_distance(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Distances from (P, 3) points to (T, 3, 3) triangles, shape (P, T)."""
    # project onto triangle plane, clamp barycentrics to the closest feature
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, ac = b - a, c - a
    p = points[:, None, :] - a[None, :, :]
    d00 = np.einsum("td,td->t", ab, ab)
    d01 = np.einsum("td,td->t", ab, ac)
    d11 = np.einsum("td,td->t", ac, ac)
    d20 = np.einsum("ptd,td->pt", p, ab)
    d21 = np.einsum("ptd,td->pt", p, ac)
    denom = np.maximum(d00 * d11 - d01 * d01, 1e-30)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    v = np.clip(v, 0.0, 1.0)
    w = np.clip(w, 0.0, 1.0)
    scale = np.maximum(v + w, 1.0)
    v, w = v / scale, w / scale
    closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
    d_interior = np.linalg.norm(points[:, None, :] - closest, axis=2)
    # clamped barycentrics are approximate near edges; refine with segments
    d_edges = np.minimum(
        _point_segment_distance(points, a, b),
        np.minimum(_point_segment_distance(points, b, c),
                   _point_segment_distance(points, c, a)),
    )
    return np.minimum(d_interior, d_edges)


def _point_segment_distance(points, s0, s1):
    d = s1 - s0
    t = np.einsum("ptd,td->pt", points[:, None, :] - s0[None], d)
    t = np.clip(t / np.maximum(np.einsum("td,td->t", d, d), 1e-30), 0.0, 1.0)
    proj = s0[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - proj, axis=2)
