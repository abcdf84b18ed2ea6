"""Tests for world geometry, distance queries, and file IO."""

import numpy as np
import pytest

from fwnav.world import Box, WorldModel, load_obj_triangles


def make_world():
    return WorldModel(
        boxes=[Box([0, 0, 0], [1, 2, 3], "a"), Box([10, 0, -1], [0.5, 0.5, 0.5], "b")],
        bounds_min=[-20, -20, -10],
        bounds_max=[20, 20, 0],
        name="two-boxes",
    )


def brute_force_box_distance(p, box):
    # pure-python reference: clamp to box, measure, negative inside
    q = np.clip(p, box.lo, box.hi)
    d = np.linalg.norm(p - q)
    if d > 0:
        return d
    return -min(min(p - box.lo), min(box.hi - p))


def test_signed_distance_matches_brute_force():
    w = make_world()
    rng = np.random.default_rng(0)
    pts = rng.uniform(-12, 12, size=(300, 3))
    got = w.signed_distance(pts)
    for i, p in enumerate(pts):
        want = min(brute_force_box_distance(p, b) for b in w.boxes)
        assert got[i] == pytest.approx(want, abs=1e-12)


def test_signed_distance_inside_and_surface():
    w = make_world()
    assert w.signed_distance(np.array([0.0, 0.0, 0.0])) == pytest.approx(-1.0)
    assert w.signed_distance(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.0, abs=1e-12)
    assert w.signed_distance(np.array([3.0, 0.0, 0.0])) == pytest.approx(2.0)


def test_contains():
    w = make_world()
    pts = np.array([[0, 0, 0], [5, 5, 5], [10, 0, -1]], dtype=float)
    np.testing.assert_array_equal(w.contains(pts), [True, False, True])
    assert w.contains(np.array([0.0, 0.0, 0.0])) is np.True_


def test_empty_world_distance_infinite():
    w = WorldModel()
    assert np.isinf(w.signed_distance(np.zeros(3)))
    assert not w.contains(np.zeros(3))


def test_triangle_distance():
    tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], dtype=float)
    w = WorldModel(triangles=tri)
    # directly above the interior
    assert w.signed_distance(np.array([0.2, 0.2, 0.7])) == pytest.approx(0.7)
    # closest feature is a vertex
    assert w.signed_distance(np.array([-1.0, -1.0, 0.0])) == pytest.approx(np.sqrt(2))
    # closest feature is an edge
    assert w.signed_distance(np.array([0.5, -2.0, 0.0])) == pytest.approx(2.0)


def test_yaml_roundtrip(tmp_path):
    w = make_world()
    path = tmp_path / "w.yaml"
    w.to_yaml(path)
    w2 = WorldModel.from_yaml(path)
    assert w2.name == w.name
    assert len(w2.boxes) == 2
    np.testing.assert_allclose(w2.boxes[0].center, w.boxes[0].center)
    np.testing.assert_allclose(w2.boxes[1].half_extents, w.boxes[1].half_extents)
    np.testing.assert_allclose(w2.bounds_min, w.bounds_min)


def test_obj_loading(tmp_path):
    obj = tmp_path / "quad.obj"
    obj.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    tris = load_obj_triangles(obj)
    assert len(tris) == 2  # quad fan-triangulated
    world_yaml = tmp_path / "w.yaml"
    world_yaml.write_text("name: meshy\nmeshes:\n  - file: quad.obj\n")
    w = WorldModel.from_yaml(world_yaml)
    assert w.triangles.shape == (2, 3, 3)


def test_box_validation():
    with pytest.raises(ValueError):
        Box([0, 0, 0], [1, -1, 1])
    with pytest.raises(ValueError):
        Box([np.inf, 0, 0], [1, 1, 1])
