import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langplace.core import (
    AABB, CanonicalRelation as R, GeometryError, OBJECT_DIRS, RelationFamily, Scene, SceneError,
    SceneObject, TABLE_REGIONS, Tuple, Vec2, Workspace, aabb_distance, crop_raster, direction_vector,
    load_scene, read_ppm, region_bounds, save_scene, write_ppm,
)

UNIT = AABB.from_bounds(-1, -1, 1, 1)
coords = st.floats(-3, 3, allow_nan=False)


def test_relation_families_have_nine_and_eight_members():
    assert len(TABLE_REGIONS) == 9
    assert len(OBJECT_DIRS) == 8
    assert all(r.family is RelationFamily.TABLE_REGION for r in TABLE_REGIONS)


def test_degenerate_inputs_rejected():
    with pytest.raises(ValueError):
        Vec2(math.nan, 0)
    with pytest.raises(ValueError):
        AABB.from_bounds(1, 0, 0, 1)
    with pytest.raises(ValueError):
        Workspace(0, 1)
    with pytest.raises(ValueError):
        Tuple("", "left")


@pytest.mark.parametrize("p, expected", [
    ((0, 0), 0.0),
    ((2, 0), 1.0),
    ((2, 2), math.hypot(1, 1)),
])
def test_aabb_distance_examples(p, expected):
    assert aabb_distance(Vec2(*p), UNIT) == pytest.approx(expected, abs=1e-12)


def _brute_distance(p, b, n=401):
    # nearest point by dense sampling of the box (boundary included)
    xs = np.linspace(b.min.x, b.max.x, n)
    ys = np.linspace(b.min.y, b.max.y, n)
    dx = np.min(np.abs(xs - p.x))
    dy = np.min(np.abs(ys - p.y))
    return math.hypot(dx, dy)


@settings(max_examples=200, deadline=None)
@given(coords, coords)
def test_aabb_distance_matches_dense_sampling_and_zero_iff_inside(x, y):
    p = Vec2(x, y)
    d = aabb_distance(p, UNIT)
    assert d == pytest.approx(_brute_distance(p, UNIT), abs=2 * 2 / 400)
    assert (d == 0) == UNIT.contains(p)


@settings(max_examples=200, deadline=None)
@given(coords, coords, st.floats(-1e-3, 1e-3), st.floats(-1e-3, 1e-3))
def test_aabb_distance_is_lipschitz(x, y, ex, ey):
    d0 = aabb_distance(Vec2(x, y), UNIT)
    d1 = aabb_distance(Vec2(x + ex, y + ey), UNIT)
    assert abs(d1 - d0) <= math.hypot(ex, ey) + 1e-12


@pytest.mark.parametrize("rel, expected", [
    (R.FRONT, (0, -1)),
    (R.BEHIND_RIGHT, (1 / math.sqrt(2), 1 / math.sqrt(2))),
    (R.LEFT, (-1, 0)),
])
def test_direction_vector_examples(rel, expected):
    d = direction_vector(rel)
    assert (d.x, d.y) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("rel", OBJECT_DIRS)
def test_direction_vectors_unit(rel):
    d = direction_vector(rel)
    assert abs(math.hypot(d.x, d.y) - 1) <= 1e-12


def test_direction_vector_rejects_region():
    with pytest.raises(ValueError):
        direction_vector(R.MIDDLE)


@pytest.mark.parametrize("rel, ws, expected", [
    (R.MIDDLE, Workspace(), (-1 / 6, -0.1, 1 / 6, 0.1)),
    (R.BOTTOM_RIGHT_CORNER, Workspace(), (1 / 6, -0.3, 0.5, -0.1)),
    (R.TOP_LEFT_CORNER, Workspace(1.0, 1.0), (-0.5, 1 / 6, -1 / 6, 0.5)),
])
def test_region_bounds_examples(rel, ws, expected):
    assert region_bounds(rel, ws).bounds == pytest.approx(expected, abs=1e-15)


def test_region_names_follow_frame():
    ws = Workspace()
    assert region_bounds(R.LEFT_PART, ws).center.x < 0 and region_bounds(R.LEFT_PART, ws).center.y == pytest.approx(0)
    assert region_bounds(R.TOP_PART, ws).center.y > 0
    assert region_bounds(R.BOTTOM_PART, ws).center.y < 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.1, 5))
def test_region_cells_tile_workspace(w, h):
    ws = Workspace(w, h)
    cells = [region_bounds(r, ws) for r in TABLE_REGIONS]
    area = sum(c.width * c.height for c in cells)
    assert area == pytest.approx(w * h, rel=1e-12)
    for i, a in enumerate(cells):
        for b in cells[i + 1:]:
            ox = min(a.max.x, b.max.x) - max(a.min.x, b.min.x)
            oy = min(a.max.y, b.max.y) - max(a.min.y, b.min.y)
            assert ox <= 1e-12 or oy <= 1e-12
    lo = (min(c.min.x for c in cells), min(c.min.y for c in cells))
    hi = (max(c.max.x for c in cells), max(c.max.y for c in cells))
    assert lo == (-w / 2, -h / 2) and hi == (w / 2, h / 2)


def test_crop_raster_examples():
    img = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
    assert np.array_equal(crop_raster(img, (0, 0, 4, 4)), img)
    assert np.array_equal(crop_raster(img, (1, 1, 3, 3)), img[1:3, 1:3])
    with pytest.raises(GeometryError):
        crop_raster(img, (3, 3, 6, 6))


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_scene_validation_and_token_count():
    obj = SceneObject(3, "mug", AABB.from_bounds(0, 0, 0.1, 0.1), "mug/0")
    scene = Scene(Workspace(), [obj], "ws")
    assert scene.n_tokens == 2 and scene.crop_key(1) == "ws"
    with pytest.raises(SceneError):
        Scene(Workspace(), [obj, obj])
    with pytest.raises(SceneError):
        Scene(Workspace(), [SceneObject(0, "mug", AABB.from_bounds(0.45, 0, 0.55, 0.1), "k")])
    assert Scene(Workspace()).n_tokens == 1


def test_scene_json_round_trip(tmp_path):
    objs = [SceneObject(1, "b", AABB.from_bounds(0.1, 0.1, 0.2, 0.2), "kb"),
            SceneObject(0, "a", AABB.from_bounds(-0.2, -0.2, -0.1, -0.1), "ka")]
    scene = Scene(Workspace(0.8, 0.5), objs, "wk")
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert [o.id for o in back.objects] == [0, 1]
    assert back.objects == scene.objects and back.workspace == scene.workspace
    assert back.workspace_crop_key == "wk"
