import json

import numpy as np
import pytest

from interactive_scene.cad_library import (
    CadDatabase,
    CadLoadError,
    CadModel,
    CadPart,
    JointSpec,
    JointType,
    canonicalize,
    orientation_set,
    precompute_oriented_features,
    query_by_class,
)
from interactive_scene.geometry import box_mesh
from interactive_scene.synthetic import make_block, make_chair, make_table


def cube_model(model_id="cube", offset=(0.0, 0.0, 0.0), cls="box"):
    return canonicalize(CadModel(model_id, cls, [CadPart("body", box_mesh((1, 1, 1), center=offset, subdivisions=3))]))


def fridge_raw():
    body = box_mesh((0.7, 0.7, 1.8), center=(0.35, 0.35, 0.9), subdivisions=3)
    door = box_mesh((0.7, 0.04, 1.8), center=(0.35, -0.02, 0.9), subdivisions=3)
    hinge = JointSpec(JointType.REVOLUTE, "body", (0.0, 0.0, 1.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 1.9))
    return CadModel("fridge_x", "fridge", [CadPart("body", body), CadPart("door", door, hinge)])


def test_canonical_cube_is_unchanged():
    once = cube_model()
    twice = canonicalize(once)
    assert np.array_equal(once.parts[0].mesh.vertices, twice.parts[0].mesh.vertices)
    assert once.planes == twice.planes
    assert once.box == twice.box


def test_translated_cube_is_recentred():
    m = cube_model(offset=(1, 2, 3))
    lo, hi = m.union_mesh().vertices.min(axis=0), m.union_mesh().vertices.max(axis=0)
    assert np.allclose((lo + hi) / 2, 0.0, atol=1e-9)
    assert m.box.position == (0.0, 0.0, 0.0)


def test_fridge_box_encloses_both_parts():
    raw = fridge_raw()
    m = canonicalize(raw)
    # oracle: union box recomputed from the raw part meshes
    verts = np.vstack([p.mesh.vertices for p in raw.parts])
    size = verts.max(axis=0) - verts.min(axis=0)
    assert np.allclose(m.box.size, size, atol=1e-9)
    union = m.union_mesh().vertices
    assert np.allclose((union.min(axis=0) + union.max(axis=0)) / 2, 0.0, atol=1e-9)
    assert m.is_articulated


def test_sideways_up_direction_is_rotated_to_z():
    raw = CadModel("lying", "box", [CadPart("body", box_mesh((0.2, 0.3, 1.0)))], up_direction=(1.0, 0.0, 0.0))
    m = canonicalize(raw)
    assert m.up_direction == (0.0, 0.0, 1.0)
    assert m.box.size[2] == pytest.approx(0.2)


def test_empty_model_fails_to_load():
    with pytest.raises(CadLoadError):
        canonicalize(CadModel("empty", "box", []))


def test_query_by_class_and_alias():
    models = [canonicalize(make_chair(f"chair_{i}", 0.5, 0.5, 0.45, 0.4)) for i in range(5)]
    models.append(canonicalize(fridge_raw()))
    db = CadDatabase(models)
    assert [m.model_id for m in query_by_class(db, "chair")] == [f"chair_{i}" for i in range(5)]
    assert query_by_class(db, "sofa") == []
    assert query_by_class(db, "refrigerator") == query_by_class(db, "fridge")
    assert len(query_by_class(db, "Refrigerator")) == 1


def test_orientation_group():
    rots = orientation_set()
    assert len(rots) == 24
    assert np.array_equal(rots[0], np.eye(3))
    def key(r):
        return tuple(np.rint(r).astype(int).ravel())

    keys = {key(r) for r in rots}
    assert len(keys) == 24
    for a in rots:
        assert abs(np.linalg.det(a) - 1) < 1e-12
        for b in rots:
            assert key(a @ b) in keys
    qz = rots[1]
    for r in rots:
        assert np.array_equal(np.linalg.matrix_power(qz, 4) @ r, r)


def test_cube_invariant_under_all_orientations():
    verts = box_mesh((1, 1, 1)).vertices
    ref = {tuple(v) for v in np.round(verts, 9)}
    for r in orientation_set():
        assert {tuple(v) for v in np.round(verts @ r.T, 9) + 0.0} == ref


def test_oriented_features():
    m = canonicalize(make_table("t", 1.2, 0.8, 0.75))
    feats = precompute_oriented_features(m)
    assert feats[0].size == pytest.approx(m.box.size)
    assert tuple(p.normal for p in feats[0].planes) == tuple(p.normal for p in m.planes)
    assert feats[4].up == pytest.approx((0, 0, -1))
    for f in feats:
        assert len(f.planes) == len(m.planes)
        assert sorted(f.size) == pytest.approx(sorted(m.box.size))


def test_database_round_trip_is_bit_identical(tmp_path, demo_db):
    demo_db.save(tmp_path / "a")
    loaded = CadDatabase.load(tmp_path / "a")
    loaded.save(tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    for mid in demo_db.models:
        assert loaded.features(mid) == demo_db.features(mid)


def test_load_without_cache_regenerates_features(tmp_path):
    db = CadDatabase([canonicalize(make_block("blk", "box", (0.3, 0.2, 0.1)))])
    db.save(tmp_path)
    (tmp_path / "models" / "blk" / "features.json").unlink()
    again = CadDatabase.load(tmp_path)
    assert again.features("blk") == db.features("blk")


def test_missing_manifest_is_a_load_error(tmp_path):
    with pytest.raises(CadLoadError):
        CadDatabase.load(tmp_path)


def test_every_demo_model_is_canonical(demo_db):
    for m in demo_db.models.values():
        again = canonicalize(m)
        assert again.box == m.box
        assert again.planes == m.planes
        for part in m.parts:
            assert part.mesh.is_watertight()
            if part.joint is not None:
                assert np.linalg.norm(part.joint.axis) == pytest.approx(1.0)
                assert part.joint.limits[0] <= part.joint.limits[1]


def test_manifest_lists_aliases(tmp_path):
    CadDatabase([cube_model()]).save(tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["aliases"]["refrigerator"] == "fridge"
