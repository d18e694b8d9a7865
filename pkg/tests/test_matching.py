import itertools
import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from builders import box_entity
from interactive_scene.cad_library import CadDatabase, CadModel, CadPart, canonicalize, orientation_set
from interactive_scene.contact_graph import EntityKind, SceneEntity
from interactive_scene.geometry import OrientedBox, SurfacePlane, box_mesh, rot_z
from interactive_scene.matching import (
    C_DUMMY,
    MatchWeights,
    OrientedFeatures,
    matching_distance,
    orientation_bias,
    plane_misalignment,
    rank_candidates,
    size_distance,
    solve_assignment,
    solve_plane_assignment,
)
from interactive_scene.synthetic import make_drawer_cabinet, make_table, symmetric_orientations, true_orientation_index


def brute_force(cost):
    cost = np.asarray(cost, float)
    n, m = cost.shape
    best = math.inf
    for cols in itertools.permutations(range(m), n):
        best = min(best, sum(cost[i, j] for i, j in enumerate(cols)))
    return best


def dec_norm(v):
    return sum(Decimal(x) ** 2 for x in v).sqrt()


def entity_like(model, world=None):
    """Scene entity whose box and planes are exactly the CAD's canonical features."""
    return SceneEntity("x", model.semantic_class, EntityKind.RIGID, model.union_mesh(), model.box, list(model.planes))


def cube_model(model_id="cube"):
    return canonicalize(CadModel(model_id, "box", [CadPart("body", box_mesh((1, 1, 1), subdivisions=3))]))


# ---------------------------------------------------------------------------
# size term


def test_size_distance_examples():
    assert size_distance((2, 2, 1), (4, 4, 2)) == pytest.approx(0.0, abs=1e-15)
    assert size_distance((1, 0, 0), (0, 1, 0)) == pytest.approx(math.sqrt(2))
    getcontext().prec = 50
    a, b = (1, 1, 1), (1, 1, 4)
    na, nb = dec_norm(a), dec_norm(b)
    oracle = sum((Decimal(x) / na - Decimal(y) / nb) ** 2 for x, y in zip(a, b)).sqrt()
    assert size_distance(a, b) == pytest.approx(float(oracle), abs=1e-12)
    assert size_distance(a, b) == pytest.approx(0.6057, abs=1e-3)


# ---------------------------------------------------------------------------
# assignment


def test_hungarian_matches_permutations_on_3x3():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = rng.uniform(0, 3, (3, 3))
        cols, total = solve_assignment(c)
        assert sorted(cols) == [0, 1, 2]
        assert total == brute_force(c)


def test_identical_plane_sets_give_identity():
    planes = cube_model().planes
    cols, total = solve_plane_assignment(planes, planes, lambda a, b: abs(a.offset - b.offset) + 1 - a.n @ b.n)
    assert cols == list(range(len(planes)))
    assert total == pytest.approx(0.0, abs=1e-12)


def test_support_plane_only_maps_upwards():
    up, side = SurfacePlane((0, 0, 1), -0.5), SurfacePlane((1, 0, 0), -0.5)
    y_up, y_side = SurfacePlane((0, 0, 1), -0.4), SurfacePlane((0, 1, 0), -0.5)
    table = {(0, 0): 5.0, (0, 1): 0.0, (1, 0): 0.0, (1, 1): 5.0}
    xs, ys = [up, side], [y_up, y_side]

    def cost(px, py):
        return table[(xs.index(px), ys.index(py))]

    # unconstrained, the support plane would land on the side plane
    free_cols, free_cost = solve_plane_assignment(xs, ys, cost, support_constraint=False)
    assert free_cols == [1, 0] and free_cost == 0.0
    cols, total = solve_plane_assignment(xs, ys, cost)
    assert cols == [0, 1]
    assert total == 10.0


def test_all_forbidden_is_no_match():
    xs = [SurfacePlane((0, 0, 1), 0.0)]
    ys = [SurfacePlane((1, 0, 0), 0.0)]
    assert solve_plane_assignment(xs, ys, lambda a, b: 0.0) is None


def test_surplus_planes_use_dummy_cost():
    xs = [SurfacePlane((0, 0, 1), 0.0), SurfacePlane((1, 0, 0), 0.0), SurfacePlane((0, 1, 0), 0.0)]
    ys = [SurfacePlane((0, 0, 1), 0.0)]
    cols, total = solve_plane_assignment(xs, ys, lambda a, b: 0.0)
    assert cols == [0, None, None]
    assert total == 2 * C_DUMMY


# ---------------------------------------------------------------------------
# plane term and bias


def test_plane_misalignment_zero_for_same():
    m = cube_model()
    x = entity_like(m)
    feats = OrientedFeatures(0, m.box.size, tuple(m.planes), (0, 0, 1))
    assert plane_misalignment(x, feats, list(range(len(m.planes)))) == pytest.approx(0.0, abs=1e-12)


def test_opposite_normals_cost_two():
    box = OrientedBox((0, 0, 0), 0.0, (1, 1, 1))
    x = SceneEntity("x", "box", EntityKind.RIGID, None, box, [SurfacePlane((1, 0, 0), -0.5)])
    feats = OrientedFeatures(0, (1, 1, 1), (SurfacePlane((-1, 0, 0), -0.5),), (0, 0, 1))
    assert plane_misalignment(x, feats, [0]) == pytest.approx(2.0)


def test_yawed_cube_matches_hand_formula():
    m = cube_model()
    x = entity_like(m)
    r = rot_z(math.pi / 4)
    yawed = tuple(SurfacePlane(tuple(r @ p.n), p.offset) for p in m.planes)
    feats = OrientedFeatures(0, m.box.size, yawed, (0, 0, 1))
    getcontext().prec = 50
    # four side faces each lose 1 - cos 45; top and bottom and all offsets agree
    oracle = 4 * (1 - Decimal(2).sqrt() / 2)
    sides = sum(1 for p in m.planes if abs(p.normal[2]) < 0.5)
    assert sides == 4
    assert plane_misalignment(x, feats, list(range(6))) == pytest.approx(float(oracle), abs=1e-12)


def test_orientation_bias_examples():
    assert orientation_bias((0, 0, 1)) == 0.0
    assert orientation_bias((0, 0, -1)) == 2.0
    assert orientation_bias((1, 0, 0)) == 1.0


# ---------------------------------------------------------------------------
# full distance and ranking


def test_identical_upright_distance_zero():
    m = cube_model()
    feats = CadDatabase([m]).features("cube")
    cand = matching_distance(entity_like(m), feats[0])
    assert cand.matching_error == pytest.approx(0.0, abs=1e-12)


def test_upside_down_costs_only_bias():
    m = cube_model()
    feats = CadDatabase([m]).features("cube")
    cand = matching_distance(entity_like(m), feats[4])
    assert cand.matching_error == pytest.approx(0.4, abs=1e-9)
    assert cand.bias_term == 2.0


def test_rolled_fridge_scores_worse():
    fridge = canonicalize(make_drawer_cabinet("fridge_a", 0.7, 0.65, 1.8))
    fridge.semantic_class = "fridge"
    db = CadDatabase([fridge])
    scan = box_entity("scan", "fridge", fridge.box.size, (2, 2, fridge.box.size[2] / 2))
    feats = db.features("fridge_a")
    upright = matching_distance(scan, feats[0])
    # 90 degree roll: model +x ends up pointing along world +z
    rolled = matching_distance(scan, feats[8])
    assert rolled is None or rolled.matching_error > upright.matching_error


def test_single_model_best_is_generating_orientation(demo_db):
    from interactive_scene.synthetic import SceneSpec, generate_synthetic_scene

    scene = generate_synthetic_scene(SceneSpec({"table": 2, "chair": 2}), demo_db, seed=21)
    for e in scene.entities:
        truth = scene.truth[e.instance_id]
        if truth.model_id is None:
            continue
        one = CadDatabase([demo_db.models[truth.model_id]])
        ranked = rank_candidates(e, one, k=24)
        assert len(ranked) <= 24
        ti = true_orientation_index(truth.world_rotation(), e.box.yaw)
        assert ranked[0].rotation_index in symmetric_orientations(demo_db.models[truth.model_id], ti)


def test_k_larger_than_candidates_returns_all():
    m = cube_model()
    ranked = rank_candidates(entity_like(m), CadDatabase([m]), k=100)
    assert 0 < len(ranked) <= 24
    keys = [(c.matching_error, c.model_id, c.rotation_index) for c in ranked]
    assert keys == sorted(keys)


def test_duplicate_models_tie_by_id():
    base = canonicalize(make_table("t_b", 1.0, 0.6, 0.7))
    twin = CadModel("t_a", "table", base.parts, base.box, list(base.planes))
    db = CadDatabase([base, twin])
    ranked = rank_candidates(box_entity("x", "table", (1.0, 0.6, 0.7), (0, 0, 0.35)), db, k=100)
    by_key = {}
    for c in ranked:
        by_key.setdefault((c.matching_error, c.rotation_index), []).append(c.model_id)
    # every orientation appears for both ids with the same score, t_a first
    for ids in by_key.values():
        assert ids == ["t_a", "t_b"]
    keys = [(c.matching_error, c.model_id, c.rotation_index) for c in ranked]
    assert keys == sorted(keys)


def test_unknown_class_gives_empty_shortlist():
    m = cube_model()
    x = box_entity("x", "sofa", (1, 1, 1), (0, 0, 0.5))
    assert rank_candidates(x, CadDatabase([m])) == []


def test_pruning_keeps_exact_ranking(demo_db):
    from interactive_scene.synthetic import SceneSpec, generate_synthetic_scene

    scene = generate_synthetic_scene(SceneSpec({"table": 1, "chair": 1, "cup": 1}), demo_db, seed=5)
    for e in scene.entities:
        if scene.truth[e.instance_id].model_id is None:
            continue
        top = rank_candidates(e, demo_db, k=10)
        full = rank_candidates(e, demo_db, k=10_000)
        assert [(c.model_id, c.rotation_index) for c in top] == [(c.model_id, c.rotation_index) for c in full[:10]]


def test_weights_must_be_non_negative():
    with pytest.raises(ValueError):
        MatchWeights(-1.0, 1.0, 0.2)


def test_paper_weights_are_default():
    w = MatchWeights()
    assert (w.size, w.planes, w.bias) == (1.0, 1.0, 0.2)
    assert len(orientation_set()) == 24
