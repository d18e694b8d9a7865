"""Property tests over random inputs."""

import functools
import itertools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from builders import box_entity
from test_contact_graph import random_stack
from test_geometry import brute_rms
from test_matching import brute_force
from interactive_scene.contact_graph import ROOT_ID, SceneEntity, build_graph, support_score
from interactive_scene.fusion import (
    FrameSegment,
    FusedSegmentStore,
    TripletCount,
    fuse_frame,
    merge_until_fixpoint,
    resolve_labels,
)
from interactive_scene.geometry import (
    OrientedBox,
    SimTransform,
    SurfacePlane,
    TriangleMesh,
    extract_planes,
    fit_oriented_box,
    footprint_overlap_area,
    mesh_to_cad_rms,
    rot_z,
    transform_plane,
)
from interactive_scene.matching import MatchWeights, rank_candidates, size_distance, solve_assignment

SLOW = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])

finite = st.floats(-5, 5, allow_nan=False)
positive = st.floats(0.05, 3.0)
angle = st.floats(-math.pi, math.pi)


@st.composite
def planes(draw):
    n = np.array([draw(finite), draw(finite), draw(finite)])
    assume(np.linalg.norm(n) > 1e-2)
    return SurfacePlane(tuple(n / np.linalg.norm(n)), draw(finite))


@st.composite
def transforms(draw):
    return SimTransform(draw(st.floats(0.2, 5.0)), draw(angle), (draw(finite), draw(finite), draw(finite)))


@st.composite
def boxes(draw):
    return OrientedBox((draw(finite), draw(finite), draw(finite)), draw(angle), (draw(positive), draw(positive),
                                                                                  draw(positive)))


def point_on(plane):
    return -plane.offset * plane.n


# ---------------------------------------------------------------------------
# geometry


@given(planes(), transforms(), transforms())
def test_plane_transform_composes(plane, t1, t2):
    once = transform_plane(plane, t2.compose(t1))
    twice = transform_plane(transform_plane(plane, t1), t2)
    assert np.allclose(once.n, twice.n, atol=1e-9)
    assert once.offset == pytest.approx(twice.offset, abs=1e-9)
    assert transform_plane(plane, SimTransform()) == plane


@given(planes(), transforms())
def test_transformed_plane_contains_transformed_points(plane, t):
    # two extra points on the plane along its tangent directions
    n = plane.n
    u = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    pts = point_on(plane) + np.array([[0, 0, 0], u, np.cross(n, u)])
    moved = transform_plane(plane, t)
    assert np.abs(moved.signed_distance(t.apply(pts))).max() < 1e-8 * max(1.0, t.scale)


@given(boxes(), boxes())
def test_footprint_overlap_bounded_and_symmetric(a, b):
    ab = footprint_overlap_area(a, b)
    assert 0.0 <= ab <= min(a.footprint_area, b.footprint_area) + 1e-12
    assert ab == pytest.approx(footprint_overlap_area(b, a), abs=1e-12)


@given(boxes(), st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(-1, 1), st.floats(-1, 1))
def test_contained_footprint_overlaps_fully(b, fx, fy, ox, oy):
    w, d = fx * b.size[0], fy * b.size[1]
    # offset inside the room left by the shrink, in the big box frame
    local = np.array([ox * (b.size[0] - w) / 2, oy * (b.size[1] - d) / 2])
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    xy = np.array(b.position[:2]) + np.array([[c, -s], [s, c]]) @ local
    a = OrientedBox((xy[0], xy[1], b.position[2]), b.yaw, (w, d, b.size[2]))
    assert footprint_overlap_area(a, b) == pytest.approx(a.footprint_area, rel=1e-9)


@given(st.integers(0, 2**32 - 1), angle, st.floats(0.3, 3.0), st.floats(0.3, 3.0))
def test_box_fit_follows_rotation(seed, phi, sx, sy):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(40, 3)) * [sx, sy, 0.5]
    a = fit_oriented_box(pts)
    b = fit_oriented_box(pts @ rot_z(phi).T)
    assert a.footprint_area == pytest.approx(b.footprint_area, rel=1e-6)
    assert sorted(a.size[:2]) == pytest.approx(sorted(b.size[:2]), abs=1e-6)
    assert a.size[2] == pytest.approx(b.size[2], abs=1e-9)
    diff = (b.yaw - a.yaw - phi) % (math.pi / 2)
    assert min(diff, math.pi / 2 - diff) < 1e-6


@SLOW
@given(st.integers(0, 2**32 - 1), st.integers(1, 200), st.integers(1, 20))
def test_rms_matches_brute_force(seed, n_tri, n_pts):
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-1, 1, (3 * n_tri, 3))
    tris = np.arange(3 * n_tri).reshape(-1, 3)
    # drop slivers the brute-force projection cannot handle
    area = np.linalg.norm(np.cross(verts[1::3] - verts[::3], verts[2::3] - verts[::3]), axis=1)
    tris = tris[area > 1e-3]
    assume(len(tris))
    mesh = TriangleMesh(verts, tris)
    pts = rng.uniform(-1.5, 1.5, (n_pts, 3))
    assert mesh_to_cad_rms(pts, mesh) == pytest.approx(brute_rms(pts, mesh), rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------------------
# matching


@given(st.tuples(positive, positive, positive), st.tuples(positive, positive, positive), st.floats(0.01, 100))
def test_size_distance_is_scale_free(x, y, c):
    scaled = size_distance(np.array(x) * c, np.array(y) * c)
    assert scaled == pytest.approx(size_distance(x, y), abs=1e-12)


@st.composite
def cost_matrices(draw, forbid=False):
    n = draw(st.integers(1, 6))
    m = draw(st.integers(n, 6))
    cells = st.floats(0, 10)
    if forbid:
        cells = st.one_of(cells, st.just(math.inf))
    return np.array([[draw(cells) for _ in range(m)] for _ in range(n)])


@given(cost_matrices())
def test_assignment_is_optimal(cost):
    cols, total = solve_assignment(cost)
    assert len(set(cols)) == len(cols)
    assert total == pytest.approx(sum(cost[i, j] for i, j in enumerate(cols)), abs=1e-12)
    assert total == pytest.approx(brute_force(cost), abs=1e-9)


@given(cost_matrices(forbid=True))
def test_assignment_with_forbidden_cells(cost):
    best = brute_force(cost)
    got = solve_assignment(cost)
    if math.isinf(best):
        assert got is None
    else:
        assert got[1] == pytest.approx(best, abs=1e-9)


@SLOW
@given(st.tuples(st.floats(0.6, 1.8), st.floats(0.5, 1.2), st.floats(0.5, 1.0)), angle,
       st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
def test_uniform_weight_scaling_keeps_the_ranking(demo_db, size, yaw, c):
    x = box_entity("x", "table", size, (0, 0, size[2] / 2), yaw=yaw, subdivisions=2)
    base = MatchWeights()
    scaled = MatchWeights(c * base.size, c * base.planes, c * base.bias)
    key = [(r.model_id, r.rotation_index) for r in rank_candidates(x, demo_db, 10, base)]
    assert [(r.model_id, r.rotation_index) for r in rank_candidates(x, demo_db, 10, scaled)] == key


# ---------------------------------------------------------------------------
# contact graph

TABLE_TOP = SurfacePlane((0.0, 0.0, 1.0), -0.75)


def resting_box(x, gap):
    return box_entity("c", "box", (0.2, 0.2, 0.1), (x, 0.0, 0.75 + gap + 0.05), subdivisions=1)


@functools.cache
def slab():
    return box_entity("t", "table", (1.0, 1.0, 0.05), (0.0, 0.0, 0.725), subdivisions=4)


@given(st.floats(-0.7, 0.7), st.floats(0, 1.5), st.floats(0, 1.5))
def test_score_falls_with_gap(x, g1, g2):
    lo, hi = sorted((g1, g2))
    parent = slab()
    assert support_score(resting_box(x, hi), parent, TABLE_TOP) <= support_score(resting_box(x, lo), parent,
                                                                                  TABLE_TOP) + 1e-12


@given(st.floats(0, 0.8), st.floats(0, 0.8))
def test_score_falls_as_the_child_slides_off(x1, x2):
    lo, hi = sorted((x1, x2))
    parent = slab()
    assert support_score(resting_box(hi, 0.0), parent, TABLE_TOP) <= support_score(resting_box(lo, 0.0), parent,
                                                                                    TABLE_TOP) + 1e-12


def lifted(entity, dz):
    mesh = entity.mesh.translated((0.0, 0.0, dz))
    return SceneEntity(entity.instance_id, entity.semantic_class, entity.kind, mesh, fit_oriented_box(mesh),
                       extract_planes(mesh))


@SLOW
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_graph_is_a_tree_and_ignores_height(seed, dz):
    ents, truth = random_stack(np.random.default_rng(seed))
    g = build_graph(ents)
    assert g.is_tree()
    assert len(g.support_edges) == len(ents)
    assert sorted(e.child for e in g.support_edges) == sorted(e.instance_id for e in ents)
    support = {frozenset((e.parent, e.child)) for e in g.support_edges}
    assert not support & {frozenset((p.a, p.b)) for p in g.proximal_edges}
    moved = build_graph([lifted(e, dz) for e in ents])
    assert {(e.parent, e.child) for e in moved.support_edges} == {(e.parent, e.child) for e in g.support_edges}
    assert all(e.parent != ROOT_ID or e.child == "floor" for e in g.support_edges)


# ---------------------------------------------------------------------------
# fusion


def blob(k, n=30):
    # well separated clouds, one per index
    rng = np.random.default_rng(k)
    return rng.uniform(0, 0.3, (n, 3)) + [3.0 * k, 0.0, 0.0]


segment_lists = st.lists(
    st.lists(st.tuples(st.integers(0, 4), st.sampled_from(["a", "b", "c"]), st.one_of(st.none(), st.integers(0, 2))),
             min_size=1, max_size=5),
    min_size=1, max_size=8)


@given(segment_lists)
def test_counts_are_conserved(frames):
    store, counts = FusedSegmentStore(), TripletCount()
    for frame in frames:
        fuse_frame(store, counts, [FrameSegment(blob(l), l, c, o) for l, c, o in frame])
    events = sum(len(f) for f in frames)
    assert counts.total() == counts.events == events
    merge_until_fixpoint(store, counts, duration_threshold=2)
    assert counts.total() == events


@given(st.lists(st.integers(0, 3), min_size=1, max_size=5), st.data())
def test_merge_partition_ignores_batching(cloud_of, data):
    """Labels sharing one cloud end up together, whatever the batch boundaries."""
    labels = list(range(len(cloud_of)))
    frames = [[FrameSegment(blob(cloud_of[l]), l, f"c{l}")] for l in data.draw(st.permutations(labels))]
    cuts = sorted(data.draw(st.sets(st.integers(1, max(1, len(frames) - 1)), max_size=3)))
    store, counts = FusedSegmentStore(), TripletCount()
    start = 0
    for cut in cuts + [len(frames)]:
        for frame in frames[start:cut]:
            fuse_frame(store, counts, frame)
        merge_until_fixpoint(store, counts)
        start = max(start, cut)
    got = {}
    for (l, c, _), n in counts.counts.items():
        got.setdefault(l, set()).add(int(c[1:]))

    # union-find oracle over "same cloud"
    parent = labels[:]

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for a, b in itertools.combinations(labels, 2):
        if cloud_of[a] == cloud_of[b]:
            parent[max(find(a), find(b))] = min(find(a), find(b))
    want = {}
    for l in labels:
        want.setdefault(find(l), set()).add(l)
    assert sorted(map(sorted, got.values())) == sorted(map(sorted, want.values()))


@given(st.dictionaries(st.sampled_from(["chair", "table", "cup", "sofa"]), st.integers(1, 20), min_size=1),
       st.integers(1, 10))
def test_adding_winner_votes_keeps_the_class(votes, extra):
    counts = TripletCount()
    for c, n in votes.items():
        counts.add(0, c, 7, n)
    winner = resolve_labels(counts, 7)
    assert winner == min(votes, key=lambda c: (-votes[c], c))
    counts.add(1, winner, 7, extra)
    assert resolve_labels(counts, 7) == winner
