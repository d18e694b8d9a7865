"""Small scene builders shared by the tests."""

import math

import numpy as np

from interactive_scene.contact_graph import EntityKind, SceneEntity
from interactive_scene.geometry import TriangleMesh, box_mesh, extract_planes, fit_oriented_box, rot_z


def box_entity(entity_id, cls, size, center, yaw=0.0, kind=EntityKind.RIGID, subdivisions=4):
    mesh = box_mesh(size, subdivisions=subdivisions).rotated(rot_z(yaw)).translated(center)
    return SceneEntity(entity_id, cls, kind, mesh, fit_oriented_box(mesh), extract_planes(mesh))


def floor_entity(extent=10.0, entity_id="floor"):
    h = extent / 2
    # a dense grid so near-plane vertex tests see the whole floor
    g = np.linspace(-h, h, 41)
    xx, yy = np.meshgrid(g, g)
    verts = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])
    idx = np.arange(xx.size).reshape(41, 41)
    a, b, c, d = idx[:-1, :-1], idx[:-1, 1:], idx[1:, 1:], idx[1:, :-1]
    tris = np.vstack([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    mesh = TriangleMesh(verts, tris)
    return SceneEntity(entity_id, "floor", EntityKind.LAYOUT, mesh, fit_oriented_box(mesh), extract_planes(mesh))


def table_entity(entity_id="table", top=(1.2, 0.8), height=0.75, center=(0.0, 0.0), yaw=0.0):
    """Slab table top on a thin pedestal, standing on z = 0."""
    slab = box_mesh((top[0], top[1], 0.04), subdivisions=6).translated((0, 0, height - 0.02))
    leg = box_mesh((0.1, 0.1, height - 0.04), subdivisions=2).translated((0, 0, (height - 0.04) / 2))
    mesh = TriangleMesh.concatenate([slab, leg]).rotated(rot_z(yaw)).translated((center[0], center[1], 0.0))
    return SceneEntity(entity_id, "table", EntityKind.RIGID, mesh, fit_oriented_box(mesh), extract_planes(mesh))


def plane_noise(entity, sigma, rng):
    """Entity copy with Gaussian noise on plane normals and offsets (offsets scaled by box size)."""
    import dataclasses

    from interactive_scene.geometry import SurfacePlane

    scale = float(np.linalg.norm(entity.box.size))
    planes = []
    for p in entity.planes:
        n = np.asarray(p.normal) + rng.normal(0.0, sigma, 3)
        n /= np.linalg.norm(n)
        planes.append(SurfacePlane(tuple(n), p.offset + rng.normal(0.0, sigma * scale)))
    return dataclasses.replace(entity, planes=planes)


def alignment_cases(db, count, first_seed=100):
    """Synthetic entities paired with their generating CAD orientation and true pose.

    Yields dicts with the graph entity, the oriented features, the matching
    candidate, the support plane (None when floating), the true parameters
    ``(alpha, theta, px, py)``, the world rotation of the model and the
    scene diameter.
    """
    from interactive_scene.cad_library import orientation_set
    from interactive_scene.contact_graph import build_graph
    from interactive_scene.matching import matching_distance
    from interactive_scene.synthetic import demo_spec, generate_synthetic_scene, true_orientation_index

    rots = orientation_set()
    out = []
    seed = first_seed
    while len(out) < count:
        scene = generate_synthetic_scene(demo_spec(), db, seed)
        graph = build_graph(scene.entities)
        for e in scene.entities:
            truth = scene.truth[e.instance_id]
            if truth.model_id is None or len(out) == count:
                continue
            x = graph.entities[e.instance_id]
            w = truth.world_rotation()
            ti = true_orientation_index(w, x.box.yaw)
            feats = db.features(truth.model_id)[ti]
            edge = graph.parent_of(e.instance_id)
            m = w @ rots[ti].T
            t = truth.transform
            out.append(dict(entity=x, feats=feats, model_id=truth.model_id, rotation_index=ti,
                            candidate=matching_distance(x, feats, model_id=truth.model_id),
                            support=None if edge.floating else edge.plane,
                            truth=np.array([t.scale, math.atan2(m[1, 0], m[0, 0]), t.translation[0], t.translation[1]]),
                            world=w, diameter=scene.diameter))
        seed += 1
    return out


def wall_entity(x=3.0, extent=10.0, height=3.0, entity_id="wall"):
    """Vertical layout sheet in the plane ``X = x``."""
    ys = np.linspace(-extent / 2, extent / 2, 21)
    zs = np.linspace(0.0, height, 7)
    yy, zz = np.meshgrid(ys, zs)
    verts = np.column_stack([np.full(yy.size, x), yy.ravel(), zz.ravel()])
    idx = np.arange(yy.size).reshape(yy.shape)
    a, b, c, d = idx[:-1, :-1], idx[:-1, 1:], idx[1:, 1:], idx[1:, :-1]
    tris = np.vstack([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    mesh = TriangleMesh(verts, tris)
    return SceneEntity(entity_id, "wall", EntityKind.LAYOUT, mesh, fit_oriented_box(mesh), extract_planes(mesh))


def option_of(entity, model_id="m", ae=0.0, entity_id=None):
    """Wrap an entity's geometry as a placed candidate option."""
    from interactive_scene.validation import CandidateOption

    return CandidateOption(entity_id or entity.instance_id, model_id, 0, ae, entity.mesh, entity.box,
                           list(entity.planes))


def placed_entity(db, entity_id, model_id, xy, yaw=0.0, base=0.0):
    """Scan entity that is exactly the CAD placed upright at ``xy`` resting on height ``base``."""
    from interactive_scene.alignment import candidate_world_mesh
    from interactive_scene.contact_graph import Placement
    from interactive_scene.geometry import SimTransform

    model = db.models[model_id]
    t = SimTransform(1.0, yaw, (xy[0], xy[1], base + model.box.size[2] / 2))
    mesh = candidate_world_mesh(model.union_mesh(), 0, t)
    ent = SceneEntity(entity_id, model.semantic_class, EntityKind.RIGID, mesh, fit_oriented_box(mesh),
                      extract_planes(mesh))
    return ent, Placement(model_id, 0, t, 0.0, 0)


def canonical_scene(db):
    """Floor, wall, table with a cup, chair and fridge; every object carries its CAD placement."""
    from interactive_scene.contact_graph import build_graph

    table, p_table = placed_entity(db, "table", "table_a", (0.0, 0.0), yaw=0.25)
    top = table.box.top
    cup, p_cup = placed_entity(db, "cup", "cup_a", (0.1, 0.05), yaw=1.0, base=top)
    chair, p_chair = placed_entity(db, "chair", "chair_a", (0.0, -1.2), yaw=0.1)
    fridge, p_fridge = placed_entity(db, "fridge", "fridge_a", (2.2, 1.5), yaw=-1.5707963267948966)
    graph = build_graph([floor_entity(), wall_entity(3.0), table, cup, chair, fridge])
    graph.placements = {"table": p_table, "cup": p_cup, "chair": p_chair, "fridge": p_fridge}
    return graph
