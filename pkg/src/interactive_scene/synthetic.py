"""Synthetic CAD database, scenes with known ground truth, and labelled frame streams."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cad_library import CadDatabase, CadModel, CadPart, JointSpec, JointType, canonicalize, orientation_set
from .contact_graph import EntityKind, SceneEntity
from .fusion import FrameSegment, bilateral_fuse, write_stream
from .geometry import (
    OrientedBox,
    SimTransform,
    TriangleMesh,
    box_mesh,
    extract_planes,
    fit_oriented_box,
    footprint_overlap_area,
    quad_mesh,
    rot_z,
)
from .meshio import write_ply

logger = logging.getLogger(__name__)

FLOOR_CLASSES = ("table", "chair", "cabinet", "fridge")
SMALL_CLASSES = ("microwave", "book", "box", "cup", "bottle")
# which classes may carry which (parent -> children)
CARRIERS = {
    "table": ("microwave", "book", "box", "cup", "bottle"),
    "cabinet": ("microwave", "book", "box", "cup", "bottle"),
    "fridge": ("microwave", "box", "book"),
    "box": ("book", "cup", "bottle", "box"),
    "book": ("cup", "bottle", "book"),
}


# ---------------------------------------------------------------------------
# CAD models
# ---------------------------------------------------------------------------


def _part(name, size, center, joint=None, subdivisions=3) -> CadPart:
    return CadPart(name, box_mesh(size, center, subdivisions), joint)


def make_table(model_id, w, d, h, top=0.04, leg=0.05) -> CadModel:
    parts = [_part("top", (w, d, top), (0, 0, h - top / 2))]
    lh = h - top
    for i, (sx, sy) in enumerate(((-1, -1), (1, -1), (1, 1), (-1, 1))):
        parts.append(_part(f"leg{i}", (leg, leg, lh), (sx * (w / 2 - leg), sy * (d / 2 - leg), lh / 2), subdivisions=2))
    return CadModel(model_id, "table", parts)


def make_chair(model_id, w, d, seat_h, back_h, seat=0.05, leg=0.04) -> CadModel:
    parts = [_part("seat", (w, d, seat), (0, 0, seat_h - seat / 2))]
    lh = seat_h - seat
    for i, (sx, sy) in enumerate(((-1, -1), (1, -1), (1, 1), (-1, 1))):
        parts.append(_part(f"leg{i}", (leg, leg, lh), (sx * (w / 2 - leg), sy * (d / 2 - leg), lh / 2), subdivisions=2))
    parts.append(_part("back", (w, 0.04, back_h), (0, d / 2 - 0.02, seat_h + back_h / 2)))
    return CadModel(model_id, "chair", parts)


def _hinged(model_id, cls, w, d, h, door_t=0.03, limits=(0.0, 1.9)) -> CadModel:
    """Closed body with a front door hinged on its left edge."""
    body = _part("body", (w, d, h), (0, 0, h / 2))
    hinge = (-w / 2, -d / 2 - door_t / 2, 0.0)
    joint = JointSpec(JointType.REVOLUTE, "body", (0, 0, 1), hinge, (0, 0, 0), limits)
    door = _part("door", (w, door_t, h), (0, -d / 2 - door_t / 2, h / 2), joint)
    return CadModel(model_id, cls, [body, door])


def make_drawer_cabinet(model_id, w, d, h, front_t=0.03) -> CadModel:
    body = _part("body", (w, d, h), (0, 0, h / 2))
    joint = JointSpec(JointType.PRISMATIC, "body", (0, -1, 0), (0, -d / 2, h * 0.75), (0, 0, 0), (0.0, 0.4))
    drawer = _part("drawer", (w * 0.9, front_t, h * 0.4), (0, -d / 2 - front_t / 2, h * 0.75), joint)
    return CadModel(model_id, "cabinet", [body, drawer])


def make_cup(model_id, r, h) -> CadModel:
    body = _part("body", (2 * r, 2 * r, h), (0, 0, h / 2))
    handle = _part("handle", (0.35 * r, 0.25 * r, 0.5 * h), (r + 0.175 * r, 0, h / 2), subdivisions=2)
    return CadModel(model_id, "cup", [body, handle])


def make_bottle(model_id, r, h) -> CadModel:
    body = _part("body", (2 * r, 2 * r, 0.7 * h), (0, 0, 0.35 * h))
    neck = _part("neck", (0.8 * r, 0.8 * r, 0.3 * h), (0.3 * r, 0, 0.85 * h), subdivisions=2)
    return CadModel(model_id, "bottle", [body, neck])


def make_block(model_id, cls, size) -> CadModel:
    return CadModel(model_id, cls, [_part("body", size, (0, 0, size[2] / 2))])


def demo_models() -> list[CadModel]:
    return [
        make_table("table_a", 1.2, 0.8, 0.75),
        make_table("table_b", 1.6, 0.9, 0.74),
        make_table("table_c", 0.8, 0.8, 0.72),
        make_table("table_d", 1.0, 0.55, 0.45),
        make_chair("chair_a", 0.45, 0.45, 0.46, 0.45),
        make_chair("chair_b", 0.5, 0.52, 0.48, 0.35),
        make_chair("chair_c", 0.42, 0.4, 0.44, 0.55),
        _hinged("cabinet_a", "cabinet", 0.8, 0.45, 0.9),
        make_drawer_cabinet("cabinet_b", 1.0, 0.5, 0.8),
        _hinged("fridge_a", "fridge", 0.7, 0.65, 1.7),
        _hinged("fridge_b", "fridge", 0.6, 0.6, 1.4),
        _hinged("microwave_a", "microwave", 0.5, 0.35, 0.3, door_t=0.02, limits=(0.0, 1.6)),
        _hinged("microwave_b", "microwave", 0.45, 0.4, 0.27, door_t=0.02, limits=(0.0, 1.6)),
        make_cup("cup_a", 0.04, 0.1),
        make_cup("cup_b", 0.05, 0.09),
        make_block("book_a", "book", (0.22, 0.15, 0.04)),
        make_block("book_b", "book", (0.3, 0.21, 0.03)),
        make_bottle("bottle_a", 0.035, 0.25),
        make_block("box_a", "box", (0.3, 0.2, 0.15)),
        make_block("box_b", "box", (0.25, 0.25, 0.25)),
    ]


def build_demo_db() -> CadDatabase:
    return CadDatabase([canonicalize(m) for m in demo_models()])


def symmetric_orientations(model: CadModel, index: int, decimals: int = 6) -> set[int]:
    """Orientation indices that place the model's surface exactly where ``index`` does."""
    verts = model.union_mesh().vertices
    rots = orientation_set()

    def key(rot):
        pts = np.round(verts @ rot.T, decimals) + 0.0
        return pts[np.lexsort(pts.T[::-1])].tobytes()

    ref = key(rots[index])
    return {i for i, r in enumerate(rots) if key(r) == ref}


def true_orientation_index(world_rotation: np.ndarray, box_yaw: float) -> int:
    """Discrete orientation (relative to an entity's box frame) closest to a world rotation."""
    rel = rot_z(-box_yaw) @ np.asarray(world_rotation, dtype=float)
    errs = [float(np.linalg.norm(rel - r)) for r in orientation_set()]
    return int(np.argmin(errs))


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass
class SceneSpec:
    counts: dict[str, int]
    max_depth: int = 4
    occlusion: float = 0.0
    size_noise: float = 0.0
    bottom_gap: float = 0.0
    room: tuple[float, float, float] = (6.0, 5.0, 2.5)
    walls: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)


@dataclass
class TruthEntry:
    entity_id: str
    semantic_class: str
    parent: str
    model_id: str | None = None
    rotation_index: int = 0
    transform: SimTransform | None = None
    box: OrientedBox | None = None
    depth: int = 0

    def world_rotation(self) -> np.ndarray:
        return rot_z(self.transform.yaw) @ orientation_set()[self.rotation_index]

    def to_dict(self) -> dict:
        out = {"id": self.entity_id, "class": self.semantic_class, "parent": self.parent, "depth": self.depth}
        if self.model_id is not None:
            t = self.transform
            out.update({"model_id": self.model_id, "rotation_index": self.rotation_index,
                        "transform": {"scale": t.scale, "yaw": t.yaw, "translation": list(t.translation)}})
        if self.box is not None:
            out["box"] = {"position": list(self.box.position), "yaw": self.box.yaw, "size": list(self.box.size)}
        return out


@dataclass
class SyntheticScene:
    entities: list[SceneEntity]
    truth: dict[str, TruthEntry]
    room: tuple[float, float, float]
    source_faces: dict[str, int] = field(default_factory=dict)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.room))

    def truth_edges(self) -> set[tuple[str, str]]:
        return {(t.parent, t.entity_id) for t in self.truth.values()}


def layout_entities(room=(6.0, 5.0, 2.5), walls: bool = True) -> list[SceneEntity]:
    w, d, h = room
    out = []
    floor = quad_mesh([(0, 0, 0), (w, 0, 0), (w, d, 0), (0, d, 0)])
    out.append(("floor", "floor", floor))
    if walls:
        quads = [
            [(0, 0, 0), (0, 0, h), (w, 0, h), (w, 0, 0)],
            [(w, 0, 0), (w, 0, h), (w, d, h), (w, d, 0)],
            [(w, d, 0), (w, d, h), (0, d, h), (0, d, 0)],
            [(0, d, 0), (0, d, h), (0, 0, h), (0, 0, 0)],
        ]
        for i, q in enumerate(quads):
            out.append((f"wall_{i}", "wall", quad_mesh(q)))
    ents = []
    for ent_id, cls, mesh in out:
        ents.append(SceneEntity(ent_id, cls, EntityKind.LAYOUT, mesh, fit_oriented_box(mesh), extract_planes(mesh)))
    return ents


def partial_view(mesh: TriangleMesh, occlusion: float, rng: np.random.Generator) -> TriangleMesh:
    """Drop the ``occlusion`` fraction of faces least visible from a random elevated viewpoint."""
    if occlusion <= 0:
        return mesh
    if occlusion >= 1:
        raise ValueError("occlusion must be below 1")
    az = rng.uniform(0, 2 * math.pi)
    el = rng.uniform(math.radians(20), math.radians(60))
    view = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    vis = mesh.face_normals() @ view
    keep_n = int(round((1.0 - occlusion) * len(mesh.triangles)))
    order = np.argsort(-vis, kind="stable")[:keep_n]
    tris = mesh.triangles[np.sort(order)]
    used, inverse = np.unique(tris, return_inverse=True)
    return TriangleMesh(mesh.vertices[used], inverse.reshape(-1, 3))


def _scan_mesh(world: TriangleMesh, spec: SceneSpec, rng) -> TriangleMesh:
    mesh = world
    if spec.size_noise > 0:
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        anchor = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2]])
        factors = 1.0 + rng.uniform(-spec.size_noise, spec.size_noise, 3)
        mesh = TriangleMesh(anchor + (mesh.vertices - anchor) * factors, mesh.triangles.copy())
    mesh = partial_view(mesh, spec.occlusion, rng)
    if spec.bottom_gap > 0:
        # contact regions are rarely observed: lose the faces touching the support
        z = mesh.vertices[:, 2]
        low = z.min() + min(spec.bottom_gap, 0.25 * (z.max() - z.min()))
        keep = ~np.all(z[mesh.triangles] < low, axis=1)
        tris = mesh.triangles[keep]
        used, inverse = np.unique(tris, return_inverse=True)
        mesh = TriangleMesh(mesh.vertices[used], inverse.reshape(-1, 3))
    return mesh


def _placed_box(model: CadModel, k: int, t: SimTransform) -> OrientedBox:
    size = np.abs(orientation_set()[k]) @ np.asarray(model.box.size)
    return OrientedBox(t.translation, t.yaw, tuple(t.scale * size))


def _fits_inside(inner: OrientedBox, outer_poly: np.ndarray, margin: float) -> bool:
    # all corners of the inner footprint inside the (convex, CCW) outer polygon with a margin
    pts = inner.footprint()
    for i in range(len(outer_poly)):
        a, b = outer_poly[i], outer_poly[(i + 1) % len(outer_poly)]
        e = b - a
        nrm = np.array([-e[1], e[0]]) / np.linalg.norm(e)
        if np.any((pts - a) @ nrm < margin):
            return False
    return True


def generate_synthetic_scene(spec: SceneSpec, db: CadDatabase, seed: int = 0,
                             max_tries: int = 400) -> SyntheticScene:
    """Random room with furniture on the floor and small objects stacked on carriers."""
    rng = np.random.default_rng(seed)
    for cls in spec.counts:
        if not any(db.normalize_class(m.semantic_class) == db.normalize_class(cls) for m in db.models.values()):
            raise ValueError(f"class {cls!r} has no model in the database")
        if cls not in FLOOR_CLASSES and cls not in SMALL_CLASSES:
            raise ValueError(f"class {cls!r} is not supported by the scene generator")
    w, d, _ = spec.room
    layouts = layout_entities(spec.room, spec.walls)
    truth: dict[str, TruthEntry] = {l.instance_id: TruthEntry(l.instance_id, l.semantic_class, "scene") for l in layouts}
    placed: list[tuple[str, OrientedBox, CadModel, int, SimTransform]] = []
    floor_boxes: list[OrientedBox] = []
    children_boxes: dict[str, list[OrientedBox]] = {}
    names: dict[str, int] = {}

    def pick_model(cls):
        models = sorted((m for m in db.models.values() if m.semantic_class == cls), key=lambda m: m.model_id)
        return models[int(rng.integers(len(models)))]

    def new_id(cls):
        names[cls] = names.get(cls, 0) + 1
        return f"{cls}_{names[cls]:02d}"

    order = [c for c in FLOOR_CLASSES if c in spec.counts] + [c for c in SMALL_CLASSES if c in spec.counts]
    for cls in order:
        for _ in range(spec.counts[cls]):
            model = pick_model(cls)
            k = int(rng.integers(4))
            ok = False
            for _try in range(max_tries):
                alpha = float(rng.uniform(*spec.scale_range))
                yaw = float(rng.uniform(-math.pi, math.pi))
                size = alpha * (np.abs(orientation_set()[k]) @ np.asarray(model.box.size))
                if cls in FLOOR_CLASSES:
                    parent, base, depth = "floor", 0.0, 1
                    xy = rng.uniform([0.3, 0.3], [w - 0.3, d - 0.3])
                    box = OrientedBox((xy[0], xy[1], base + size[2] / 2), yaw, tuple(size))
                    if not _fits_inside(box, np.array([(0, 0), (w, 0), (w, d), (0, d)], float), 0.1):
                        continue
                    if any(_near(box, o, 0.1) for o in floor_boxes):
                        continue
                else:
                    carriers = [p for p in placed if cls in CARRIERS.get(truth[p[0]].semantic_class, ())
                                and truth[p[0]].depth + 1 <= spec.max_depth]
                    if not carriers:
                        break
                    pid, pbox, _, _, _ = carriers[int(rng.integers(len(carriers)))]
                    if np.prod(size[:2]) > 0.8 * pbox.footprint_area:
                        continue
                    local = rng.uniform(-0.5, 0.5, 2) * np.asarray(pbox.size[:2])
                    xy = np.asarray(pbox.position[:2]) + pbox.rotation[:2, :2] @ local
                    box = OrientedBox((xy[0], xy[1], pbox.top + size[2] / 2), yaw, tuple(size))
                    if not _fits_inside(box, pbox.footprint(), 0.01):
                        continue
                    if any(_near(box, o, 0.02) for o in children_boxes.get(pid, [])):
                        continue
                    parent, depth = pid, truth[pid].depth + 1
                ok = True
                break
            if not ok:
                raise RuntimeError(f"could not place a {cls} after {max_tries} tries")
            ent_id = new_id(cls)
            t = SimTransform(alpha, yaw, box.position)
            truth[ent_id] = TruthEntry(ent_id, cls, parent, model.model_id, k, t, box, depth)
            placed.append((ent_id, box, model, k, t))
            if parent == "floor":
                floor_boxes.append(box)
            else:
                children_boxes.setdefault(parent, []).append(box)

    entities = list(layouts)
    faces = {}
    for ent_id, box, model, k, t in placed:
        world = model.union_mesh().rotated(orientation_set()[k]).transformed(t)
        faces[ent_id] = len(world.triangles)
        scan = _scan_mesh(world, spec, rng)
        kind = EntityKind.ARTICULATED if model.is_articulated else EntityKind.RIGID
        entities.append(SceneEntity(ent_id, truth[ent_id].semantic_class, kind, scan, fit_oriented_box(scan),
                                    extract_planes(scan)))
    return SyntheticScene(entities, truth, tuple(spec.room), faces)


def _near(a: OrientedBox, b: OrientedBox, gap: float) -> bool:
    grown = OrientedBox(a.position, a.yaw, (a.size[0] + 2 * gap, a.size[1] + 2 * gap, a.size[2]))
    return footprint_overlap_area(grown, b.with_vertical(grown.bottom, grown.top)) > 0


DEMO_COUNTS = {"table": 3, "chair": 3, "cabinet": 1, "fridge": 1, "microwave": 1, "cup": 3, "book": 2, "bottle": 1}


def demo_spec() -> SceneSpec:
    """Twenty entities: floor, four walls and fifteen objects."""
    return SceneSpec(dict(DEMO_COUNTS), max_depth=3)


# ---------------------------------------------------------------------------
# Writing scenes and streams
# ---------------------------------------------------------------------------


def write_scene(scene: SyntheticScene, root) -> Path:
    """Entity manifest + PLY meshes + ground truth."""
    root = Path(root)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in scene.entities:
        rel = f"meshes/{e.instance_id}.ply"
        write_ply(root / rel, e.mesh)
        entries.append({"id": e.instance_id, "class": e.semantic_class, "kind": e.kind.value, "mesh_path": rel})
    manifest = root / "scene.json"
    manifest.write_text(json.dumps({"entities": entries, "gravity": [0.0, 0.0, -1.0]}, indent=2) + "\n",
                        encoding="utf-8")
    truth = {"room": list(scene.room), "entities": [scene.truth[k].to_dict() for k in sorted(scene.truth)]}
    (root / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


@dataclass
class StreamTruth:
    instance_of_entity: dict[str, int]
    class_of_entity: dict[str, str]
    aliases: dict[int, int] = field(default_factory=dict)  # later instance id -> original


def synthesize_raw_frames(scene: SyntheticScene, n_frames: int, seed: int = 0, label_noise: float = 0.2,
                          points_per_entity: int = 300, oversegment: int = 1, switch_instance: bool = False,
                          point_noise: float = 0.002):
    """Per-frame panoptic masks and geometric segments over a shared point cloud.

    Returns ``(frames, truth)`` where each frame is
    ``(points, panoptic, geometric, gt)`` and ``gt`` holds the true
    (class, instance) of every frame point.
    """
    rng = np.random.default_rng(seed)
    ents = sorted(scene.entities, key=lambda e: e.instance_id)
    inst = {e.instance_id: i + 1 for i, e in enumerate(ents)}
    classes = {e.instance_id: e.semantic_class for e in ents}
    truth = StreamTruth(dict(inst), dict(classes))
    switch_id = None
    if switch_instance:
        objs = [e.instance_id for e in ents if e.kind is not EntityKind.LAYOUT]
        switch_id = objs[0]
        truth.aliases[len(ents) + 1] = inst[switch_id]
    frames = []
    for f in range(n_frames):
        pts_all, owner = [], []
        for e in ents:
            n = points_per_entity
            if e.mesh.is_empty or len(e.mesh.triangles) == 0:
                continue
            p = e.mesh.sample_surface(n, rng) + rng.normal(0, point_noise, (n, 3))
            pts_all.append(p)
            owner += [e.instance_id] * n
        points = np.vstack(pts_all)
        owner = np.array(owner)
        n_pts = len(points)
        labels_c = np.array([classes[o] for o in owner], dtype=object)
        labels_o = np.array([inst[o] for o in owner])
        if switch_id is not None and f >= n_frames // 2:
            labels_o[owner == switch_id] = len(ents) + 1
        gt = list(zip(labels_c.tolist(), labels_o.tolist()))
        # panoptic masks with label noise
        noisy_c, noisy_o = labels_c.copy(), labels_o.copy()
        flip = rng.random(n_pts) < label_noise
        donors = rng.integers(0, n_pts, n_pts)
        noisy_c[flip] = labels_c[donors[flip]]
        noisy_o[flip] = labels_o[donors[flip]]
        panoptic = []
        for key in sorted(set(zip(noisy_c.tolist(), noisy_o.tolist())), key=lambda k: (k[1], k[0])):
            mask = (noisy_c == key[0]) & (noisy_o == key[1])
            idx = np.nonzero(mask)[0]
            panoptic.append(FrameSegment(points[idx], None, key[0], int(key[1]), idx))
        geometric = []
        for e in ents:
            idx = np.nonzero(owner == e.instance_id)[0]
            if len(idx) == 0:
                continue
            base = inst[e.instance_id] * 10
            if oversegment > 1 and e.kind is not EntityKind.LAYOUT:
                # a fresh random cut each frame, so the pieces' accumulated voxels overlap
                direction = rng.normal(size=3)
                proj = points[idx] @ direction
                edges = np.quantile(proj, np.linspace(0, 1, oversegment + 1)[1:-1])
                part = np.searchsorted(edges, proj)
                for s in range(oversegment):
                    sel = idx[part == s]
                    if len(sel):
                        geometric.append(FrameSegment(points[sel], base + s, indices=sel))
            else:
                geometric.append(FrameSegment(points[idx], base, indices=idx))
        frames.append((points, panoptic, geometric, gt))
    return frames, truth


def labelled_stream(scene: SyntheticScene, n_frames: int, seed: int = 0, **kwargs):
    """Frames after bilateral fusion, ready for the accumulation stage."""
    raw, truth = synthesize_raw_frames(scene, n_frames, seed, **kwargs)
    frames = []
    for points, panoptic, geometric, _ in raw:
        frames.append(bilateral_fuse(panoptic, geometric, next_label=10_000 + 1000 * len(frames)))
    return frames, truth


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scene-synth", description="Generate the demo CAD database and scenes.")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--occlusion", type=float, default=0.0)
    parser.add_argument("--size-noise", type=float, default=0.0)
    parser.add_argument("--stream", type=int, default=0, metavar="FRAMES",
                        help="also write a labelled frame stream with this many frames")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    db = build_demo_db()
    db.save(out / "cad_db")
    spec = demo_spec()
    spec.occlusion = args.occlusion
    spec.size_noise = args.size_noise
    scene = generate_synthetic_scene(spec, db, args.seed)
    manifest = write_scene(scene, out / "scene")
    print(f"wrote {len(db)} CAD models to {out / 'cad_db'}")
    print(f"wrote {len(scene.entities)} entities to {manifest}")
    if args.stream:
        frames, _ = labelled_stream(scene, args.stream, args.seed)
        path = write_stream(out / "stream", frames)
        print(f"wrote {args.stream} frames to {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
