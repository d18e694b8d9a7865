"""URDF and JSON serialisation of a finished contact graph."""

from __future__ import annotations

import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from xml.sax.saxutils import quoteattr

import jsonschema
import numpy as np

from .cad_library import CadDatabase, JointType, orientation_set
from .fusion import hull_mesh
from .contact_graph import ROOT_ID, ContactGraph, EntityKind, Placement, ProximalEdge, SceneEntity, SupportEdge
from .geometry import OrientedBox, SimTransform, SurfacePlane, TriangleMesh, matrix_rpy, rot_z
from .meshio import read_obj, write_obj

logger = logging.getLogger(__name__)

DEFAULT_JOINT_TABLE = {
    "floating": ["apple", "ball", "book", "bottle", "bowl", "box", "can", "cup", "keyboard", "laptop", "mouse",
                 "pen", "phone", "pillow", "plant", "plate", "remote", "toy", "vase"],
    "fixed": ["bed", "bookshelf", "cabinet", "chair", "counter", "desk", "dresser", "fridge", "lamp", "microwave",
              "monitor", "nightstand", "oven", "shelf", "sink", "sofa", "stool", "table", "toilet", "tv_stand",
              "floor", "wall", "ceiling"],
}

LAYOUT_CLASSES = ("floor", "wall", "ceiling")


class ExportError(RuntimeError):
    pass


class GraphSchemaError(ValueError):
    """Schema violation; ``pointer`` is the JSON pointer of the offending node."""

    def __init__(self, message: str, pointer: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


def joint_type_for(parent_class: str, child_class: str, table: dict | None = None) -> str:
    """Joint kind tying a supported entity to its parent: ``floating`` for manipulable things."""
    table = DEFAULT_JOINT_TABLE if table is None else table
    if child_class in LAYOUT_CLASSES:
        return "fixed"
    if child_class in table.get("floating", ()):
        return "floating"
    if child_class not in table.get("fixed", ()):
        logger.warning("class %r is not in the joint table; using a fixed joint", child_class)
    return "fixed"


def fmt(v: float) -> str:
    """Stable short float text for the XML output."""
    v = float(v)
    if abs(v) < 5e-10:
        return "0"
    return format(v, ".9g")


def _vec(values) -> str:
    return " ".join(fmt(v) for v in values)


def _h(rotation: np.ndarray, translation) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


@dataclass
class UrdfLink:
    name: str
    visual: str | None = None
    collision: str | None = None


@dataclass
class UrdfJoint:
    name: str
    kind: str
    parent: str
    child: str
    origin: np.ndarray = field(default_factory=lambda: np.eye(4))
    axis: tuple[float, float, float] | None = None
    limits: tuple[float, float] | None = None


@dataclass
class UrdfDocument:
    name: str
    links: list[UrdfLink] = field(default_factory=list)
    joints: list[UrdfJoint] = field(default_factory=list)
    floating_sidecar: list[str] = field(default_factory=list)

    def to_xml(self) -> str:
        lines = ['<?xml version="1.0"?>', f"<robot name={quoteattr(self.name)}>"]
        for link in self.links:
            if link.visual is None:
                lines.append(f"  <link name={quoteattr(link.name)}/>")
                continue
            lines += [
                f"  <link name={quoteattr(link.name)}>",
                "    <inertial>",
                '      <origin xyz="0 0 0" rpy="0 0 0"/>',
                '      <mass value="1"/>',
                '      <inertia ixx="0.01" ixy="0" ixz="0" iyy="0.01" iyz="0" izz="0.01"/>',
                "    </inertial>",
                "    <visual>",
                '      <origin xyz="0 0 0" rpy="0 0 0"/>',
                f"      <geometry><mesh filename={quoteattr(link.visual)}/></geometry>",
                "    </visual>",
                "    <collision>",
                '      <origin xyz="0 0 0" rpy="0 0 0"/>',
                f"      <geometry><mesh filename={quoteattr(link.collision)}/></geometry>",
                "    </collision>",
                "  </link>",
            ]
        for j in self.joints:
            xyz = _vec(j.origin[:3, 3])
            rpy = _vec(matrix_rpy(j.origin[:3, :3]))
            lines.append(f"  <joint name={quoteattr(j.name)} type={quoteattr(j.kind)}>")
            lines.append(f"    <parent link={quoteattr(j.parent)}/>")
            lines.append(f"    <child link={quoteattr(j.child)}/>")
            lines.append(f'    <origin xyz="{xyz}" rpy="{rpy}"/>')
            if j.axis is not None:
                lines.append(f'    <axis xyz="{_vec(j.axis)}"/>')
            if j.limits is not None:
                lines.append(f'    <limit lower="{fmt(j.limits[0])}" upper="{fmt(j.limits[1])}" '
                             f'effort="10" velocity="1"/>')
            lines.append("  </joint>")
        lines.append("</robot>")
        return "\n".join(lines) + "\n"


def validate_urdf(xml_text: str, asset_dir=None) -> list[str]:
    """Problems with a URDF document: XML errors, naming, tree shape, missing mesh files."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        return [f"malformed XML: {exc}"]
    errors = []
    if root.tag != "robot":
        errors.append("root element is not <robot>")
    links = [l.get("name") for l in root.findall("link")]
    joints = root.findall("joint")
    if len(set(links)) != len(links):
        errors.append("duplicate link names")
    jnames = [j.get("name") for j in joints]
    if len(set(jnames)) != len(jnames):
        errors.append("duplicate joint names")
    parent_of: dict[str, str] = {}
    for j in joints:
        p, c = j.find("parent"), j.find("child")
        if p is None or c is None:
            errors.append(f"joint {j.get('name')} lacks parent or child")
            continue
        p, c = p.get("link"), c.get("link")
        for name in (p, c):
            if name not in links:
                errors.append(f"joint {j.get('name')} references unknown link {name}")
        if c in parent_of:
            errors.append(f"link {c} has more than one parent")
        parent_of[c] = p
    roots = [l for l in links if l not in parent_of]
    if len(roots) != 1:
        errors.append(f"expected one root link, found {len(roots)}")
    for link in links:
        seen = set()
        cur = link
        while cur in parent_of:
            if cur in seen:
                errors.append(f"cycle through link {link}")
                break
            seen.add(cur)
            cur = parent_of[cur]
    if asset_dir is not None:
        for mesh in root.iter("mesh"):
            if not (Path(asset_dir) / mesh.get("filename")).is_file():
                errors.append(f"missing mesh file {mesh.get('filename')}")
    return errors


# ---------------------------------------------------------------------------
# Graph -> URDF
# ---------------------------------------------------------------------------


def _hull_mesh(mesh: TriangleMesh) -> TriangleMesh:
    hull = hull_mesh(mesh.vertices) if len(mesh.vertices) >= 4 else None
    return hull if hull is not None else mesh


def _entity_frame(entity: SceneEntity, placement: Placement | None) -> np.ndarray:
    if placement is not None:
        t = placement.transform
        return _h(rot_z(t.yaw) @ orientation_set()[placement.rotation_index], t.translation)
    return _h(entity.box.rotation, entity.box.center)


def _local(mesh: TriangleMesh, frame: np.ndarray) -> TriangleMesh:
    inv = np.linalg.inv(frame)
    return TriangleMesh(mesh.vertices @ inv[:3, :3].T + inv[:3, 3], mesh.triangles.copy())


def graph_to_urdf(graph: ContactGraph, asset_dir, db: CadDatabase | None = None, *, name: str = "scene",
                  compat: bool = False, joint_table: dict | None = None) -> UrdfDocument:
    """Write meshes under ``asset_dir/meshes`` and the URDF to ``asset_dir/<name>.urdf``."""
    asset_dir = Path(asset_dir)
    mesh_dir = asset_dir / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    order = graph.dfs_order()  # raises on cycles
    if len(order) != len(graph.entities):
        raise ExportError("support edges do not reach every entity")
    doc = UrdfDocument(name, [UrdfLink(graph.root_id)])
    frames = {graph.root_id: np.eye(4)}

    def add_link(link_name: str, mesh: TriangleMesh):
        vis = f"meshes/{link_name}.obj"
        col = f"meshes/{link_name}_collision.obj"
        write_obj(asset_dir / vis, mesh)
        write_obj(asset_dir / col, _hull_mesh(mesh))
        doc.links.append(UrdfLink(link_name, vis, col))

    for ent_id in order[1:]:
        ent = graph.entities[ent_id]
        edge = graph.parent_of(ent_id)
        placement = graph.placements.get(ent_id)
        frame = _entity_frame(ent, placement)
        frames[ent_id] = frame
        parent_frame = frames[edge.parent]
        parent_class = graph.entities[edge.parent].semantic_class
        kind = joint_type_for(parent_class, ent.semantic_class, joint_table)
        if kind == "floating" and compat:
            doc.floating_sidecar.append(f"{edge.parent}__{ent_id}")
            kind = "fixed"
        doc.joints.append(UrdfJoint(f"{edge.parent}__{ent_id}", kind, edge.parent, ent_id,
                                    np.linalg.inv(parent_frame) @ frame))
        if placement is None or db is None or placement.model_id not in db.models:
            if placement is not None:
                logger.warning("model %s not available; exporting scan mesh of %s", placement.model_id, ent_id)
                frame = _h(ent.box.rotation, ent.box.center)
                frames[ent_id] = frame
                doc.joints[-1].origin = np.linalg.inv(parent_frame) @ frame
            if ent.mesh is None or ent.mesh.is_empty:
                doc.links.append(UrdfLink(ent_id))
            else:
                add_link(ent_id, _local(ent.mesh, frame))
            continue
        model = db.models[placement.model_id]
        alpha = placement.transform.scale
        scaled = {p.name: (p.joint.origin_matrix() if p.joint is not None else np.eye(4)) for p in model.parts}
        for m in scaled.values():
            m[:3, 3] *= alpha
        # jointless parts are rigid with the model base and share the entity link
        base = [TriangleMesh(alpha * p.mesh.vertices, p.mesh.triangles.copy()) for p in model.parts
                if p.joint is None]
        if base:
            add_link(ent_id, TriangleMesh.concatenate(base))
        else:
            doc.links.append(UrdfLink(ent_id))
        for part in model.parts:
            if part.joint is None:
                continue
            link = f"{ent_id}__{part.name}"
            part_mesh = TriangleMesh(alpha * part.mesh.vertices, part.mesh.triangles.copy())
            add_link(link, _local(part_mesh, scaled[part.name]))
            jp = part.joint
            parent_part = next(p for p in model.parts if p.name == jp.parent)
            parent_link = ent_id if parent_part.joint is None else f"{ent_id}__{parent_part.name}"
            limits = None
            if jp.kind is JointType.REVOLUTE:
                limits = jp.limits
            elif jp.kind is JointType.PRISMATIC:
                limits = (alpha * jp.limits[0], alpha * jp.limits[1])
            doc.joints.append(UrdfJoint(f"{parent_link}__{link}", jp.kind.value, parent_link, link,
                                        np.linalg.inv(scaled[parent_part.name]) @ scaled[part.name],
                                        None if jp.kind is JointType.FIXED else jp.axis, limits))
    xml_text = doc.to_xml()
    (asset_dir / f"{name}.urdf").write_text(xml_text, encoding="utf-8")
    if compat:
        sidecar = {"floating_joints": doc.floating_sidecar}
        (asset_dir / f"{name}.floating.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return doc


# ---------------------------------------------------------------------------
# Graph <-> JSON
# ---------------------------------------------------------------------------


def load_schema() -> dict:
    text = resources.files("interactive_scene").joinpath("schemas/contact_graph.schema.json").read_text("utf-8")
    return json.loads(text)


def _plane(p: SurfacePlane | None):
    return None if p is None else {"normal": list(p.normal), "offset": p.offset}


def _unplane(d) -> SurfacePlane | None:
    return None if d is None else SurfacePlane(tuple(d["normal"]), d["offset"])


def graph_to_json(graph: ContactGraph, root_dir) -> dict:
    """Document form of the graph; entity meshes are written as OBJ files under ``root_dir``."""
    root_dir = Path(root_dir)
    ents = []
    for ent_id in sorted(graph.entities):
        e = graph.entities[ent_id]
        mesh_ref = None
        if e.mesh is not None:
            mesh_ref = f"meshes/{ent_id}.obj"
            (root_dir / "meshes").mkdir(parents=True, exist_ok=True)
            write_obj(root_dir / mesh_ref, e.mesh)
        ents.append({
            "id": ent_id,
            "class": e.semantic_class,
            "kind": e.kind.value,
            "mesh": mesh_ref,
            "box": None if e.box is None else {"position": list(e.box.position), "yaw": e.box.yaw,
                                                "size": list(e.box.size)},
            "planes": [_plane(p) for p in e.planes],
        })
    doc = {
        "version": 1,
        "root": graph.root_id,
        "gravity": [0.0, 0.0, -1.0],
        "entities": ents,
        "support_edges": [{"parent": s.parent, "child": s.child, "plane": _plane(s.plane), "score": s.score,
                           "floating": s.floating} for s in graph.support_edges],
        "proximal_edges": [{"a": p.a, "b": p.b} for p in graph.proximal_edges],
        "placements": [{"entity": k, "model_id": p.model_id, "rotation_index": p.rotation_index,
                        "transform": {"scale": p.transform.scale, "yaw": p.transform.yaw,
                                      "translation": list(p.transform.translation)},
                        "alignment_error": p.alignment_error, "rank": p.rank}
                       for k, p in sorted(graph.placements.items())],
    }
    return doc


def validate_document(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise GraphSchemaError(err.message, pointer)


def json_to_graph(doc: dict, root_dir) -> ContactGraph:
    validate_document(doc)
    root_dir = Path(root_dir)
    entities = {}
    for e in doc["entities"]:
        mesh = None if e["mesh"] is None else read_obj(root_dir / e["mesh"])
        box = None
        if e["box"] is not None:
            box = OrientedBox(tuple(e["box"]["position"]), e["box"]["yaw"], tuple(e["box"]["size"]))
        entities[e["id"]] = SceneEntity(e["id"], e["class"], EntityKind(e["kind"]), mesh, box,
                                        [_unplane(p) for p in e["planes"]])
    support = [SupportEdge(s["parent"], s["child"], _unplane(s["plane"]), s["score"], s["floating"])
               for s in doc["support_edges"]]
    proximal = [ProximalEdge(p["a"], p["b"]) for p in doc["proximal_edges"]]
    placements = {}
    for p in doc["placements"]:
        t = p["transform"]
        placements[p["entity"]] = Placement(p["model_id"], p["rotation_index"],
                                            SimTransform(t["scale"], t["yaw"], tuple(t["translation"])),
                                            p["alignment_error"], p["rank"])
    for ref in [s.parent for s in support] + [s.child for s in support] + list(placements):
        if ref not in entities:
            raise GraphSchemaError(f"unknown entity {ref!r}", "/support_edges")
    return ContactGraph(entities, support, proximal, placements, doc["root"])


def save_graph(graph: ContactGraph, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = graph_to_json(graph, path.parent)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def load_graph(path) -> ContactGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphSchemaError(f"invalid JSON: {exc}", "") from exc
    return json_to_graph(doc, path.parent)


def graphs_equal(a: ContactGraph, b: ContactGraph) -> bool:
    """Field-by-field structural equality (meshes compared exactly)."""
    if a.root_id != b.root_id or set(a.entities) != set(b.entities):
        return False
    for k in a.entities:
        ea, eb = a.entities[k], b.entities[k]
        if (ea.semantic_class, ea.kind, ea.box, ea.planes) != (eb.semantic_class, eb.kind, eb.box, eb.planes):
            return False
        if (ea.mesh is None) != (eb.mesh is None) or (ea.mesh is not None and ea.mesh != eb.mesh):
            return False
    return (a.support_edges == b.support_edges and a.proximal_edges == b.proximal_edges
            and a.placements == b.placements)
