"""CAD model database: loading, canonical pose, and per-orientation features.

Orientation index convention (fixed, used by caches and tie-breaking):
``index = 4 * up + k`` where ``up`` selects the model axis that ends up
pointing along world +z, in the order +z, -z, +x, -x, +y, -y, and ``k``
applies a further ``k * 90`` degree turn about world +z. Index 0 is the
identity; indices 0-3 are the upright orientations.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geometry import (
    GeometryError,
    OrientedBox,
    PlaneExtractParams,
    SurfacePlane,
    TriangleMesh,
    axis_angle_matrix,
    extract_planes,
    matrix_rpy,
    rot_z,
    rotation_between,
    rpy_matrix,
)
from .meshio import read_obj, write_obj

logger = logging.getLogger(__name__)

DEFAULT_ALIASES = {
    "refrigerator": "fridge",
    "mug": "cup",
    "dining table": "table",
    "dining_table": "table",
    "desk": "table",
    "couch": "sofa",
    "tv": "monitor",
    "television": "monitor",
    "cupboard": "cabinet",
    "wine glass": "cup",
}


class CadLoadError(RuntimeError):
    pass


class JointType(str, enum.Enum):
    FIXED = "fixed"
    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"


@dataclass(frozen=True)
class JointSpec:
    kind: JointType
    parent: str
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    origin_xyz: tuple[float, float, float] = (0.0, 0.0, 0.0)
    origin_rpy: tuple[float, float, float] = (0.0, 0.0, 0.0)
    limits: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", JointType(self.kind))
        axis = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", tuple(float(v) for v in axis / np.linalg.norm(axis)))
        object.__setattr__(self, "origin_xyz", tuple(float(v) for v in self.origin_xyz))
        object.__setattr__(self, "origin_rpy", tuple(float(v) for v in self.origin_rpy))
        lo, hi = (float(v) for v in self.limits)
        if lo > hi:
            raise ValueError("joint lower limit exceeds upper limit")
        if self.kind is JointType.REVOLUTE and (lo < -2 * math.pi or hi > 2 * math.pi):
            raise ValueError("revolute limits must lie within [-2pi, 2pi]")
        object.__setattr__(self, "limits", (lo, hi))

    def origin_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = rpy_matrix(*self.origin_rpy)
        m[:3, 3] = self.origin_xyz
        return m

    def motion(self, q: float) -> np.ndarray:
        """Homogeneous motion of the child part (in the model frame) at joint value ``q``."""
        local = np.eye(4)
        if self.kind is JointType.REVOLUTE:
            local[:3, :3] = axis_angle_matrix(self.axis, q)
        elif self.kind is JointType.PRISMATIC:
            local[:3, 3] = np.asarray(self.axis) * q
        origin = self.origin_matrix()
        return origin @ local @ np.linalg.inv(origin)

    def with_origin(self, matrix: np.ndarray) -> "JointSpec":
        return JointSpec(self.kind, self.parent, self.axis, tuple(matrix[:3, 3]),
                         matrix_rpy(matrix[:3, :3]), self.limits)


@dataclass
class CadPart:
    name: str
    mesh: TriangleMesh
    joint: JointSpec | None = None


def _apply_h(matrix: np.ndarray, mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(mesh.vertices @ matrix[:3, :3].T + matrix[:3, 3], mesh.triangles.copy())


@dataclass
class CadModel:
    model_id: str
    semantic_class: str
    parts: list[CadPart]
    box: OrientedBox | None = None
    planes: list[SurfacePlane] = field(default_factory=list)
    up_direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    canonical_transform: np.ndarray = field(default_factory=lambda: np.eye(4))

    @property
    def is_articulated(self) -> bool:
        return any(p.joint is not None and p.joint.kind is not JointType.FIXED for p in self.parts)

    def part_pose(self, name: str, q: dict[str, float] | None = None) -> np.ndarray:
        """Model-frame motion of a part given joint values (default: closed, lower limits)."""
        parts = {p.name: p for p in self.parts}
        pose = np.eye(4)
        part = parts[name]
        seen = set()
        while part.joint is not None:
            if part.name in seen:
                raise CadLoadError(f"joint cycle in model {self.model_id}")
            seen.add(part.name)
            value = part.joint.limits[0] if q is None else q.get(part.name, part.joint.limits[0])
            pose = part.joint.motion(value) @ pose
            part = parts[part.joint.parent]
        return pose

    def posed_part_meshes(self, q: dict[str, float] | None = None) -> list[TriangleMesh]:
        return [_apply_h(self.part_pose(p.name, q), p.mesh) for p in self.parts]

    def union_mesh(self) -> TriangleMesh:
        """Closed-configuration union of all parts."""
        return TriangleMesh.concatenate(self.posed_part_meshes())


def plane_params_for(model_id: str, base: PlaneExtractParams = PlaneExtractParams()) -> PlaneExtractParams:
    # seed from the id so features do not depend on database load order
    # a clean model keeps twice the scan budget: near-equal faces that a scan
    # keeps by sampling luck still find their partner, and spare CAD planes are free
    return dataclasses.replace(base, seed=zlib.crc32(model_id.encode()) & 0x7FFFFFFF,
                               max_planes=2 * base.max_planes)


def canonicalize(raw: CadModel, plane_params: PlaneExtractParams = PlaneExtractParams()) -> CadModel:
    """Rotate the model's up direction onto +z and centre its box at the origin."""
    if not raw.parts or all(p.mesh.is_empty for p in raw.parts):
        raise CadLoadError(f"model {raw.model_id} has no geometry")
    rot = rotation_between(raw.up_direction, (0.0, 0.0, 1.0))
    rot = np.where(np.abs(rot) < 1e-15, 0.0, rot)
    step = np.eye(4)
    step[:3, :3] = rot
    union = _apply_h(step, raw.union_mesh())
    lo, hi = union.vertices.min(axis=0), union.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    if np.max(np.abs(center)) > 1e-12:
        step[:3, 3] = -center
    parts = []
    for p in raw.parts:
        joint = p.joint.with_origin(step @ p.joint.origin_matrix()) if p.joint is not None else None
        parts.append(CadPart(p.name, _apply_h(step, p.mesh) if not np.array_equal(step, np.eye(4)) else p.mesh,
                             joint))
    model = CadModel(raw.model_id, raw.semantic_class, parts, up_direction=(0.0, 0.0, 1.0),
                     canonical_transform=step @ np.asarray(raw.canonical_transform, dtype=float))
    union = model.union_mesh()
    lo, hi = union.vertices.min(axis=0), union.vertices.max(axis=0)
    model.box = OrientedBox((0.0, 0.0, 0.0), 0.0, tuple(np.maximum(hi - lo, 1e-6)))
    model.planes = extract_planes(union, plane_params_for(model.model_id, plane_params))
    return model


# ---------------------------------------------------------------------------
# Orientations and features
# ---------------------------------------------------------------------------

_UP_BASES = (
    np.eye(3),
    np.array([[1.0, 0, 0], [0, -1, 0], [0, 0, -1]]),  # -z up: Rx(pi)
    np.array([[0.0, 0, -1], [0, 1, 0], [1, 0, 0]]),  # +x up: Ry(-pi/2)
    np.array([[0.0, 0, 1], [0, 1, 0], [-1, 0, 0]]),  # -x up: Ry(pi/2)
    np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]]),  # +y up: Rx(pi/2)
    np.array([[1.0, 0, 0], [0, 0, 1], [0, -1, 0]]),  # -y up: Rx(-pi/2)
)


@lru_cache(maxsize=1)
def _orientations() -> tuple[np.ndarray, ...]:
    out = []
    for base in _UP_BASES:
        for k in range(4):
            r = np.rint(rot_z(k * math.pi / 2.0) @ base)
            r.flags.writeable = False
            out.append(r)
    return tuple(out)


def orientation_set() -> list[np.ndarray]:
    """The 24 rotations of the cube group in index order."""
    return list(_orientations())


def orientation_tilt(index: int) -> np.ndarray:
    """Rotation part that sets which model axis points up (no yaw)."""
    return _UP_BASES[index // 4]


def orientation_yaw(index: int) -> float:
    return (index % 4) * math.pi / 2.0


@dataclass(frozen=True)
class OrientedFeatures:
    rotation_index: int
    size: tuple[float, float, float]
    planes: tuple[SurfacePlane, ...]
    up: tuple[float, float, float]


def rotate_plane(plane: SurfacePlane, rot: np.ndarray) -> SurfacePlane:
    return SurfacePlane(tuple(rot @ plane.n), plane.offset)


def precompute_oriented_features(model: CadModel) -> list[OrientedFeatures]:
    if model.box is None:
        raise CadLoadError(f"model {model.model_id} is not canonical")
    size = np.asarray(model.box.size)
    feats = []
    for i, rot in enumerate(orientation_set()):
        feats.append(OrientedFeatures(
            i,
            tuple(float(v) for v in np.abs(rot) @ size),
            tuple(rotate_plane(p, rot) for p in model.planes),
            tuple(float(v) for v in rot @ np.array([0.0, 0.0, 1.0])),
        ))
    return feats


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _joint_to_dict(j: JointSpec) -> dict:
    return {"type": j.kind.value, "parent": j.parent, "axis": list(j.axis),
            "origin": {"xyz": list(j.origin_xyz), "rpy": list(j.origin_rpy)}, "limits": list(j.limits)}


def _joint_from_dict(d: dict) -> JointSpec:
    origin = d.get("origin", {})
    return JointSpec(d["type"], d["parent"], tuple(d.get("axis", (0, 0, 1))),
                     tuple(origin.get("xyz", (0, 0, 0))), tuple(origin.get("rpy", (0, 0, 0))),
                     tuple(d.get("limits", (0, 0))))


def _features_to_dict(model: CadModel, feats: list[OrientedFeatures]) -> dict:
    return {
        "model_id": model.model_id,
        "box_size": list(model.box.size),
        "orientations": [
            {"index": f.rotation_index, "size": list(f.size), "up": list(f.up),
             "planes": [[*p.normal, p.offset] for p in f.planes]}
            for f in feats
        ],
    }


def _features_from_dict(doc: dict) -> list[OrientedFeatures]:
    return [
        OrientedFeatures(o["index"], tuple(o["size"]),
                         tuple(SurfacePlane(tuple(p[:3]), p[3]) for p in o["planes"]), tuple(o["up"]))
        for o in doc["orientations"]
    ]


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class CadDatabase:
    """In-memory CAD index; immutable after construction."""

    def __init__(self, models: list[CadModel] | None = None, aliases: dict[str, str] | None = None,
                 features: dict[str, list[OrientedFeatures]] | None = None):
        self.aliases = dict(DEFAULT_ALIASES if aliases is None else aliases)
        self.models: dict[str, CadModel] = {}
        self._features: dict[str, list[OrientedFeatures]] = {}
        for m in sorted(models or [], key=lambda m: m.model_id):
            if m.model_id in self.models:
                raise CadLoadError(f"duplicate model id {m.model_id}")
            self.models[m.model_id] = m
            if features and m.model_id in features:
                self._features[m.model_id] = features[m.model_id]
            else:
                self._features[m.model_id] = precompute_oriented_features(m)

    def __len__(self):
        return len(self.models)

    def normalize_class(self, semantic_class: str) -> str:
        key = semantic_class.strip().lower()
        return self.aliases.get(key, key)

    def features(self, model_id: str) -> list[OrientedFeatures]:
        return self._features[model_id]

    def classes(self) -> list[str]:
        return sorted({self.normalize_class(m.semantic_class) for m in self.models.values()})

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for model_id, model in self.models.items():
            rel = Path("models") / model_id
            mdir = root / rel
            mdir.mkdir(parents=True, exist_ok=True)
            parts = []
            for part in model.parts:
                fname = f"{part.name}.obj"
                write_obj(mdir / fname, part.mesh)
                entry = {"name": part.name, "mesh": fname}
                if part.joint is not None:
                    entry["joint"] = _joint_to_dict(part.joint)
                parts.append(entry)
            descriptor = {
                "id": model_id,
                "class": model.semantic_class,
                "parts": parts,
                "canonical_transform": np.asarray(model.canonical_transform).tolist(),
            }
            (mdir / "model.json").write_text(_dump(descriptor), encoding="utf-8")
            (mdir / "features.json").write_text(_dump(_features_to_dict(model, self.features(model_id))),
                                                encoding="utf-8")
            entries.append({"id": model_id, "class": model.semantic_class, "path": rel.as_posix()})
        manifest = {"models": entries, "aliases": dict(sorted(self.aliases.items()))}
        (root / "manifest.json").write_text(_dump(manifest), encoding="utf-8")

    @classmethod
    def load(cls, root, plane_params: PlaneExtractParams = PlaneExtractParams()) -> "CadDatabase":
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.is_file():
            raise CadLoadError(f"no CAD manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        models, features = [], {}
        for entry in manifest.get("models", []):
            mdir = root / entry["path"]
            desc = json.loads((mdir / "model.json").read_text(encoding="utf-8"))
            parts = []
            for p in desc["parts"]:
                mesh = read_obj(mdir / p["mesh"]).cleaned()
                if mesh.is_empty:
                    raise CadLoadError(f"part {p['name']} of {desc['id']} is empty")
                parts.append(CadPart(p["name"], mesh, _joint_from_dict(p["joint"]) if "joint" in p else None))
            model = CadModel(desc["id"], desc["class"], parts,
                             canonical_transform=np.asarray(desc.get("canonical_transform", np.eye(4)), dtype=float),
                             up_direction=tuple(desc.get("up", (0.0, 0.0, 1.0))))
            cache = mdir / "features.json"
            if cache.is_file():
                feats = _features_from_dict(json.loads(cache.read_text(encoding="utf-8")))
                union = model.union_mesh()
                lo, hi = union.vertices.min(axis=0), union.vertices.max(axis=0)
                model.box = OrientedBox((0.0, 0.0, 0.0), 0.0, tuple(np.maximum(hi - lo, 1e-6)))
                model.planes = list(feats[0].planes)
                features[model.model_id] = feats
            else:
                model = canonicalize(model, plane_params)
            models.append(model)
        return cls(models, manifest.get("aliases"), features)


def query_by_class(db: CadDatabase, semantic_class: str) -> list[CadModel]:
    """All models of a class (after alias normalisation), ordered by model id."""
    wanted = db.normalize_class(semantic_class)
    return [m for m in db.models.values() if db.normalize_class(m.semantic_class) == wanted]
