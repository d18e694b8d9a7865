"""Contact graph: a support parse tree plus proximal (non-penetration) edges."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import (
    GRAVITY,
    GeometryError,
    OrientedBox,
    SimTransform,
    SurfacePlane,
    TriangleMesh,
    boxes_overlap_volume,
    clip_convex_polygon,
)

logger = logging.getLogger(__name__)

ROOT_ID = "scene"


class EntityKind(str, enum.Enum):
    ROOT = "SceneRoot"
    LAYOUT = "Layout"
    RIGID = "RigidObject"
    ARTICULATED = "ArticulatedObject"


class OrphanEntityError(RuntimeError):
    pass


class RefinementError(GeometryError):
    pass


@dataclass(frozen=True)
class GraphParams:
    a_th: float = -0.9
    b_th: float = 0.5
    below_slack: float = 0.1
    plane_inlier_tol: float = 0.01
    layout_classes: tuple[str, ...] = ("floor", "wall", "ceiling")
    floor_class: str = "floor"


@dataclass
class SceneEntity:
    instance_id: str
    semantic_class: str
    kind: EntityKind
    mesh: TriangleMesh | None = None
    box: OrientedBox | None = None
    planes: list[SurfacePlane] = field(default_factory=list)

    def __post_init__(self):
        self.kind = EntityKind(self.kind)
        if self.kind is not EntityKind.ROOT and self.box is None:
            raise GeometryError(f"entity {self.instance_id!r} needs a bounding box")

    @property
    def is_root(self) -> bool:
        return self.kind is EntityKind.ROOT

    @property
    def is_layout(self) -> bool:
        return self.kind is EntityKind.LAYOUT

    def supporting_planes(self, a_th: float = -0.9) -> list[SurfacePlane]:
        return [p for p in self.planes if p.is_supporting(a_th)]


def root_entity() -> SceneEntity:
    return SceneEntity(ROOT_ID, "scene", EntityKind.ROOT)


@dataclass(frozen=True)
class SupportEdge:
    parent: str
    child: str
    plane: SurfacePlane | None
    score: float
    floating: bool = False


@dataclass(frozen=True)
class ProximalEdge:
    a: str
    b: str

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("proximal edge needs two distinct entities")
        if self.b < self.a:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class Placement:
    """CAD replacement chosen for an entity."""

    model_id: str
    rotation_index: int
    transform: SimTransform
    alignment_error: float
    rank: int


@dataclass
class ContactGraph:
    entities: dict[str, SceneEntity]
    support_edges: list[SupportEdge] = field(default_factory=list)
    proximal_edges: list[ProximalEdge] = field(default_factory=list)
    placements: dict[str, Placement] = field(default_factory=dict)
    root_id: str = ROOT_ID

    def parent_of(self, entity_id: str) -> SupportEdge | None:
        for edge in self.support_edges:
            if edge.child == entity_id:
                return edge
        return None

    def children_of(self, entity_id: str) -> list[str]:
        return [e.child for e in self.support_edges if e.parent == entity_id]

    def non_root(self) -> list[SceneEntity]:
        return [e for e in self.entities.values() if not e.is_root]

    def layouts(self) -> list[SceneEntity]:
        return [e for e in self.entities.values() if e.is_layout]

    def objects(self) -> list[SceneEntity]:
        return [e for e in self.entities.values() if not e.is_root and not e.is_layout]

    def support_pairs(self) -> set[frozenset]:
        return {frozenset((e.parent, e.child)) for e in self.support_edges}

    def dfs_order(self) -> list[str]:
        """Pre-order traversal from the root; children visited in edge order."""
        children: dict[str, list[str]] = {}
        for e in self.support_edges:
            children.setdefault(e.parent, []).append(e.child)
        order, stack, seen = [], [self.root_id], set()
        while stack:
            node = stack.pop()
            if node in seen:
                raise ValueError(f"support edges contain a cycle through {node!r}")
            seen.add(node)
            order.append(node)
            stack.extend(reversed(children.get(node, [])))
        return order

    def is_tree(self) -> bool:
        parents: dict[str, int] = {}
        for e in self.support_edges:
            if e.parent == e.child:
                return False
            parents[e.child] = parents.get(e.child, 0) + 1
        if any(c != 1 for c in parents.values()) or self.root_id in parents:
            return False
        try:
            order = self.dfs_order()
        except ValueError:
            return False
        return len(order) == len(self.entities) and len(self.support_edges) == len(self.entities) - 1


# ---------------------------------------------------------------------------
# Support scoring
# ---------------------------------------------------------------------------


def support_distance(child: SceneEntity | OrientedBox, plane: SurfacePlane) -> float:
    """Signed gap between the child's box bottom and the plane (positive: floating above)."""
    box = child.box if isinstance(child, SceneEntity) else child
    height = plane.height_at(box.position[0], box.position[1])
    return box.position[2] - (height + box.size[2] / 2.0)


def support_area_ratio_from_vertices(vertices: np.ndarray, plane: SurfacePlane, child_box: OrientedBox,
                                     tol: float = 0.01) -> float:
    """Fraction of the child's footprint covered by the parent's near-plane support region.

    Parent vertices within ``tol`` of the plane span a support region (their
    convex hull); the region is clipped to the child footprint and the
    rectangle enclosing the clipped part, in the child's frame, is compared
    with the child's footprint area.
    """
    child_area = child_box.footprint_area
    if child_area <= 1e-12:
        raise GeometryError("child footprint is degenerate")
    if vertices is None or len(vertices) == 0:
        return 0.0
    near = vertices[np.abs(vertices @ plane.n + plane.offset) <= tol]
    if len(near) < 3:
        return 0.0
    xy = np.unique(np.round(near[:, :2], 12), axis=0)
    if len(xy) < 3:
        return 0.0
    try:
        hull = ConvexHull(xy)
    except QhullError:
        return 0.0
    region = xy[hull.vertices]
    clipped = clip_convex_polygon(region, child_box.footprint())
    if len(clipped) < 3:
        return 0.0
    c, s = math.cos(child_box.yaw), math.sin(child_box.yaw)
    local = (clipped - np.array(child_box.position[:2])) @ np.array([[c, -s], [s, c]])
    ext = local.max(axis=0) - local.min(axis=0)
    return float(min(1.0, max(0.0, ext[0] * ext[1] / child_area)))


def support_area_ratio(parent: SceneEntity, plane: SurfacePlane, child: SceneEntity, tol: float = 0.01) -> float:
    verts = parent.mesh.vertices if parent.mesh is not None else None
    return support_area_ratio_from_vertices(verts, plane, child.box, tol)


def support_score(child: SceneEntity, parent: SceneEntity, plane: SurfacePlane, tol: float = 0.01) -> float:
    dist = support_distance(child, plane)
    return (1.0 - min(1.0, abs(dist))) * support_area_ratio(parent, plane, child, tol)


@dataclass(frozen=True)
class ParentChoice:
    parent_id: str
    plane: SurfacePlane
    score: float
    distance: float
    floating: bool = False


def _fallback_plane(floor: SceneEntity, a_th: float) -> SurfacePlane:
    planes = floor.supporting_planes(a_th)
    if planes:
        return max(planes, key=lambda p: p.height_at(*floor.box.position[:2]))
    return SurfacePlane((0.0, 0.0, 1.0), -floor.box.top)


def infer_parent(child: SceneEntity, candidates: list[SceneEntity], params: GraphParams = GraphParams()) -> ParentChoice:
    """Pick the (entity, plane) pair that best supports ``child``.

    Falls back to the floor with score 0 (flagged floating) when nothing
    supports the child; raises :class:`OrphanEntityError` if there is no floor.
    """
    best_key, best = None, None
    floor = None
    bottom = child.box.bottom
    for cand in candidates:
        if cand.instance_id == child.instance_id or cand.is_root:
            continue
        if cand.semantic_class == params.floor_class and floor is None:
            floor = cand
        for plane in cand.supporting_planes(params.a_th):
            height = plane.height_at(child.box.position[0], child.box.position[1])
            if height > bottom + params.below_slack:
                continue
            dist = support_distance(child, plane)
            area = support_area_ratio(cand, plane, child, params.plane_inlier_tol)
            score = (1.0 - min(1.0, abs(dist))) * area
            if score <= 0.0:
                continue
            key = (-score, abs(dist), cand.box.footprint_area, cand.instance_id)
            if best_key is None or key < best_key:
                best_key = key
                best = ParentChoice(cand.instance_id, plane, score, dist)
    if best is not None:
        return best
    if floor is None:
        raise OrphanEntityError(f"no supporting entity or floor for {child.instance_id!r}")
    plane = _fallback_plane(floor, params.a_th)
    return ParentChoice(floor.instance_id, plane, 0.0, support_distance(child, plane), floating=True)


def refine_box(child: SceneEntity | OrientedBox, plane: SurfacePlane) -> OrientedBox:
    """Snap the box bottom onto the supporting plane, keeping the top face fixed."""
    box = child.box if isinstance(child, SceneEntity) else child
    if support_distance(box, plane) == 0.0:
        return box
    height = plane.height_at(box.position[0], box.position[1])
    if height >= box.top:
        raise RefinementError("supporting plane lies above the box top")
    return box.with_vertical(height, box.top)


def is_layout_class(semantic_class: str, params: GraphParams) -> bool:
    return semantic_class in params.layout_classes


def build_graph(entities: list[SceneEntity], params: GraphParams = GraphParams()) -> ContactGraph:
    """Bottom-up construction of the support tree, then proximal edges."""
    ids = [e.instance_id for e in entities]
    if len(set(ids)) != len(ids):
        raise ValueError("instance ids must be unique")
    if ROOT_ID in ids:
        raise ValueError(f"{ROOT_ID!r} is reserved for the scene root")
    layouts = [e for e in entities if e.is_layout]
    if not any(e.semantic_class == params.floor_class for e in layouts):
        logger.warning("scene has no floor entity; unsupported objects will attach to the root")

    current: dict[str, SceneEntity] = {e.instance_id: e for e in entities}
    edges: list[SupportEdge] = [SupportEdge(ROOT_ID, e.instance_id, None, 1.0) for e in layouts]

    objects = sorted((e for e in entities if not e.is_layout), key=lambda e: (e.box.bottom, e.instance_id))
    processed: list[str] = [e.instance_id for e in layouts]
    for obj in objects:
        candidates = [current[i] for i in processed]
        try:
            choice = infer_parent(obj, candidates, params)
        except OrphanEntityError as exc:
            logger.warning("%s; attaching to the scene root", exc)
            edges.append(SupportEdge(ROOT_ID, obj.instance_id, None, 0.0, floating=True))
            processed.append(obj.instance_id)
            continue
        if choice.floating:
            logger.warning("%s has no supporting entity; attached to %s as floating",
                           obj.instance_id, choice.parent_id)
        else:
            parent = current[choice.parent_id]
            ratio = support_area_ratio(parent, choice.plane, obj, params.plane_inlier_tol)
            if ratio < params.b_th:
                logger.warning("%s is only %.0f%% supported by %s", obj.instance_id, 100 * ratio,
                               choice.parent_id)
            try:
                current[obj.instance_id] = replace(obj, box=refine_box(obj, choice.plane))
            except RefinementError:
                logger.warning("could not refine the box of %s", obj.instance_id)
        edges.append(SupportEdge(choice.parent_id, obj.instance_id, choice.plane, choice.score,
                                 floating=choice.floating))
        processed.append(obj.instance_id)

    support = {frozenset((e.parent, e.child)) for e in edges}
    movable = sorted(e.instance_id for e in entities if not e.is_layout)
    proximal = []
    for i, a in enumerate(movable):
        for b in movable[i + 1:]:
            if frozenset((a, b)) in support:
                continue
            if boxes_overlap_volume(current[a].box, current[b].box) > 0.0:
                proximal.append(ProximalEdge(a, b))

    all_entities = {ROOT_ID: root_entity()}
    all_entities.update((e.instance_id, current[e.instance_id]) for e in entities)
    return ContactGraph(all_entities, edges, proximal)
