"""Scene-level physical plausibility: support and non-penetration via min-conflict search."""

from __future__ import annotations

import enum
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Hashable, Sequence

import numpy as np

from .alignment import AlignmentResult, candidate_world_mesh
from .cad_library import CadDatabase, orientation_set, rotate_plane
from .contact_graph import ContactGraph, GraphParams, Placement, SceneEntity, support_area_ratio_from_vertices
from .geometry import (
    ConvexPolytope,
    OrientedBox,
    SurfacePlane,
    TriangleMesh,
    mesh_polytopes,
    polytopes_penetration,
    transform_plane,
)

logger = logging.getLogger(__name__)


class ConflictKind(str, enum.Enum):
    CHILD_SUPPORT_LOST = "ChildSupportLost"
    LAYOUT_COLLISION = "LayoutCollision"
    OBJECT_COLLISION = "ObjectCollision"


@dataclass(frozen=True)
class Conflict:
    kind: ConflictKind
    entities: tuple[str, ...]
    magnitude: float

    def __post_init__(self):
        if not self.magnitude > 0:
            raise ValueError("conflict magnitude must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "entities": list(self.entities), "magnitude": self.magnitude}


@dataclass(frozen=True)
class ValidationParams:
    b_th: float = 0.5
    a_th: float = -0.9
    penetration_tol: float = 0.01
    plane_inlier_tol: float = 0.01
    support_height_tol: float = 0.1
    max_steps: int = 1000
    restarts: int = 5
    layout_thickness: float = 1.0
    seed: int = 0


@dataclass
class CandidateOption:
    """One choice for an entity: a placed CAD candidate or the scan mesh itself."""

    entity_id: str
    model_id: str | None
    rotation_index: int | None
    alignment_error: float
    mesh: TriangleMesh
    box: OrientedBox
    planes: list[SurfacePlane]
    rank: int | None = None
    result: AlignmentResult | None = None

    @property
    def is_scan(self) -> bool:
        return self.model_id is None

    @cached_property
    def polytopes(self) -> list[ConvexPolytope]:
        if self.is_scan:
            # the sentinel only brings its convex hull
            return [ConvexPolytope.from_points(self.mesh.vertices)]
        return mesh_polytopes(self.mesh)

    @cached_property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.min([p.aabb()[0] for p in self.polytopes], axis=0)
        hi = np.max([p.aabb()[1] for p in self.polytopes], axis=0)
        return lo, hi


def scan_option(entity: SceneEntity) -> CandidateOption:
    return CandidateOption(entity.instance_id, None, None, math.inf, entity.mesh, entity.box, list(entity.planes))


def cad_option(entity_id: str, result: AlignmentResult, db: CadDatabase, rank: int) -> CandidateOption:
    cand = result.candidate
    model = db.models[cand.model_id]
    rot = orientation_set()[cand.rotation_index]
    feats = db.features(cand.model_id)[cand.rotation_index]
    t = result.transform
    box = OrientedBox(t.translation, t.yaw, tuple(t.scale * np.asarray(feats.size)))
    planes = [transform_plane(rotate_plane(p, rot), t) for p in model.planes]
    mesh = candidate_world_mesh(model.union_mesh(), cand.rotation_index, t)
    return CandidateOption(entity_id, cand.model_id, cand.rotation_index, result.alignment_error, mesh, box,
                           planes, rank, result)


def layout_solid(layout: SceneEntity, interior, thickness: float = 1.0) -> ConvexPolytope:
    """Extrude a (thin) layout surface away from the room interior into a solid slab."""
    verts = layout.mesh.vertices
    centroid = verts.mean(axis=0)
    _, _, vt = np.linalg.svd(verts - centroid, full_matrices=False)
    n = vt[-1]
    side = float(n @ (np.asarray(interior, dtype=float) - centroid))
    if abs(side) <= 1e-9:
        # interior on the layout itself (a lone floor): extrude downwards
        if n[2] > 0 or (n[2] == 0 and tuple(n) > (0.0, 0.0, 0.0)):
            n = -n
    elif side > 0:
        n = -n
    return ConvexPolytope.from_points(np.vstack([verts, verts + thickness * n]))


def room_interior(layouts: Sequence[SceneEntity]):
    pts = np.vstack([l.mesh.vertices for l in layouts if l.mesh is not None and not l.mesh.is_empty])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return (lo + hi) / 2.0


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def support_ratio(parent: CandidateOption, child_box: OrientedBox, params: ValidationParams) -> float:
    """Best support ratio the option offers a child box across its upward planes."""
    cx, cy = child_box.position[0], child_box.position[1]
    best = 0.0
    for plane in parent.planes:
        if not plane.is_supporting(params.a_th):
            continue
        if abs(plane.height_at(cx, cy) - child_box.bottom) > params.support_height_tol:
            continue
        ratio = support_area_ratio_from_vertices(parent.mesh.vertices, plane, child_box, params.plane_inlier_tol)
        best = max(best, ratio)
    return best


def check_child_support(parent: CandidateOption, children: Sequence[tuple[str, OrientedBox]],
                        params: ValidationParams = ValidationParams()) -> list[Conflict]:
    """Conflicts for children whose footprint the parent option no longer carries."""
    out = []
    for child_id, box in children:
        ratio = support_ratio(parent, box, params)
        if ratio < params.b_th:
            out.append(Conflict(ConflictKind.CHILD_SUPPORT_LOST, (parent.entity_id, child_id), params.b_th - ratio))
    return out


def check_layout_collision(option: CandidateOption, layouts: Sequence[tuple[str, ConvexPolytope]],
                           params: ValidationParams = ValidationParams()) -> list[Conflict]:
    out = []
    for layout_id, solid in layouts:
        depth = polytopes_penetration(option.polytopes, [solid])
        if depth > params.penetration_tol:
            out.append(Conflict(ConflictKind.LAYOUT_COLLISION, (option.entity_id, layout_id), depth))
    return out


def _bounds_overlap(a: CandidateOption, b: CandidateOption) -> bool:
    alo, ahi = a.bounds
    blo, bhi = b.bounds
    return bool(np.all(np.minimum(ahi, bhi) - np.maximum(alo, blo) > 0))


def collision_conflict(a: CandidateOption, b: CandidateOption, params: ValidationParams) -> Conflict | None:
    if not _bounds_overlap(a, b):
        return None
    depth = polytopes_penetration(a.polytopes, b.polytopes)
    if depth > params.penetration_tol:
        return Conflict(ConflictKind.OBJECT_COLLISION, tuple(sorted((a.entity_id, b.entity_id))), depth)
    return None


def check_pairwise_collision(chosen: dict[str, CandidateOption], graph: ContactGraph,
                             params: ValidationParams = ValidationParams()) -> list[Conflict]:
    """Penetration between chosen options of entities not linked by a support edge."""
    support = graph.support_pairs()
    ids = sorted(chosen)
    out = []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if frozenset((a, b)) in support:
                continue
            c = collision_conflict(chosen[a], chosen[b], params)
            if c is not None:
                out.append(c)
    return out


# ---------------------------------------------------------------------------
# Generic min-conflict search
# ---------------------------------------------------------------------------


@dataclass
class SolveResult:
    assignment: dict[Hashable, int]
    conflicts: list[Conflict]
    steps: int
    restarts_used: int
    solved: bool


BinaryFn = Callable[[Hashable, int, Hashable, int], Sequence[Conflict]]


class ConstraintProblem:
    """Variables with finite domains, binary constraints on listed pairs.

    ``binary(a, va, b, vb)`` returns the conflicts between two values; results
    are cached. ``costs[v][i]`` breaks ties between equally conflicted values.
    """

    def __init__(self, domains: dict[Hashable, int], pairs: Sequence[tuple[Hashable, Hashable]],
                 binary: BinaryFn, costs: dict[Hashable, Sequence[float]] | None = None):
        self.variables = list(domains)
        self.domains = dict(domains)
        if any(n < 1 for n in self.domains.values()):
            raise ValueError("every variable needs at least one value")
        self.neighbours: dict[Hashable, list[Hashable]] = {v: [] for v in self.variables}
        for a, b in pairs:
            if b not in self.neighbours[a]:
                self.neighbours[a].append(b)
                self.neighbours[b].append(a)
        self._binary = binary
        self._cache: dict[tuple, tuple[Conflict, ...]] = {}
        self.costs = costs or {v: [0.0] * n for v, n in self.domains.items()}

    def between(self, a, va, b, vb) -> tuple[Conflict, ...]:
        key = (a, va, b, vb)
        hit = self._cache.get(key)
        if hit is None:
            hit = tuple(self._binary(a, va, b, vb))
            self._cache[key] = hit
            self._cache[(b, vb, a, va)] = hit
        return hit

    def variable_conflicts(self, assignment: dict, var, value: int) -> list[Conflict]:
        out = []
        for other in self.neighbours[var]:
            out.extend(self.between(var, value, other, assignment[other]))
        return out

    def all_conflicts(self, assignment: dict) -> list[Conflict]:
        seen = set()
        out = []
        for var in self.variables:
            for other in self.neighbours[var]:
                key = frozenset((var, other))
                if key in seen:
                    continue
                seen.add(key)
                out.extend(self.between(var, assignment[var], other, assignment[other]))
        return out


def min_conflicts(problem: ConstraintProblem, initial: dict, max_steps: int = 1000, restarts: int = 5,
                  seed: int = 0) -> SolveResult:
    """Min-conflict local search with seeded restarts.

    Each step picks a conflicted variable uniformly at random and moves it to
    the value with the fewest conflicts (then smallest total magnitude, then
    lowest cost). Returns the first conflict-free assignment, otherwise the
    best one seen.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    root = np.random.SeedSequence(seed)
    best_assign, best_key, best_conf = dict(initial), None, None
    steps_total = 0
    for attempt, child in enumerate(root.spawn(max(1, restarts))):
        rng = np.random.default_rng(child)
        if attempt == 0:
            assign = dict(initial)
        else:
            assign = {v: int(rng.integers(n)) for v, n in problem.domains.items()}
        steps = 0
        while True:
            conflicts = problem.all_conflicts(assign)
            key = (len(conflicts), sum(c.magnitude for c in conflicts))
            if best_key is None or key < best_key:
                best_key, best_assign, best_conf = key, dict(assign), conflicts
            if not conflicts:
                return SolveResult(dict(assign), [], steps_total, attempt, True)
            if steps >= max_steps:
                break
            conflicted = sorted({e for c in conflicts for e in c.entities if e in problem.domains},
                                key=problem.variables.index)
            var = conflicted[int(rng.integers(len(conflicted)))]
            choices = []
            for value in range(problem.domains[var]):
                vc = problem.variable_conflicts(assign, var, value)
                choices.append((len(vc), sum(c.magnitude for c in vc), problem.costs[var][value], value))
            assign[var] = min(choices)[3]
            steps += 1
            steps_total += 1
    return SolveResult(best_assign, best_conf or [], steps_total, max(1, restarts) - 1, False)


def exhaustive_search(problem: ConstraintProblem) -> dict | None:
    """Reference solver: first conflict-free assignment in lexicographic order, or None."""
    vars_ = problem.variables
    for values in itertools.product(*(range(problem.domains[v]) for v in vars_)):
        assign = dict(zip(vars_, values))
        if not problem.all_conflicts(assign):
            return assign
    return None


# ---------------------------------------------------------------------------
# Scene validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    entries: list[dict] = field(default_factory=list)
    conflicts: list[Conflict] = field(default_factory=list)
    solved: bool = True
    steps: int = 0

    def to_dict(self) -> dict:
        return {"solved": self.solved, "steps": self.steps, "entities": self.entries,
                "conflicts": [c.to_dict() for c in self.conflicts]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_options(graph: ContactGraph, ranked: dict[str, Sequence[AlignmentResult]], db: CadDatabase,
                  params: ValidationParams = ValidationParams()) -> tuple[dict[str, list[CandidateOption]], dict]:
    """Candidate options per object entity, layout-colliding CADs removed; the scan sentinel is last."""
    layouts = [l for l in graph.layouts() if l.mesh is not None and not l.mesh.is_empty]
    solids = []
    if layouts:
        interior = room_interior(layouts)
        solids = [(l.instance_id, layout_solid(l, interior, params.layout_thickness)) for l in layouts]
    options: dict[str, list[CandidateOption]] = {}
    pruned: dict[str, list[Conflict]] = {}
    for ent in sorted(graph.objects(), key=lambda e: e.instance_id):
        opts = []
        for rank, res in enumerate(ranked.get(ent.instance_id, [])):
            if res.diverged:
                continue
            opt = cad_option(ent.instance_id, res, db, rank)
            hits = check_layout_collision(opt, solids, params)
            if hits:
                pruned.setdefault(ent.instance_id, []).extend(hits)
                continue
            opts.append(opt)
        opts.append(scan_option(ent))
        options[ent.instance_id] = opts
    return options, pruned


def scene_problem(graph: ContactGraph, options: dict[str, list[CandidateOption]],
                  params: ValidationParams = ValidationParams()) -> ConstraintProblem:
    support = graph.support_pairs()
    parent_of = {}
    for e in graph.support_edges:
        if e.child in options and e.parent in options and not e.floating:
            parent_of[e.child] = e.parent
    ids = sorted(options)
    pairs = []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if parent_of.get(a) == b or parent_of.get(b) == a:
                pairs.append((a, b))
            elif frozenset((a, b)) not in support and any(
                    _bounds_overlap(x, y) for x in options[a] for y in options[b]):
                pairs.append((a, b))

    def binary(a, va, b, vb):
        oa, ob = options[a][va], options[b][vb]
        if parent_of.get(b) == a:
            parent, child = oa, ob
        elif parent_of.get(a) == b:
            parent, child = ob, oa
        else:
            c = collision_conflict(oa, ob, params)
            return [] if c is None else [c]
        if parent.is_scan and child.is_scan:
            return []  # the scanned configuration is the reference
        return check_child_support(parent, [(child.entity_id, child.box)], params)

    costs = {k: [o.alignment_error for o in v] for k, v in options.items()}
    return ConstraintProblem({k: len(v) for k, v in options.items()}, pairs, binary, costs)


def min_conflict_solve(graph: ContactGraph, options: dict[str, list[CandidateOption]],
                       params: ValidationParams = ValidationParams()) -> SolveResult:
    problem = scene_problem(graph, options, params)
    initial = {k: 0 for k in options}  # options are AE-ranked, so 0 is the minimum-AE choice
    return min_conflicts(problem, initial, params.max_steps, params.restarts, params.seed)


def validate_scene(graph: ContactGraph, ranked: dict[str, Sequence[AlignmentResult]], db: CadDatabase,
                   params: ValidationParams = ValidationParams()) -> tuple[ContactGraph, ValidationReport]:
    """Choose one option per object so the scene is collision-free and stably supported."""
    options, pruned = build_options(graph, ranked, db, params)
    result = min_conflict_solve(graph, options, params)
    report = ValidationReport(conflicts=list(result.conflicts), solved=result.solved, steps=result.steps)
    if not result.solved:
        logger.warning("physical validation left %d conflict(s) unresolved", len(result.conflicts))
    graph.placements = {}
    for ent_id in sorted(options):
        opt = options[ent_id][result.assignment[ent_id]]
        mine = [c.to_dict() for c in result.conflicts if ent_id in c.entities]
        entry = {"entity": ent_id, "chosenModel": opt.model_id, "rank": opt.rank,
                 "AE": None if math.isinf(opt.alignment_error) else opt.alignment_error,
                 "conflicts": mine, "prunedLayoutCollisions": len(pruned.get(ent_id, []))}
        if opt.is_scan:
            entry["note"] = "kept scan mesh" if ranked.get(ent_id) else "no CAD candidates; kept scan mesh"
        else:
            graph.placements[ent_id] = Placement(opt.model_id, opt.rotation_index, opt.result.transform,
                                                 opt.alignment_error, opt.rank)
        report.entries.append(entry)
    return graph, report
