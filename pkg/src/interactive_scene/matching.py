"""Ranking-based coarse CAD matching over the 24 discrete orientations."""

from __future__ import annotations

import csv
import heapq
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .cad_library import CadDatabase, OrientedFeatures, orientation_set, query_by_class
from .contact_graph import SceneEntity
from .geometry import GRAVITY, OrientedBox, SurfacePlane

logger = logging.getLogger(__name__)

C_DUMMY = 2.0


@dataclass(frozen=True)
class MatchWeights:
    size: float = 1.0
    planes: float = 1.0
    bias: float = 0.2

    def __post_init__(self):
        if min(self.size, self.planes, self.bias) < 0:
            raise ValueError("matching weights must be non-negative")


@dataclass(frozen=True)
class MatchCandidate:
    model_id: str
    rotation_index: int
    matching_error: float
    size_term: float
    plane_term: float
    bias_term: float
    # (entity plane index, CAD plane index or None for a dummy slot)
    plane_assignment: tuple[tuple[int, int | None], ...]

    @property
    def rotation(self) -> np.ndarray:
        return orientation_set()[self.rotation_index]

    def assignment_map(self) -> dict[int, int | None]:
        return dict(self.plane_assignment)


# ---------------------------------------------------------------------------
# Linear assignment
# ---------------------------------------------------------------------------


def solve_assignment(cost) -> tuple[list[int], float] | None:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest augmenting paths with dual potentials (Hungarian method) for an
    ``n x m`` matrix with ``n <= m``. ``inf`` entries are forbidden; returns
    ``None`` when no finite assignment exists.
    """
    a = np.asarray(cost, dtype=float)
    n, m = a.shape
    if n == 0:
        return [], 0.0
    if n > m:
        raise ValueError("assignment needs at least as many columns as rows")
    rows = a.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui = u[i0]
            delta, j1 = inf, -1
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            if j1 < 0 or delta == inf:
                return None
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    total = 0.0
    for i, j in enumerate(assignment):
        total += rows[i][j]
    if not math.isfinite(total):
        return None
    return assignment, total


def plane_pair_cost(px: SurfacePlane, py: SurfacePlane, norm_x: float, norm_y: float) -> float:
    return abs(px.offset / norm_x - py.offset / norm_y) + 1.0 - float(px.n @ py.n)


def support_plane_index(planes: Sequence[SurfacePlane], a_th: float = -0.9) -> int | None:
    """Index of the dominant upward plane, or ``None`` when no plane faces up."""
    return next((i for i, p in enumerate(planes) if p.is_supporting(a_th)), None)


def solve_plane_assignment(planes_x: Sequence[SurfacePlane], planes_y: Sequence[SurfacePlane],
                           cost_fn: Callable[[SurfacePlane, SurfacePlane], float],
                           support_constraint: bool = True, a_th: float = -0.9,
                           c_dummy: float = C_DUMMY) -> tuple[list[int | None], float] | None:
    """Injective plane matching Pi_x -> Pi_y with optional support preservation.

    The support plane of x (its first upward plane; planes come ordered by
    inlier count) may only map to an upward plane of y. When y has fewer
    planes, dummy columns of cost ``c_dummy`` absorb the surplus. Returns
    ``(assignment, cost)`` with ``None`` marking a dummy match, or ``None``
    when every assignment is infeasible.
    """
    nx, ny = len(planes_x), len(planes_y)
    if nx == 0:
        return [], 0.0
    n_dummy = max(0, nx - ny)
    cost = np.full((nx, ny + n_dummy), c_dummy)
    support_idx = support_plane_index(planes_x, a_th) if support_constraint else None
    for i, px in enumerate(planes_x):
        up_x = i == support_idx
        for j, py in enumerate(planes_y):
            if up_x and not py.is_supporting(a_th):
                cost[i, j] = math.inf
            else:
                cost[i, j] = cost_fn(px, py)
    solved = solve_assignment(cost)
    if solved is None:
        return None
    cols, total = solved
    return [c if c < ny else None for c in cols], total


# ---------------------------------------------------------------------------
# Matching terms
# ---------------------------------------------------------------------------


def size_distance(size_x, size_y) -> float:
    sx = np.asarray(size_x, dtype=float)
    sy = np.asarray(size_y, dtype=float)
    return float(np.linalg.norm(sx / np.linalg.norm(sx) - sy / np.linalg.norm(sy)))


def plane_in_box_frame(plane: SurfacePlane, box: OrientedBox) -> SurfacePlane:
    """Express a world plane in the box frame (centre at origin, yaw removed)."""
    n = box.rotation.T @ plane.n
    return SurfacePlane(tuple(n), float(plane.n @ box.center) + plane.offset)


def entity_box_planes(entity: SceneEntity) -> list[SurfacePlane]:
    return [plane_in_box_frame(p, entity.box) for p in entity.planes]


def plane_misalignment(x: SceneEntity, y: OrientedFeatures, assignment: Sequence[int | None],
                       c_dummy: float = C_DUMMY) -> float:
    """Summed offset + normal misalignment of matched plane pairs (both in box frames)."""
    norm_x = float(np.linalg.norm(x.box.size))
    norm_y = float(np.linalg.norm(y.size))
    total = 0.0
    for px, j in zip(entity_box_planes(x), assignment):
        total += c_dummy if j is None else plane_pair_cost(px, y.planes[j], norm_x, norm_y)
    return total


def orientation_bias(up, gravity=GRAVITY) -> float:
    """1 + g . z(y): 0 upright, 1 on its side, 2 upside down."""
    return 1.0 + float(np.asarray(gravity, dtype=float) @ np.asarray(up, dtype=float))


def _score(x: SceneEntity, x_planes: list[SurfacePlane], feats: OrientedFeatures, model_id: str,
           weights: MatchWeights, a_th: float, bound: float) -> MatchCandidate | None:
    d_s = size_distance(x.box.size, feats.size)
    d_b = orientation_bias(feats.up)
    lower = weights.size * d_s + weights.bias * d_b
    if lower > bound:
        return None
    norm_x = float(np.linalg.norm(x.box.size))
    norm_y = float(np.linalg.norm(feats.size))
    solved = solve_plane_assignment(
        x_planes, feats.planes, lambda px, py: plane_pair_cost(px, py, norm_x, norm_y), True, a_th)
    if solved is None:
        return None
    assignment, d_pi = solved
    me = weights.size * d_s + weights.planes * d_pi + weights.bias * d_b
    return MatchCandidate(model_id, feats.rotation_index, me, d_s, d_pi, d_b,
                          tuple(enumerate(assignment)))


def matching_distance(x: SceneEntity, y: OrientedFeatures, weights: MatchWeights = MatchWeights(),
                      model_id: str = "", a_th: float = -0.9) -> MatchCandidate | None:
    """Weighted size + plane + orientation-bias distance; ``None`` if no valid plane matching."""
    return _score(x, entity_box_planes(x), y, model_id, weights, a_th, math.inf)


def rank_candidates(x: SceneEntity, db: CadDatabase, k: int = 10, weights: MatchWeights = MatchWeights(),
                    a_th: float = -0.9) -> list[MatchCandidate]:
    """Top-k (model, orientation) candidates of x's class, ascending matching error."""
    if k < 1:
        raise ValueError("k must be at least 1")
    models = query_by_class(db, x.semantic_class)
    x_planes = entity_box_planes(x)
    heap: list[tuple] = []  # max-heap on the sort key via negation
    for model in models:
        for feats in db.features(model.model_id):
            bound = -heap[0][0] if len(heap) == k else math.inf
            cand = _score(x, x_planes, feats, model.model_id, weights, a_th, bound)
            if cand is None:
                continue
            key = (cand.matching_error, cand.model_id, cand.rotation_index)
            if len(heap) < k:
                heapq.heappush(heap, (-key[0], _Rev(key), cand))
            elif key < heap[0][1].key:
                heapq.heapreplace(heap, (-key[0], _Rev(key), cand))
    out = [item[2] for item in heap]
    out.sort(key=lambda c: (c.matching_error, c.model_id, c.rotation_index))
    return out


class _Rev:
    """Reverses ordering so the heap root is the worst kept candidate on ties too."""

    __slots__ = ("key",)

    def __init__(self, key):
        self.key = key

    def __lt__(self, other):
        return self.key > other.key

    def __eq__(self, other):
        return self.key == other.key


def write_matching_csv(path, candidates: Sequence[MatchCandidate]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "orientation", "d_s", "d_pi", "d_b", "ME"])
        for c in candidates:
            writer.writerow([c.model_id, c.rotation_index, repr(c.size_term), repr(c.plane_term),
                             repr(c.bias_term), repr(c.matching_error)])
