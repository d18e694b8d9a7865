"""Fine alignment of shortlisted CAD candidates by damped least squares.

The candidate pose is ``v -> alpha * Rz(theta) * R_k v + p`` where ``R_k`` is
the discrete orientation picked by matching. The vertical translation is tied
to the supporting plane so that the CAD bottom rests on it.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cad_library import CadDatabase, OrientedFeatures, orientation_set
from .contact_graph import SceneEntity
from .geometry import (
    OrientedBox,
    SimTransform,
    SurfacePlane,
    TriangleMesh,
    footprint_overlap_area,
    mesh_to_cad_rms,
    wrap_angle,
)
from .matching import C_DUMMY, MatchCandidate, plane_in_box_frame

logger = logging.getLogger(__name__)

ALPHA_MIN = 0.5
ALPHA_MAX = 2.0
PAIR_MIN_COS = math.cos(math.radians(45.0))
PAIR_MAX_OFFSET = 0.02


@dataclass(frozen=True)
class LMParams:
    max_iter: int = 100
    g_tol: float = 1e-8
    x_tol: float = 1e-10
    lambda0: float = 1e-3
    nu: float = 2.0
    lambda_max: float = 1e16
    fd_step: float = 1e-6


@dataclass(frozen=True)
class ResidualWeights:
    """Diagonal weights applied as ``e^T W e`` (defaults to identity)."""

    box: tuple[float, float] = (1.0, 1.0)
    plane: tuple[float, float] = (1.0, 1.0)
    area_mode: str = "containment"  # or "symmetric"

    def __post_init__(self):
        if min(self.box + self.plane) < 0:
            raise ValueError("residual weights must be non-negative")
        if self.area_mode not in ("containment", "symmetric"):
            raise ValueError(f"unknown area mode {self.area_mode!r}")


@dataclass
class AlignmentResult:
    transform: SimTransform
    objective: float
    alignment_error: float
    iterations: int
    converged: bool
    status: str
    candidate: MatchCandidate | None = None
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (iteration, lambda, J)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


class AlignmentProblem:
    """Residuals and Jacobian for one (entity, oriented candidate) pair.

    Parameters are ``(alpha, theta, px, py)``, plus ``pz`` when the entity has
    no supporting plane.
    """

    def __init__(self, x: SceneEntity, feats: OrientedFeatures, assignment: Sequence[int | None],
                 support: SurfacePlane | None, weights: ResidualWeights = ResidualWeights(),
                 c_dummy: float = C_DUMMY, fd_step: float = 1e-6):
        self.x = x
        self.feats = feats
        self.size_y = np.asarray(feats.size, dtype=float)
        # pairs that disagree in the box frame (normals beyond PAIR_MIN_COS, or scale-free
        # offsets beyond PAIR_MAX_OFFSET) are no real correspondence; they act as dummies
        norm_x, norm_y = float(np.linalg.norm(x.box.size)), float(np.linalg.norm(self.size_y))
        self.pairs = []
        for i, j in enumerate(assignment):
            py = None if j is None else feats.planes[j]
            if py is not None:
                pb = plane_in_box_frame(x.planes[i], x.box)
                if (float(pb.n @ py.n) < PAIR_MIN_COS
                        or abs(pb.offset / norm_x - py.offset / norm_y) > PAIR_MAX_OFFSET):
                    py = None
            self.pairs.append((x.planes[i], py))
        # offsets are measured from the entity box centre, not the world origin
        self.origin = np.asarray(x.box.center, dtype=float)
        self.free_z = support is None
        cx, cy, _ = x.box.center
        self.support_height = None if support is None else support.height_at(cx, cy)
        self.weights = weights
        self.c_dummy = c_dummy
        self.fd_step = fd_step
        self._wb = np.sqrt(np.asarray(weights.box, dtype=float))
        self._wp = np.sqrt(np.asarray(weights.plane, dtype=float))

    @property
    def n_params(self) -> int:
        return 5 if self.free_z else 4

    def pz(self, q: np.ndarray) -> float:
        if self.free_z:
            return float(q[4])
        return self.support_height + q[0] * self.size_y[2] / 2.0

    def transform(self, q: np.ndarray) -> SimTransform:
        return SimTransform(float(q[0]), float(q[1]), (float(q[2]), float(q[3]), self.pz(q)))

    def initial_guess(self, yaw: float | None = None) -> np.ndarray:
        box = self.x.box
        alpha = float(np.linalg.norm(box.size) / np.linalg.norm(self.size_y))
        alpha = min(max(alpha, ALPHA_MIN), ALPHA_MAX)
        theta = wrap_angle(box.yaw if yaw is None else yaw)
        q = [alpha, theta, box.center[0], box.center[1]]
        if self.free_z:
            q.append(box.center[2])
        return np.array(q, dtype=float)

    def candidate_box(self, q: np.ndarray) -> OrientedBox:
        return OrientedBox((float(q[2]), float(q[3]), self.pz(q)), float(q[1]),
                           tuple(float(v) for v in np.maximum(q[0] * self.size_y, 1e-9)))

    # residual blocks ---------------------------------------------------

    def area_residual(self, q: np.ndarray) -> float:
        cand = self.candidate_box(q)
        overlap = footprint_overlap_area(cand, self.x.box)
        if self.weights.area_mode == "containment":
            return cand.footprint_area - overlap
        return cand.footprint_area + self.x.box.footprint_area - 2.0 * overlap

    def box_residual(self, q: np.ndarray) -> np.ndarray:
        return np.array([self.area_residual(q), q[0] * self.size_y[2] - self.x.box.size[2]])

    def plane_residual(self, q: np.ndarray) -> np.ndarray:
        alpha, theta = q[0], q[1]
        p = np.array([q[2], q[3], self.pz(q)]) - self.origin
        c, s = math.cos(theta), math.sin(theta)
        out = []
        for px, py in self.pairs:
            if py is None:
                out.extend((0.0, self.c_dummy))
                continue
            nj = py.n
            n1 = np.array([c * nj[0] - s * nj[1], s * nj[0] + c * nj[1], nj[2]])
            d1 = alpha * py.offset - float(p @ n1)
            d0 = px.offset + float(px.n @ self.origin)
            out.extend((d1 - d0, 1.0 - float(px.n @ n1)))
        return np.array(out, dtype=float)

    def residual(self, q: np.ndarray) -> np.ndarray:
        rb = self.box_residual(q) * self._wb
        rp = self.plane_residual(q).reshape(-1, 2) * self._wp
        return np.concatenate([rb, rp.ravel()])

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        m = self.n_params
        rows = []
        # area term: central differences (piecewise smooth)
        row = np.zeros(m)
        for k in range(m):
            h = self.fd_step * max(1.0, abs(q[k]))
            qp, qm = q.copy(), q.copy()
            qp[k] += h
            qm[k] -= h
            row[k] = (self.area_residual(qp) - self.area_residual(qm)) / (2.0 * h)
        rows.append(row * self._wb[0])
        row = np.zeros(m)
        row[0] = self.size_y[2]
        rows.append(row * self._wb[1])

        alpha, theta = q[0], q[1]
        p = np.array([q[2], q[3], self.pz(q)]) - self.origin
        c, s = math.cos(theta), math.sin(theta)
        for px, py in self.pairs:
            r_off, r_nrm = np.zeros(m), np.zeros(m)
            if py is not None:
                nj = py.n
                n1 = np.array([c * nj[0] - s * nj[1], s * nj[0] + c * nj[1], nj[2]])
                ni = px.n
                r_off[0] = py.offset - (0.0 if self.free_z else self.size_y[2] / 2.0 * n1[2])
                r_off[1] = p[0] * n1[1] - p[1] * n1[0]
                r_off[2] = -n1[0]
                r_off[3] = -n1[1]
                if self.free_z:
                    r_off[4] = -n1[2]
                r_nrm[1] = ni[0] * n1[1] - ni[1] * n1[0]
            rows.append(r_off * self._wp[0])
            rows.append(r_nrm * self._wp[1])
        return np.vstack(rows)

    def objective(self, q: np.ndarray) -> float:
        r = self.residual(q)
        return float(r @ r)


def _project(q: np.ndarray) -> np.ndarray:
    q = q.copy()
    q[0] = min(max(q[0], ALPHA_MIN), ALPHA_MAX)
    return q


def levenberg_marquardt(problem: AlignmentProblem, q0: np.ndarray,
                        params: LMParams = LMParams()) -> tuple[np.ndarray, float, int, str, list]:
    """Marquardt-scaled LM with multiplicative damping; returns best iterate."""
    q = _project(np.asarray(q0, dtype=float))
    r = problem.residual(q)
    cost = float(r @ r)
    lam = params.lambda0
    history = [(0, lam, cost)]
    status = "max_iter"
    it = 0
    jac = problem.jacobian(q)
    while it < params.max_iter:
        grad = jac.T @ r
        if np.max(np.abs(grad), initial=0.0) < params.g_tol:
            status = "g_tol"
            break
        jtj = jac.T @ jac
        diag = np.maximum(np.diag(jtj), 1e-12)
        accepted = False
        while not accepted:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                q_new = _project(q + step)
                actual = q_new - q
                if np.linalg.norm(actual) <= params.x_tol * (np.linalg.norm(q) + params.x_tol):
                    status = "x_tol"
                    break
                r_new = problem.residual(q_new)
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    accepted = True
                    q, r, cost = q_new, r_new, cost_new
                    lam = max(lam / params.nu, 1e-300)
                    break
            lam *= params.nu
            if lam > params.lambda_max:
                status = "diverged"
                break
        if not accepted:
            break
        it += 1
        history.append((it, lam, cost))
        jac = problem.jacobian(q)
    q[1] = wrap_angle(q[1])
    return q, cost, it, status, history


def optimize(x: SceneEntity, candidate: MatchCandidate, feats: OrientedFeatures, support: SurfacePlane | None,
             weights: ResidualWeights = ResidualWeights(), lm: LMParams = LMParams(),
             yaw0: float | None = None) -> AlignmentResult:
    """Refine one candidate's similarity transform; AE is left at ``nan``."""
    problem = AlignmentProblem(x, feats, [j for _, j in candidate.plane_assignment], support, weights,
                               fd_step=lm.fd_step)
    q, cost, iters, status, history = levenberg_marquardt(problem, problem.initial_guess(yaw0), lm)
    return AlignmentResult(problem.transform(q), cost, math.nan, iters, status in ("g_tol", "x_tol"),
                           status, candidate, history)


def candidate_world_mesh(mesh: TriangleMesh, rotation_index: int, transform: SimTransform) -> TriangleMesh:
    """Canonical CAD mesh placed by discrete orientation then similarity transform."""
    return mesh.rotated(orientation_set()[rotation_index]).transformed(transform)


def alignment_error(x: SceneEntity, cad_mesh: TriangleMesh, transform: SimTransform,
                    rotation_index: int = 0) -> float:
    """RMS distance from the entity's scan vertices to the placed CAD surface."""
    return mesh_to_cad_rms(x.mesh.vertices, candidate_world_mesh(cad_mesh, rotation_index, transform))


def align_shortlist(x: SceneEntity, shortlist: Sequence[MatchCandidate], db: CadDatabase,
                    support: SurfacePlane | None, weights: ResidualWeights = ResidualWeights(),
                    lm: LMParams = LMParams()) -> list[AlignmentResult]:
    """Optimize every shortlisted candidate and rank by alignment error."""
    if not shortlist:
        raise ValueError("shortlist is empty")
    results = []
    for cand in shortlist:
        feats = db.features(cand.model_id)[cand.rotation_index]
        res = optimize(x, cand, feats, support, weights, lm)
        mesh = db.models[cand.model_id].union_mesh()
        res.alignment_error = alignment_error(x, mesh, res.transform, cand.rotation_index)
        results.append(res)
    results.sort(key=lambda r: (r.alignment_error, r.candidate.model_id, r.candidate.rotation_index))
    return results


def all_diverged(results: Sequence[AlignmentResult]) -> bool:
    return bool(results) and all(r.diverged for r in results)


def write_trace_csv(path, result: AlignmentResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lambda", "J"])
        for it, lam, cost in result.history:
            writer.writerow([it, repr(lam), repr(cost)])
