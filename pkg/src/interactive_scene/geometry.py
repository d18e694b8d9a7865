"""Geometric primitives shared by every stage of the pipeline.

World convention: +z is up, gravity is (0, 0, -1). Every box handled here is
gravity aligned, i.e. it may only rotate about the vertical axis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial import QhullError

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -1.0])
SIZE_FLOOR = 1e-6


class GeometryError(ValueError):
    """Raised for inputs that cannot be processed geometrically."""


class InvalidTransformError(GeometryError):
    pass


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"expected an (N, 3) array, got shape {arr.shape}")
    return arr


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped == -math.pi:
        wrapped = math.pi
    return wrapped


def check_gravity(gravity) -> np.ndarray:
    g = np.asarray(gravity, dtype=float)
    if g.shape != (3,) or abs(np.linalg.norm(g) - 1.0) > 1e-9:
        raise GeometryError("gravity must be a unit 3-vector")
    if not np.allclose(g, GRAVITY, atol=1e-6):
        raise GeometryError(
            "only gravity-aligned (z-up) scenes are supported; rotate the input so gravity is (0, 0, -1)"
        )
    return g


# ---------------------------------------------------------------------------
# Planes and transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurfacePlane:
    """Plane ``normal . v + offset = 0`` with a unit normal."""

    normal: tuple[float, float, float]
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if norm == 0.0 or not np.isfinite(norm):
            raise GeometryError("plane normal must be non-zero")
        if abs(norm - 1.0) > 1e-9:
            n = n / norm
            object.__setattr__(self, "offset", float(self.offset) / norm)
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_point_normal(cls, point, normal) -> "SurfacePlane":
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        return cls(tuple(n), -float(n @ np.asarray(point, dtype=float)))

    @property
    def n(self) -> np.ndarray:
        return np.array(self.normal)

    def as_vector(self) -> np.ndarray:
        return np.array([*self.normal, self.offset])

    def signed_distance(self, points) -> np.ndarray:
        return as_points(points) @ self.n + self.offset

    def is_supporting(self, a_th: float = -0.9, gravity=GRAVITY) -> bool:
        """Whether the plane faces against gravity closely enough to carry objects."""
        return float(self.n @ np.asarray(gravity, dtype=float)) <= a_th

    def height_at(self, x: float, y: float) -> float:
        """Height of the plane above (x, y); only meaningful for non-vertical planes."""
        nx, ny, nz = self.normal
        if abs(nz) < 1e-12:
            raise GeometryError("vertical plane has no height")
        return -(self.offset + nx * x + ny * y) / nz


@dataclass(frozen=True)
class SimTransform:
    """Similarity transform ``v -> scale * Rz(yaw) v + translation``."""

    scale: float = 1.0
    yaw: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @property
    def rotation(self) -> np.ndarray:
        return rot_z(self.yaw)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        return self.scale * pts @ self.rotation.T + self.t

    def compose(self, other: "SimTransform") -> "SimTransform":
        """Return ``self * other`` (apply ``other`` first)."""
        t = self.scale * self.rotation @ other.t + self.t
        return SimTransform(self.scale * other.scale, self.yaw + other.yaw, tuple(t))

    def inverse(self) -> "SimTransform":
        if self.scale <= 0:
            raise InvalidTransformError("scale must be positive")
        inv_rot = self.rotation.T
        t = -(inv_rot @ self.t) / self.scale
        return SimTransform(1.0 / self.scale, -self.yaw, tuple(t))


IDENTITY = SimTransform()


def transform_plane(plane: SurfacePlane, transform: SimTransform) -> SurfacePlane:
    """Map a plane through a similarity transform (``pi' = T^-T pi``)."""
    if not transform.scale > 0:
        raise InvalidTransformError(f"transform scale must be positive, got {transform.scale}")
    if transform == IDENTITY:
        return plane
    rot = transform.rotation
    n = rot @ plane.n
    # T^-T pi, divided through by 1/scale so the normal stays unit length.
    d = transform.scale * plane.offset - float(transform.t @ n)
    return SurfacePlane(tuple(n), d)


def transform_plane_matrix(plane: SurfacePlane, matrix: np.ndarray) -> SurfacePlane:
    """Map a plane through an arbitrary invertible 4x4 homogeneous transform."""
    pi = np.linalg.inv(np.asarray(matrix, dtype=float)).T @ plane.as_vector()
    return SurfacePlane(tuple(pi[:3]), pi[3])


# ---------------------------------------------------------------------------
# Boxes and meshes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrientedBox:
    """Gravity-aligned box: centre, yaw about +z and full extents."""

    position: tuple[float, float, float]
    yaw: float
    size: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        if min(self.size) <= 0:
            raise GeometryError(f"box size must be strictly positive, got {self.size}")

    @property
    def center(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def extents(self) -> np.ndarray:
        return np.array(self.size)

    @property
    def rotation(self) -> np.ndarray:
        return rot_z(self.yaw)

    @property
    def bottom(self) -> float:
        return self.position[2] - self.size[2] / 2.0

    @property
    def top(self) -> float:
        return self.position[2] + self.size[2] / 2.0

    @property
    def footprint_area(self) -> float:
        return self.size[0] * self.size[1]

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def footprint(self) -> np.ndarray:
        """Counter-clockwise footprint corners, shape (4, 2)."""
        hx, hy = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.position[:2])

    def corners(self) -> np.ndarray:
        fp = self.footprint()
        lo = np.column_stack([fp, np.full(4, self.bottom)])
        hi = np.column_stack([fp, np.full(4, self.top)])
        return np.vstack([lo, hi])

    def to_local(self, points) -> np.ndarray:
        return (as_points(points) - self.center) @ self.rotation

    def contains(self, points, eps: float = 1e-9) -> np.ndarray:
        local = self.to_local(points)
        return np.all(np.abs(local) <= self.extents / 2.0 + eps, axis=1)

    def with_vertical(self, bottom: float, top: float) -> "OrientedBox":
        height = top - bottom
        return OrientedBox(
            (self.position[0], self.position[1], (bottom + top) / 2.0), self.yaw,
            (self.size[0], self.size[1], height),
        )


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise GeometryError("triangle index out of range")

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(
            self.triangles, other.triangles
        )

    def __len__(self):
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def triangle_corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def face_areas(self) -> np.ndarray:
        tri = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        tri = self.triangle_corners()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def cleaned(self, area_eps: float = 1e-14) -> "TriangleMesh":
        """Drop zero-area triangles and unreferenced vertices."""
        if not len(self.triangles):
            return TriangleMesh(self.vertices.copy(), self.triangles.copy())
        keep = self.face_areas() > area_eps
        tris = self.triangles[keep]
        used = np.unique(tris)
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[tris])

    def transformed(self, transform: SimTransform) -> "TriangleMesh":
        return TriangleMesh(transform.apply(self.vertices) if len(self.vertices) else self.vertices,
                            self.triangles.copy())

    def rotated(self, rotation: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices @ np.asarray(rotation).T, self.triangles.copy())

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=float), self.triangles.copy())

    def sample_surface(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the surface."""
        return self.sample_surface_with_normals(count, rng)[0]

    def sample_surface_with_normals(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Surface samples together with the normal of the face each one lies on."""
        if count <= 0 or not len(self.triangles):
            return np.zeros((0, 3)), np.zeros((0, 3))
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            return np.zeros((0, 3)), np.zeros((0, 3))
        faces = rng.choice(len(areas), size=count, p=areas / total)
        u = rng.random((count, 2))
        flip = u.sum(axis=1) > 1.0
        u[flip] = 1.0 - u[flip]
        tri = self.triangle_corners()[faces]
        pts = tri[:, 0] + u[:, :1] * (tri[:, 1] - tri[:, 0]) + u[:, 1:] * (tri[:, 2] - tri[:, 0])
        return pts, self.face_normals()[faces]

    def edge_use_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(min(a, b)), int(max(a, b)))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        if not len(self.triangles):
            return False
        return all(c == 2 for c in self.edge_use_counts().values())

    def connected_components(self) -> list["TriangleMesh"]:
        """Split into vertex-connected components (ordered by first triangle)."""
        if not len(self.triangles):
            return [self] if len(self.vertices) else []
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        t = self.triangles
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        n = len(self.vertices)
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        tri_labels = labels[t[:, 0]]
        order = list(dict.fromkeys(tri_labels.tolist()))
        parts = []
        for lab in order:
            sub = TriangleMesh(self.vertices, t[tri_labels == lab]).cleaned(area_eps=-1.0)
            parts.append(sub)
        return parts

    @staticmethod
    def concatenate(meshes: list["TriangleMesh"]) -> "TriangleMesh":
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += len(m.vertices)
        if not verts:
            return TriangleMesh(np.zeros((0, 3)))
        return TriangleMesh(np.vstack(verts), np.vstack(tris))


def box_mesh(size, center=(0.0, 0.0, 0.0), subdivisions: int = 1) -> TriangleMesh:
    """Closed axis-aligned box mesh with each face split into a grid."""
    size = np.asarray(size, dtype=float)
    center = np.asarray(center, dtype=float)
    n = max(1, int(subdivisions))
    grid = np.linspace(-0.5, 0.5, n + 1)
    verts: list[np.ndarray] = []
    tris: list[np.ndarray] = []
    # (normal axis, sign, u axis, v axis) with u x v = sign * normal for outward winding.
    faces = [(0, 1, 1, 2), (0, -1, 2, 1), (1, 1, 2, 0), (1, -1, 0, 2), (2, 1, 0, 1), (2, -1, 1, 0)]
    for axis, sign, ua, va in faces:
        uu, vv = np.meshgrid(grid, grid, indexing="ij")
        pts = np.zeros((n + 1, n + 1, 3))
        pts[..., axis] = 0.5 * sign
        pts[..., ua] = uu
        pts[..., va] = vv
        base = sum(len(v) for v in verts)
        verts.append(pts.reshape(-1, 3))
        idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1) + base
        a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
        tris.append(np.stack([a, b, c], axis=-1).reshape(-1, 3))
        tris.append(np.stack([a, c, d], axis=-1).reshape(-1, 3))
    vertices = np.vstack(verts)
    triangles = np.vstack(tris)
    # weld duplicated edge vertices so the box is watertight
    keys = np.round(vertices * (4 * n), 6)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    vertices = vertices[first] * size + center
    return TriangleMesh(vertices, inverse[triangles])


def quad_mesh(corners) -> TriangleMesh:
    corners = as_points(corners)
    return TriangleMesh(corners, np.array([[0, 1, 2], [0, 2, 3]]))


# ---------------------------------------------------------------------------
# Plane extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlaneExtractParams:
    inlier_tol: float = 0.01
    min_inliers: int | None = None
    max_planes: int = 8
    iterations: int = 500
    seed: int = 0
    # Area-weighted surface samples; coarse CAD meshes have too few vertices otherwise.
    # The count follows surface area so scans and CADs of one object see the same faces.
    surface_samples: int = 2000
    samples_per_m2: float = 3000.0
    max_samples: int = 12000
    # Oriented samples must agree with the plane normal to count as inliers.
    normal_cos: float = 0.95

    def min_inliers_for(self, n_points: int) -> int:
        if self.min_inliers is not None:
            return int(self.min_inliers)
        return max(50, int(math.ceil(0.01 * n_points)))


def _fit_plane_lsq(points: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    n = vt[-1]
    return n, -float(n @ centroid)


def _orient_normal(n: np.ndarray, d: float, centroid: np.ndarray, tol: float) -> tuple[np.ndarray, float]:
    side = float(n @ centroid + d)
    if abs(side) > tol:
        flip = side > 0  # centroid must end up behind the plane
    else:
        # centroid on the plane (flat layouts): prefer up, then the first non-zero axis
        comp = n[2] if abs(n[2]) > 1e-9 else (n[0] if abs(n[0]) > 1e-9 else n[1])
        flip = comp < 0
    return (-n, -d) if flip else (n, d)


def extract_planes_from_points(points, params: PlaneExtractParams = PlaneExtractParams(),
                               centroid=None, normals=None) -> list[SurfacePlane]:
    """Sequential RANSAC: fit the dominant plane, drop its inliers, repeat.

    With per-point ``normals`` a point is an inlier only when its normal is
    within ``params.normal_cos`` of the plane normal (either sign).
    """
    pts = as_points(points)
    nrm = None if normals is None else np.asarray(normals, dtype=float).reshape(-1, 3)
    if nrm is not None and len(nrm) != len(pts):
        raise ValueError("normals must match points")
    min_inliers = params.min_inliers_for(len(pts))
    if len(pts) < max(3, min_inliers):
        return []
    centroid = pts.mean(axis=0) if centroid is None else np.asarray(centroid, dtype=float)
    rng = np.random.default_rng(params.seed)
    remaining = pts
    rem_n = nrm
    found: list[tuple[int, int, SurfacePlane]] = []
    tol = params.inlier_tol

    def band(n, d, width):
        mask = np.abs(remaining @ n + d) <= width
        if rem_n is not None:
            mask &= np.abs(rem_n @ n) >= params.normal_cos
        return mask
    while len(found) < params.max_planes and len(remaining) >= min_inliers:
        m = len(remaining)
        if rem_n is not None:
            # oriented samples: one point and its normal define a hypothesis
            pick = rng.integers(0, m, size=params.iterations)
            normals, p0 = rem_n[pick], remaining[pick]
        else:
            samples = rng.integers(0, m, size=(params.iterations, 3))
            p0, p1, p2 = remaining[samples[:, 0]], remaining[samples[:, 1]], remaining[samples[:, 2]]
            normals = np.cross(p1 - p0, p2 - p0)
            norms = np.linalg.norm(normals, axis=1)
            valid = norms > 1e-12
            if not valid.any():
                break
            normals, p0 = normals[valid] / norms[valid, None], p0[valid]
        offsets = -np.einsum("ij,ij->i", normals, p0)
        best_count, best = -1, None
        chunk = max(1, int(4_000_000 // max(m, 1)))
        for start in range(0, len(normals), chunk):
            dist = np.abs(remaining @ normals[start:start + chunk].T + offsets[start:start + chunk])
            ok = dist <= tol
            if rem_n is not None:
                ok &= np.abs(rem_n @ normals[start:start + chunk].T) >= params.normal_cos
            counts = ok.sum(axis=0)
            k = int(np.argmax(counts))
            if counts[k] > best_count:
                best_count, best = int(counts[k]), start + k
        if best_count < min_inliers:
            break
        n, d = normals[best], offsets[best]
        mask = band(n, d, tol)
        if mask.sum() < 3:
            break
        n, d = _fit_plane_lsq(remaining[mask])
        # points of adjacent faces inside the band tilt the fit; refit on tighter bands
        for shrink in (4.0, 20.0):
            tight = band(n, d, tol / shrink)
            if tight.sum() >= 3:
                n, d = _fit_plane_lsq(remaining[tight])
        inliers = band(n, d, tol)
        count = int(inliers.sum())
        if count < min_inliers:
            break
        n, d = _orient_normal(n, d, centroid, tol)
        found.append((count, len(found), SurfacePlane(tuple(n), d)))
        remaining = remaining[~inliers]
        if rem_n is not None:
            rem_n = rem_n[~inliers]
    found.sort(key=lambda item: (-item[0], item[1]))
    return [plane for _, _, plane in found]


def plane_support_points(mesh: TriangleMesh, params: PlaneExtractParams) -> tuple[np.ndarray, np.ndarray | None]:
    """The oriented point set plane extraction runs on.

    Seeded surface samples with their face normals; bare vertices when the
    mesh has no faces or sampling is disabled.
    """
    if params.surface_samples > 0 and len(mesh.triangles):
        rng = np.random.default_rng(params.seed + 7919)
        count = min(params.max_samples, max(params.surface_samples,
                                            int(params.samples_per_m2 * mesh.face_areas().sum())))
        return mesh.sample_surface_with_normals(count, rng)
    return mesh.vertices, None


def extract_planes(mesh: TriangleMesh, params: PlaneExtractParams = PlaneExtractParams()) -> list[SurfacePlane]:
    """Extract up to ``max_planes`` planes, ordered by inlier count.

    Normals point away from the mesh centroid; planes through the centroid
    (flat meshes) prefer an upward normal.
    """
    if mesh.is_empty:
        return []
    pts, normals = plane_support_points(mesh, params)
    return extract_planes_from_points(pts, params, centroid=mesh.vertices.mean(axis=0), normals=normals)


# ---------------------------------------------------------------------------
# Oriented boxes
# ---------------------------------------------------------------------------


def _min_area_rectangle(xy: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Rotating calipers over the convex hull; returns (yaw, centre_xy, extents_xy)."""
    uniq = np.unique(np.round(xy, 12), axis=0)
    hull_pts = None
    if len(uniq) >= 3:
        try:
            hull = ConvexHull(uniq)
            hull_pts = uniq[hull.vertices]
        except QhullError:
            hull_pts = None
    if hull_pts is None:
        # collinear or single point
        centroid = uniq.mean(axis=0)
        if len(uniq) >= 2:
            _, _, vt = np.linalg.svd(uniq - centroid)
            direction = vt[0]
            yaw = math.atan2(direction[1], direction[0])
        else:
            yaw = 0.0
        yaw = yaw % (math.pi / 2.0)
        rot = np.array([[math.cos(yaw), -math.sin(yaw)], [math.sin(yaw), math.cos(yaw)]])
        local = uniq @ rot
        lo, hi = local.min(axis=0), local.max(axis=0)
        return yaw, rot @ ((lo + hi) / 2.0), hi - lo

    edges = np.roll(hull_pts, -1, axis=0) - hull_pts
    angles = np.arctan2(edges[:, 1], edges[:, 0]) % (math.pi / 2.0)
    angles = np.unique(np.round(angles, 14))
    best = None
    for ang in angles:
        c, s = math.cos(ang), math.sin(ang)
        rot = np.array([[c, -s], [s, c]])
        local = hull_pts @ rot
        lo, hi = local.min(axis=0), local.max(axis=0)
        area = float(np.prod(hi - lo))
        if best is None or area < best[0] * (1.0 - 1e-12):
            best = (area, float(ang), rot, lo, hi)
    _, yaw, rot, lo, hi = best
    return yaw, rot @ ((lo + hi) / 2.0), hi - lo


def fit_oriented_box(mesh_or_points, gravity=GRAVITY) -> OrientedBox:
    """Minimum-footprint gravity-aligned box enclosing every vertex.

    Yaw is reported in [0, pi/2); degenerate extents are floored at 1e-6 m.
    """
    check_gravity(gravity)
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriangleMesh) else as_points(mesh_or_points)
    if len(pts) == 0:
        raise GeometryError("cannot fit a box to an empty mesh")
    yaw, center_xy, ext_xy = _min_area_rectangle(pts[:, :2])
    zlo, zhi = float(pts[:, 2].min()), float(pts[:, 2].max())
    size = np.maximum([ext_xy[0], ext_xy[1], zhi - zlo], SIZE_FLOOR)
    return OrientedBox((center_xy[0], center_xy[1], (zlo + zhi) / 2.0), yaw, tuple(size))


# ---------------------------------------------------------------------------
# Overlaps
# ---------------------------------------------------------------------------


def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _ccw(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    signed = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return poly[::-1] if signed < 0 else poly


def clip_convex_polygon(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex polygon ``clip``."""
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = _ccw(np.asarray(clip, dtype=float))
    if len(clip) < 3:
        return np.zeros((0, 2))
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i - 1]
        bx, by = clip[i]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        s = inp[-1]
        s_side = side(s)
        for e in inp:
            e_side = side(e)
            if e_side >= 0:
                if s_side < 0:
                    t = s_side / (s_side - e_side)
                    out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
                out.append(e)
            elif s_side >= 0:
                if s_side > 0:
                    t = s_side / (s_side - e_side)
                    out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
            s, s_side = e, e_side
    return np.array(out, dtype=float).reshape(-1, 2)


def footprint_overlap_area(a: OrientedBox, b: OrientedBox) -> float:
    """Area shared by the ground-plane rectangles of two boxes."""
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(a.position[0] - b.position[0], a.position[1] - b.position[1]) >= ra + rb:
        return 0.0
    # clip the box with the smaller footprint by the other so the result is symmetric in value
    if (a.footprint_area, a.position, a.yaw) > (b.footprint_area, b.position, b.yaw):
        a, b = b, a
    area = polygon_area(clip_convex_polygon(a.footprint(), b.footprint()))
    return min(area, a.footprint_area, b.footprint_area)


def vertical_overlap(a: OrientedBox, b: OrientedBox) -> float:
    return max(0.0, min(a.top, b.top) - max(a.bottom, b.bottom))


def boxes_overlap_volume(a: OrientedBox, b: OrientedBox) -> float:
    dz = vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    return footprint_overlap_area(a, b) * dz


def box_iou(a: OrientedBox, b: OrientedBox) -> float:
    inter = boxes_overlap_volume(a, b)
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# Convex penetration (separating axis test)
# ---------------------------------------------------------------------------


def _unique_directions(vectors: np.ndarray, decimals: int = 9) -> np.ndarray:
    if not len(vectors):
        return np.zeros((0, 3))
    norms = np.linalg.norm(vectors, axis=1)
    v = vectors[norms > 1e-12] / norms[norms > 1e-12, None]
    if not len(v):
        return np.zeros((0, 3))
    # canonical sign: first significant component positive
    idx = np.argmax(np.abs(v) > 1e-9, axis=1)
    sign = np.sign(v[np.arange(len(v)), idx])
    v = v * sign[:, None]
    _, keep = np.unique(np.round(v, decimals), axis=0, return_index=True)
    return v[np.sort(keep)]


@dataclass
class ConvexPolytope:
    """Convex hull reduced to what the separating-axis test needs."""

    vertices: np.ndarray
    face_normals: np.ndarray
    edge_dirs: np.ndarray

    @classmethod
    def from_points(cls, points) -> "ConvexPolytope":
        pts = np.unique(np.round(as_points(points), 12), axis=0)
        if len(pts) == 0:
            raise GeometryError("empty point set")
        centroid = pts.mean(axis=0)
        _, sv, vt = np.linalg.svd(pts - centroid, full_matrices=False)
        scale = max(float(sv[0]) if len(sv) else 0.0, 1e-12)
        rank = int(np.sum(sv > 1e-9 * scale)) if len(sv) else 0
        if rank >= 3:
            try:
                hull = ConvexHull(pts)
            except QhullError:
                rank = 2
            else:
                verts = pts[hull.vertices]
                normals = _unique_directions(hull.equations[:, :3])
                simp = hull.simplices
                e = np.vstack([pts[simp[:, 1]] - pts[simp[:, 0]], pts[simp[:, 2]] - pts[simp[:, 1]],
                               pts[simp[:, 0]] - pts[simp[:, 2]]])
                return cls(verts, normals, _unique_directions(e))
        if rank == 2:
            n = vt[2]
            u, v = vt[0], vt[1]
            uv = (pts - centroid) @ np.column_stack([u, v])
            try:
                hull2 = ConvexHull(uv)
                ring = pts[hull2.vertices]
            except QhullError:
                ring = pts
            e = np.roll(ring, -1, axis=0) - ring
            side = np.cross(e, n)
            return cls(ring, _unique_directions(np.vstack([n[None, :], side])), _unique_directions(e))
        # segment or point
        d = vt[0] if len(pts) > 1 else np.array([1.0, 0.0, 0.0])
        perp = np.cross(d, [0.0, 0.0, 1.0])
        if np.linalg.norm(perp) < 1e-9:
            perp = np.cross(d, [1.0, 0.0, 0.0])
        perp2 = np.cross(d, perp)
        return cls(pts, _unique_directions(np.vstack([perp, perp2])), _unique_directions(d[None, :]))

    def transformed(self, rotation: np.ndarray, scale: float = 1.0, translation=(0.0, 0.0, 0.0)) -> "ConvexPolytope":
        rot = np.asarray(rotation, dtype=float)
        return ConvexPolytope(scale * self.vertices @ rot.T + np.asarray(translation, dtype=float),
                              self.face_normals @ rot.T, self.edge_dirs @ rot.T)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def penetration_depth(a: ConvexPolytope, b: ConvexPolytope) -> float:
    """Minimum translation distance separating two convex polytopes (0 if apart or touching)."""
    alo, ahi = a.aabb()
    blo, bhi = b.aabb()
    if np.any(np.minimum(ahi, bhi) - np.maximum(alo, blo) <= 0.0):
        return 0.0
    cross = np.cross(a.edge_dirs[:, None, :], b.edge_dirs[None, :, :]).reshape(-1, 3)
    axes = np.vstack([a.face_normals, b.face_normals, np.eye(3), cross])
    norms = np.linalg.norm(axes, axis=1)
    axes = axes[norms > 1e-9] / norms[norms > 1e-9, None]
    pa = a.vertices @ axes.T
    pb = b.vertices @ axes.T
    overlap = np.minimum(pa.max(axis=0), pb.max(axis=0)) - np.maximum(pa.min(axis=0), pb.min(axis=0))
    depth = float(overlap.min())
    return depth if depth > 0.0 else 0.0


def mesh_polytopes(mesh: TriangleMesh) -> list[ConvexPolytope]:
    """Collision primitives for a mesh: one hull per closed component, else one hull overall."""
    if mesh.is_empty:
        return []
    comps = mesh.connected_components() if len(mesh.triangles) else []
    if comps and all(c.is_watertight() for c in comps):
        return [ConvexPolytope.from_points(c.vertices) for c in comps]
    if len(mesh.triangles):
        logger.warning("mesh is not watertight; falling back to its convex hull for collision")
    return [ConvexPolytope.from_points(mesh.vertices)]


def polytopes_penetration(a: list[ConvexPolytope], b: list[ConvexPolytope]) -> float:
    depth = 0.0
    for pa in a:
        for pb in b:
            depth = max(depth, penetration_depth(pa, pb))
    return depth


def meshes_penetrate(a: TriangleMesh, b: TriangleMesh, tol: float = 0.01) -> bool:
    """True when the meshes' solids overlap by more than ``tol``; touching is not penetration."""
    return polytopes_penetration(mesh_polytopes(a), mesh_polytopes(b)) > tol


# ---------------------------------------------------------------------------
# Point-to-mesh distances
# ---------------------------------------------------------------------------


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Row-wise closest point on triangle (a, b, c) to p (Ericson, Real-Time Collision Detection 5.1.5)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, axis=1)
    d2 = np.sum(ac * ap, axis=1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=1)
    d4 = np.sum(ac * bp, axis=1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=1)
    d6 = np.sum(ac * cp, axis=1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        v_ab = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w_ac = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w_bc[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_triangle_sq_distances(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Squared distance of ``points[i]`` to triangle ``tri[i]`` (row-wise)."""
    q = closest_points_on_triangles(points, tri[:, 0], tri[:, 1], tri[:, 2])
    diff = points - q
    return np.sum(diff * diff, axis=1)


def brute_force_sq_distances(points, mesh: TriangleMesh) -> np.ndarray:
    """Per-point squared distance to the mesh surface by scanning every triangle."""
    pts = as_points(points)
    tri = mesh.triangle_corners()
    best = np.full(len(pts), np.inf)
    for t in range(len(tri)):
        rep = np.repeat(tri[t][None], len(pts), axis=0)
        best = np.minimum(best, point_triangle_sq_distances(pts, rep))
    return best


class TriangleIndex:
    """KD-tree over triangle centroids answering exact closest-surface queries."""

    def __init__(self, mesh: TriangleMesh):
        if not len(mesh.triangles):
            raise GeometryError("mesh has no triangles")
        self.tri = mesh.triangle_corners()
        self.centroids = self.tri.mean(axis=1)
        self.radius = float(np.max(np.linalg.norm(self.tri - self.centroids[:, None, :], axis=2)))
        self.tree = cKDTree(self.centroids)

    def sq_distances(self, points) -> np.ndarray:
        pts = as_points(points)
        _, nearest = self.tree.query(pts)
        upper = point_triangle_sq_distances(pts, self.tri[nearest])
        best = upper.copy()
        cand = self.tree.query_ball_point(pts, np.sqrt(upper) + self.radius + 1e-12)
        lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(pts))
        if lens.sum() == 0:
            return best
        qi = np.repeat(np.arange(len(pts)), lens)
        ti = np.fromiter((t for c in cand for t in c), dtype=np.int64, count=int(lens.sum()))
        d = point_triangle_sq_distances(pts[qi], self.tri[ti])
        np.minimum.at(best, qi, d)
        return best


def mesh_to_cad_rms(vertices, cad: TriangleMesh) -> float:
    """RMS distance from each vertex to its closest point on the CAD surface."""
    pts = as_points(vertices)
    if not len(pts):
        raise GeometryError("need at least one vertex")
    sq = TriangleIndex(cad).sq_distances(pts)
    return float(np.sqrt(np.mean(sq)))


# ---------------------------------------------------------------------------
# Rotation helpers (URDF uses fixed-axis roll/pitch/yaw)
# ---------------------------------------------------------------------------


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def matrix_rpy(rot: np.ndarray) -> tuple[float, float, float]:
    rot = np.asarray(rot, dtype=float)
    pitch = math.asin(max(-1.0, min(1.0, -rot[2, 0])))
    if abs(rot[2, 0]) < 1.0 - 1e-12:
        roll = math.atan2(rot[2, 1], rot[2, 2])
        yaw = math.atan2(rot[1, 0], rot[0, 0])
    else:
        # gimbal lock: fold everything into yaw
        roll = 0.0
        yaw = math.atan2(-rot[0, 1], rot[1, 1])
    return roll, pitch, yaw


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx


def rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    if np.linalg.norm(v) < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return axis_angle_matrix(perp, math.pi)
    return axis_angle_matrix(v, math.atan2(np.linalg.norm(v), c))
