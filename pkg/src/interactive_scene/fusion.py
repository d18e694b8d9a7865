"""Label bookkeeping for fusing per-frame panoptic/geometric segments into scene entities."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

from .contact_graph import EntityKind, SceneEntity
from .geometry import PlaneExtractParams, TriangleMesh, as_points, extract_planes, fit_oriented_box
from .meshio import read_ply, write_ply

logger = logging.getLogger(__name__)

UNKNOWN_CLASS = "unknown"


@dataclass
class FrameSegment:
    """Labelled point segment of one frame.

    ``indices`` (optional) address points of a shared frame cloud and are
    what overlap is measured on when two segment lists are fused.
    """

    points: np.ndarray
    geometric_label: int | None = None
    semantic_class: str = UNKNOWN_CLASS
    instance_label: int | None = None
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.points = as_points(self.points)
        if len(self.points) == 0:
            raise ValueError("segment has no points")
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=np.int64)
            if len(self.indices) != len(self.points):
                raise ValueError("indices and points differ in length")

    def subset(self, mask: np.ndarray, **labels) -> "FrameSegment":
        fields = {"geometric_label": self.geometric_label, "semantic_class": self.semantic_class,
                  "instance_label": self.instance_label}
        fields.update(labels)
        return FrameSegment(self.points[mask], indices=None if self.indices is None else self.indices[mask],
                            **fields)


@dataclass(frozen=True)
class FusionParams:
    split_ratio: float = 0.3
    voxel_size: float = 0.02
    voxel_share_ratio: float = 0.3
    duration_threshold: int = 5
    outlier_radius: float = 0.05
    point_voxel: float | None = 0.005
    min_points: int = 50
    layout_classes: tuple[str, ...] = ("floor", "wall", "ceiling")
    mesh_method: str = "alpha"  # alpha | hull | points
    alpha_factor: float = 3.0


# ---------------------------------------------------------------------------
# Per-frame fusion
# ---------------------------------------------------------------------------


def _point_keys(seg: FrameSegment) -> list:
    if seg.indices is not None:
        return seg.indices.tolist()
    # identical coordinates identify the same frame point
    return [row.tobytes() for row in np.ascontiguousarray(seg.points)]


def bilateral_fuse(panoptic: list[FrameSegment], geometric: list[FrameSegment],
                   split_ratio: float = 0.3, next_label: int | None = None) -> list[FrameSegment]:
    """Give each geometric segment the (class, instance) of the mask it overlaps most.

    A geometric segment covered at least ``split_ratio`` by two or more masks
    is split between them; extra pieces get fresh geometric labels.
    Segments touching no mask keep class ``unknown`` and no instance.
    """
    if next_label is None:
        labels = [g.geometric_label for g in geometric if g.geometric_label is not None]
        next_label = (max(labels) + 1) if labels else 0
    mask_keys = [set(_point_keys(p)) for p in panoptic]
    out: list[FrameSegment] = []
    for g in geometric:
        key_list = _point_keys(g)
        membership = np.full(len(g.points), -1, dtype=np.int64)
        counts = np.zeros(len(panoptic), dtype=np.int64)
        for mi, mk in enumerate(mask_keys):
            hit = np.fromiter((k in mk for k in key_list), dtype=bool, count=len(key_list))
            counts[mi] = int(hit.sum())
            # first mask wins for points claimed twice
            membership[hit & (membership < 0)] = mi
        label = g.geometric_label
        if label is None:
            label = next_label
            next_label += 1
        if counts.sum() == 0:
            out.append(g.subset(np.ones(len(g.points), bool), geometric_label=label,
                                semantic_class=UNKNOWN_CLASS, instance_label=None))
            continue
        strong = [int(i) for i in np.argsort(-counts, kind="stable") if counts[i] >= split_ratio * len(g.points)]
        if len(strong) < 2:
            best = int(np.argmax(counts))
            m = panoptic[best]
            out.append(g.subset(np.ones(len(g.points), bool), geometric_label=label,
                                semantic_class=m.semantic_class, instance_label=m.instance_label))
            continue
        # split: points go to their strong mask; the rest join the dominant one
        owner = np.where(np.isin(membership, strong), membership, strong[0])
        for rank, mi in enumerate(strong):
            sel = owner == mi
            if not sel.any():
                continue
            piece_label = label if rank == 0 else next_label
            if rank:
                next_label += 1
            m = panoptic[mi]
            out.append(g.subset(sel, geometric_label=piece_label, semantic_class=m.semantic_class,
                                instance_label=m.instance_label))
    return out


def _voxel_keys(points: np.ndarray, cell: float) -> np.ndarray:
    return np.floor(points / cell).astype(np.int64)


def _encode_keys(keys: np.ndarray) -> np.ndarray:
    """Pack integer voxel coordinates (|k| < 2**20) into one int64 each."""
    k = keys.astype(np.int64) + (1 << 20)
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]


def voxel_components(points: np.ndarray, cell: float) -> np.ndarray:
    """Component id per point: voxels of size ``cell`` joined through their 26-neighbourhood."""
    keys = _voxel_keys(points, cell)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    index = {tuple(k): i for i, k in enumerate(uniq.tolist())}
    parent = list(range(len(uniq)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1) if (dx, dy, dz) > (0, 0, 0)]
    for i, (x, y, z) in enumerate(uniq.tolist()):
        for dx, dy, dz in offsets:
            j = index.get((x + dx, y + dy, z + dz))
            if j is not None:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(uniq))])
    _, comp = np.unique(roots, return_inverse=True)
    return comp.ravel()[inverse]


def remove_outliers(segment: FrameSegment, radius: float) -> tuple[FrameSegment, np.ndarray]:
    """Keep the largest voxel-connected component; return the rest as background points.

    Equal-size components are resolved in favour of the one whose centroid is
    nearest the segment centroid.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    comp = voxel_components(segment.points, radius)
    n_comp = int(comp.max()) + 1
    if n_comp == 1:
        return segment, np.empty((0, 3))
    sizes = np.bincount(comp, minlength=n_comp)
    centroid = segment.points.mean(axis=0)
    best, best_key = 0, None
    for c in range(n_comp):
        dist = float(np.linalg.norm(segment.points[comp == c].mean(axis=0) - centroid))
        key = (-int(sizes[c]), dist, c)
        if best_key is None or key < best_key:
            best, best_key = c, key
    keep = comp == best
    return segment.subset(keep), segment.points[~keep]


# ---------------------------------------------------------------------------
# Accumulation across frames
# ---------------------------------------------------------------------------


class TripletCount:
    """Phi(l, c, o): how often geometric label l was seen with class c and instance o."""

    def __init__(self):
        self.counts: Counter = Counter()
        self.events = 0

    def add(self, l, c, o, n: int = 1):
        self.counts[(l, c, o)] += n
        self.events += n

    def total(self) -> int:
        return sum(self.counts.values())

    def relabel(self, mapping_l=None, mapping_o=None):
        """Rename labels; counts of triples that collide are summed."""
        fresh: Counter = Counter()
        for (l, c, o), n in self.counts.items():
            l2 = mapping_l.get(l, l) if mapping_l else l
            o2 = mapping_o.get(o, o) if mapping_o and o is not None else o
            fresh[(l2, c, o2)] += n
        self.counts = fresh


@dataclass
class _Streak:
    last: int = -2
    run: int = 0
    best: int = 0


@dataclass
class FusedSegmentStore:
    params: FusionParams = field(default_factory=FusionParams)
    points: dict[int, np.ndarray] = field(default_factory=dict)
    background: list[np.ndarray] = field(default_factory=list)
    streaks: dict[tuple[int, int], _Streak] = field(default_factory=dict)  # (l, o) -> observation streak
    frames: int = 0

    _occupied: dict[int, set] = field(default_factory=dict, repr=False)

    def add_points(self, label: int, pts: np.ndarray):
        cur = self.points.get(label)
        cell = self.params.point_voxel
        if cell:
            # one stored point per small voxel keeps the store bounded over long streams
            seen = self._occupied.setdefault(label, set())
            keep = np.zeros(len(pts), dtype=bool)
            for i, key in enumerate(_encode_keys(_voxel_keys(pts, cell)).tolist()):
                if key not in seen:
                    seen.add(key)
                    keep[i] = True
            pts = pts[keep]
        self.points[label] = pts if cur is None else np.vstack([cur, pts])

    def pop_label(self, label: int) -> np.ndarray:
        self._occupied.pop(label, None)
        return self.points.pop(label)

    def observe(self, label: int, instance: int, frame: int):
        s = self.streaks.setdefault((label, instance), _Streak())
        if s.last == frame:
            return
        s.run = s.run + 1 if s.last == frame - 1 else 1
        s.last = frame
        s.best = max(s.best, s.run)

    def association_duration(self, o1: int, o2: int) -> int:
        """Frames both instances were steadily tied to one common geometric label."""
        best = 0
        for (l, o), s in self.streaks.items():
            if o == o1:
                other = self.streaks.get((l, o2))
                if other is not None:
                    best = max(best, min(s.best, other.best))
        return best


def fuse_frame(store: FusedSegmentStore, counts: TripletCount, frame: list[FrameSegment]) -> None:
    """Accumulate one frame of fully labelled segments."""
    idx = store.frames
    for seg in frame:
        if seg.geometric_label is None:
            raise ValueError("frame segments need a geometric label")
        counts.add(seg.geometric_label, seg.semantic_class, seg.instance_label)
        store.add_points(seg.geometric_label, seg.points)
        if seg.instance_label is not None:
            store.observe(seg.geometric_label, seg.instance_label, idx)
    store.frames += 1


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, i):
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        lo, hi = (ra, rb) if ra < rb else (rb, ra)
        self.parent[hi] = lo
        return True


def _geometric_merge_map(store: FusedSegmentStore, voxel: float, ratio: float,
                         owners: dict[int, int | None] | None = None) -> dict[int, int]:
    """Union-find over labels sharing voxels, to a fixpoint.

    With ``owners`` given, groups whose labels belong to different instances
    stay apart: an object resting on another shares voxels with it but is
    not a fragment of it.
    """
    labels = sorted(store.points)
    voxels = {l: {tuple(k) for k in np.unique(_voxel_keys(store.points[l], voxel), axis=0).tolist()}
              for l in labels}
    owners = owners or {}
    uf = _UnionFind(labels)
    changed = True
    while changed:
        changed = False
        groups: dict[int, set] = defaultdict(set)
        group_owners: dict[int, set] = defaultdict(set)
        for l in labels:
            groups[uf.find(l)] |= voxels[l]
            if owners.get(l) is not None:
                group_owners[uf.find(l)].add(owners[l])
        roots = sorted(groups)
        for i, a in enumerate(roots):
            for b in roots[i + 1:]:
                if len(group_owners[a] | group_owners[b]) > 1:
                    continue
                va, vb = groups[a], groups[b]
                shared = len(va & vb)
                if shared and shared >= ratio * min(len(va), len(vb)):
                    if uf.union(a, b):
                        changed = True
                        break
            if changed:
                break
    return {l: uf.find(l) for l in labels if uf.find(l) != l}


def merge_labels(store: FusedSegmentStore, counts: TripletCount, voxel_share_ratio: float = 0.3,
                 duration_threshold: int = 5) -> bool:
    """Merge overlapping geometric labels and steadily co-associated instances; True if anything changed."""
    if voxel_share_ratio <= 0 or duration_threshold <= 0:
        raise ValueError("merge thresholds must be positive")
    changed = False
    owners = {l: label_owner(counts, l) for l in store.points}
    gmap = _geometric_merge_map(store, store.params.voxel_size, voxel_share_ratio, owners)
    if gmap:
        changed = True
        for src in sorted(gmap):
            dst = gmap[src]
            store.add_points(dst, store.pop_label(src))
        merged: dict[tuple[int, int], _Streak] = {}
        for (l, o), s in sorted(store.streaks.items()):
            key = (gmap.get(l, l), o)
            cur = merged.get(key)
            merged[key] = s if cur is None else _Streak(max(cur.last, s.last), max(cur.run, s.run),
                                                         max(cur.best, s.best))
        store.streaks = merged
        counts.relabel(mapping_l=gmap)

    instances = sorted({o for (_, _, o) in counts.counts if o is not None})
    uf = _UnionFind(instances)
    for i, a in enumerate(instances):
        for b in instances[i + 1:]:
            if store.association_duration(a, b) > duration_threshold:
                uf.union(a, b)
    omap = {o: uf.find(o) for o in instances if uf.find(o) != o}
    if omap:
        changed = True
        counts.relabel(mapping_o=omap)
        merged = {}
        for (l, o), s in sorted(store.streaks.items()):
            key = (l, omap.get(o, o))
            cur = merged.get(key)
            merged[key] = s if cur is None else _Streak(max(cur.last, s.last), max(cur.run, s.run),
                                                         max(cur.best, s.best))
        store.streaks = merged
    return changed


def merge_until_fixpoint(store: FusedSegmentStore, counts: TripletCount, voxel_share_ratio: float = 0.3,
                         duration_threshold: int = 5, max_rounds: int = 100) -> int:
    rounds = 0
    while rounds < max_rounds and merge_labels(store, counts, voxel_share_ratio, duration_threshold):
        rounds += 1
    return rounds


def resolve_labels(counts: TripletCount, instance: int) -> str:
    """Semantic class of an instance: argmax over c of sum_l Phi(l, c, o); ties by name."""
    totals: Counter = Counter()
    for (l, c, o), n in counts.counts.items():
        if o == instance:
            totals[c] += n
    if not totals:
        raise KeyError(f"instance {instance} was never observed")
    return min(totals, key=lambda c: (-totals[c], c))


def label_owner(counts: TripletCount, label: int) -> int | None:
    """Instance a geometric label belongs to (most frequent; ties to the lower id)."""
    totals: Counter = Counter()
    for (l, c, o), n in counts.counts.items():
        if l == label and o is not None:
            totals[o] += n
    if not totals:
        return None
    return min(totals, key=lambda o: (-totals[o], o))


# ---------------------------------------------------------------------------
# Surface reconstruction and entity output
# ---------------------------------------------------------------------------


def _boundary_faces(tets: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Faces used by exactly one tetrahedron, wound so normals leave the solid."""
    faces = np.vstack([tets[:, [0, 1, 2]], tets[:, [0, 1, 3]], tets[:, [0, 2, 3]], tets[:, [1, 2, 3]]])
    apex = np.concatenate([tets[:, 3], tets[:, 2], tets[:, 1], tets[:, 0]])
    _, idx, cnt = np.unique(np.sort(faces, axis=1), axis=0, return_index=True, return_counts=True)
    keep = idx[cnt == 1]
    faces, apex = faces[keep], apex[keep]
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    inward = np.einsum("ij,ij->i", np.cross(v1 - v0, v2 - v0), vertices[apex] - v0) > 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return faces


def _compact(vertices: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    used, inverse = np.unique(faces, return_inverse=True)
    return TriangleMesh(vertices[used], inverse.reshape(-1, 3).astype(np.int64))


def median_spacing(points: np.ndarray) -> float:
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return float(np.median(d[:, 1]))


def alpha_shape(points, alpha: float) -> TriangleMesh | None:
    """Boundary of the Delaunay tetrahedra with circumradius below ``alpha``."""
    pts = as_points(points)
    try:
        tri = Delaunay(pts)
    except QhullError:
        return None
    tets = tri.simplices
    p = pts[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    num = (np.einsum("ij,ij->i", a, a)[:, None] * np.cross(b, c)
           + np.einsum("ij,ij->i", b, b)[:, None] * np.cross(c, a)
           + np.einsum("ij,ij->i", c, c)[:, None] * np.cross(a, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        radius = np.linalg.norm(num, axis=1) / np.abs(2.0 * det)
    keep = tets[np.isfinite(radius) & (radius < alpha)]
    if len(keep) == 0:
        return None
    return _compact(pts, _boundary_faces(keep, pts))


def planar_mesh(points) -> TriangleMesh | None:
    """2D Delaunay in the best-fit plane, for flat point sets such as floors and walls."""
    pts = as_points(points)
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    uv = (pts - centroid) @ vt[:2].T
    try:
        hull = ConvexHull(uv)
    except QhullError:
        return None
    ring = hull.vertices
    # the hull polygon is enough for a flat layout patch
    faces = np.array([[ring[0], ring[i], ring[i + 1]] for i in range(1, len(ring) - 1)], dtype=np.int64)
    mesh = _compact(pts, faces)
    n = np.cross(vt[0], vt[1])
    if n[2] < 0 or (abs(n[2]) < 1e-9 and float(n @ -centroid) < 0):
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[:, ::-1].copy())
    return mesh


def hull_mesh(points) -> TriangleMesh | None:
    pts = as_points(points)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return None
    faces = hull.simplices.copy()
    centroid = pts[hull.vertices].mean(axis=0)
    for i, (a, b, c) in enumerate(faces):
        n = np.cross(pts[b] - pts[a], pts[c] - pts[a])
        if float(n @ (pts[a] - centroid)) < 0:
            faces[i] = (a, c, b)
    return _compact(pts, faces)


def reconstruct_surface(points, method: str = "alpha", alpha_factor: float = 3.0) -> TriangleMesh:
    """Mesh a point set, degrading alpha shape -> convex hull -> flat patch -> raw points."""
    pts = as_points(points)
    _, sv, _ = np.linalg.svd(pts - pts.mean(axis=0), full_matrices=False)
    flat = len(sv) < 3 or sv[2] <= 1e-6 * max(sv[0], 1e-12)
    mesh = None
    if flat:
        mesh = planar_mesh(pts)
    elif method == "alpha":
        mesh = alpha_shape(pts, alpha_factor * median_spacing(pts))
        if mesh is not None and (len(mesh.triangles) < 4 or not mesh.is_watertight()):
            mesh = None
    if mesh is None and method in ("alpha", "hull") and not flat:
        mesh = hull_mesh(pts)
    if mesh is None:
        logger.warning("surface reconstruction failed; passing raw points through")
        mesh = TriangleMesh(pts, np.empty((0, 3), dtype=np.int64))
    return mesh


def finalize_entities(store: FusedSegmentStore, counts: TripletCount,
                      plane_params: PlaneExtractParams = PlaneExtractParams()) -> list[SceneEntity]:
    """One entity per instance label, with resolved class, mesh, box and planes."""
    params = store.params
    members: dict[int, list[int]] = defaultdict(list)
    for label in sorted(store.points):
        owner = label_owner(counts, label)
        if owner is not None:
            members[owner].append(label)
    entities = []
    for inst in sorted(members):
        pts = np.vstack([store.points[l] for l in members[inst]])
        cls = resolve_labels(counts, inst)
        if len(pts) < params.min_points:
            logger.warning("instance %s (%s) has %d points; dropped", inst, cls, len(pts))
            continue
        if cls == UNKNOWN_CLASS:
            continue
        mesh = reconstruct_surface(pts, params.mesh_method, params.alpha_factor)
        kind = EntityKind.LAYOUT if cls in params.layout_classes else EntityKind.RIGID
        entities.append(SceneEntity(f"{cls}_{inst}", cls, kind, mesh, fit_oriented_box(pts),
                                    extract_planes(mesh, plane_params)))
    return entities


# ---------------------------------------------------------------------------
# Frame streams on disk
# ---------------------------------------------------------------------------


def _points_mesh(points: np.ndarray) -> TriangleMesh:
    return TriangleMesh(points, np.empty((0, 3), dtype=np.int64))


def write_stream(root, frames: list[list[FrameSegment]]) -> Path:
    """Write frames as ``frames/NNNNN.json`` plus PLY point files, and a manifest."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(frames):
        segs = []
        for j, seg in enumerate(frame):
            ply = f"frames/{i:05d}_{j:03d}.ply"
            write_ply(root / ply, _points_mesh(seg.points))
            segs.append({"points": ply, "geometric_label": seg.geometric_label, "class": seg.semantic_class,
                         "instance_label": seg.instance_label})
        name = f"frames/{i:05d}.json"
        (root / name).write_text(json.dumps({"segments": segs}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        names.append(name)
    manifest = root / "stream.json"
    manifest.write_text(json.dumps({"frames": names}, indent=2) + "\n", encoding="utf-8")
    return manifest


def load_stream(manifest) -> list[list[FrameSegment]]:
    manifest = Path(manifest)
    root = manifest.parent
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    frames = []
    for name in doc["frames"]:
        fdoc = json.loads((root / name).read_text(encoding="utf-8"))
        frames.append([FrameSegment(read_ply(root / s["points"]).vertices, s.get("geometric_label"),
                                    s.get("class", UNKNOWN_CLASS), s.get("instance_label"))
                       for s in fdoc["segments"]])
    return frames


def fuse_stream(frames: list[list[FrameSegment]], params: FusionParams = FusionParams(),
                plane_params: PlaneExtractParams = PlaneExtractParams()) -> list[SceneEntity]:
    """Run the whole bookkeeping over labelled frames and emit entities."""
    store = FusedSegmentStore(params)
    counts = TripletCount()
    for frame in frames:
        cleaned = []
        for seg in frame:
            if seg.semantic_class in params.layout_classes:
                # stuff segments are large and sparse; the filter is meant for things
                cleaned.append(seg)
                continue
            kept, background = remove_outliers(seg, params.outlier_radius)
            if len(background):
                store.background.append(background)
            cleaned.append(kept)
        fuse_frame(store, counts, cleaned)
    merge_until_fixpoint(store, counts, params.voxel_share_ratio, params.duration_threshold)
    return finalize_entities(store, counts, plane_params)
