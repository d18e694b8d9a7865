import math

import numpy as np
import pytest

from interactive_scene.geometry import (
    GeometryError,
    InvalidTransformError,
    OrientedBox,
    PlaneExtractParams,
    SimTransform,
    SurfacePlane,
    TriangleMesh,
    box_iou,
    box_mesh,
    boxes_overlap_volume,
    extract_planes,
    extract_planes_from_points,
    fit_oriented_box,
    footprint_overlap_area,
    meshes_penetrate,
    mesh_to_cad_rms,
    quad_mesh,
    rot_z,
    transform_plane,
)


def seg_sq_dist(p, a, b):
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    q = a + t * ab
    return float((p - q) @ (p - q))


def tri_sq_dist(p, a, b, c):
    # project onto the supporting plane; inside -> plane distance, else nearest edge
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    h = (p - a) @ n
    foot = p - h * n
    m = np.array([b - a, c - a]).T
    uv, *_ = np.linalg.lstsq(m, foot - a, rcond=None)
    if uv[0] >= 0 and uv[1] >= 0 and uv.sum() <= 1:
        return float(h * h)
    return min(seg_sq_dist(p, a, b), seg_sq_dist(p, b, c), seg_sq_dist(p, c, a))


def brute_rms(points, mesh):
    tri = mesh.triangle_corners()
    sq = [min(tri_sq_dist(p, *t) for t in tri) for p in points]
    return math.sqrt(sum(sq) / len(sq))


def unit_box(center=(0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0), yaw=0.0):
    return OrientedBox(center, yaw, size)


# ---------------------------------------------------------------------------
# plane extraction


def test_cube_gives_six_axis_planes():
    cube = box_mesh((1, 1, 1), center=(0.5, 0.5, 0.5), subdivisions=4)
    planes = extract_planes(cube, PlaneExtractParams(inlier_tol=0.005))
    assert len(planes) == 6
    normals = {tuple(np.round(p.n, 6)) for p in planes}
    axes = {tuple(float(v) for v in s * np.eye(3)[i]) for i in range(3) for s in (1, -1)}
    assert normals == axes
    for p in planes:
        assert min(abs(abs(p.offset) - 0), abs(abs(p.offset) - 1)) < 1e-6


def test_floor_quad_is_one_plane():
    floor = quad_mesh([(0, 0, 0), (4, 0, 0), (4, 3, 0), (0, 3, 0)])
    planes = extract_planes(floor)
    assert len(planes) == 1
    assert abs(abs(planes[0].normal[2]) - 1.0) < 1e-9
    assert abs(planes[0].offset) < 1e-9


def test_cube_with_noise_points_matches_face_lsq_fit():
    rng = np.random.default_rng(4)
    faces = []
    for axis in range(3):
        for side in (0.0, 1.0):
            pts = rng.uniform(0, 1, (400, 3))
            pts[:, axis] = side + rng.normal(0, 0.001, 400)
            faces.append(pts)
    clutter = rng.uniform(-0.2, 1.2, (int(0.3 * 2400), 3))
    planes = extract_planes_from_points(np.vstack(faces + [clutter]), PlaneExtractParams(inlier_tol=0.01, seed=1))
    assert len(planes) >= 6
    top = planes[:6]
    for pts in faces:
        # oracle: least-squares normal of the ground-truth face points
        c = pts.mean(axis=0)
        n = np.linalg.svd(pts - c)[2][-1]
        best = min(math.degrees(math.acos(min(1.0, abs(float(n @ p.n))))) for p in top)
        assert best < 2.0


def test_extraction_is_deterministic_for_a_seed():
    mesh = box_mesh((0.6, 0.4, 0.3), subdivisions=3)
    a = extract_planes(mesh, PlaneExtractParams(seed=11))
    b = extract_planes(mesh, PlaneExtractParams(seed=11))
    assert a == b


def test_inliers_lie_within_tolerance():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0, 2, 800), rng.uniform(0, 1, 800), rng.normal(0, 0.002, 800)])
    params = PlaneExtractParams(inlier_tol=0.01)
    planes = extract_planes_from_points(pts, params)
    assert planes
    p = planes[0]
    assert abs(np.linalg.norm(p.n) - 1) < 1e-9
    assert np.sum(np.abs(p.signed_distance(pts)) <= params.inlier_tol) >= params.min_inliers_for(len(pts))


# ---------------------------------------------------------------------------
# oriented boxes


def test_box_fit_axis_aligned():
    box = fit_oriented_box(box_mesh((1, 2, 3)))
    assert sorted(box.size[:2]) == pytest.approx([1, 2], abs=1e-9)
    assert box.size[2] == pytest.approx(3)
    assert min(abs(box.yaw), abs(box.yaw - math.pi / 2)) < 1e-9


def test_box_fit_recovers_yaw():
    mesh = box_mesh((1, 2, 3)).rotated(rot_z(math.radians(30)))
    box = fit_oriented_box(mesh)
    # footprint symmetry: the yaw is defined modulo 90 degrees
    err = math.degrees(math.remainder(box.yaw - math.radians(30), math.pi / 2))
    assert abs(err) < 0.5
    assert sorted(box.size) == pytest.approx([1, 2, 3], abs=1e-6)
    assert np.all(box.contains(mesh.vertices, eps=1e-9))


def test_flat_triangle_gets_size_floor():
    tri = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))
    assert fit_oriented_box(tri).size[2] == pytest.approx(1e-6)


def test_box_fit_rejects_sideways_gravity():
    with pytest.raises(GeometryError):
        fit_oriented_box(box_mesh((1, 1, 1)), gravity=(1.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# plane transforms


def test_transform_plane_identity_and_translation():
    p = SurfacePlane((0, 0, 1), -1.0)
    assert transform_plane(p, SimTransform()) == p
    moved = transform_plane(p, SimTransform(translation=(0, 0, 2)))
    assert moved.normal == pytest.approx((0, 0, 1))
    assert moved.offset == pytest.approx(-3.0)


def test_transform_plane_scale_matches_refit():
    p = SurfacePlane((0, 0, 1), -1.0)
    t = SimTransform(scale=2.0)
    on_plane = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1]], float)
    img = t.apply(on_plane)
    n = np.cross(img[1] - img[0], img[2] - img[0])
    n /= np.linalg.norm(n)
    q = transform_plane(p, t)
    assert abs(abs(float(n @ q.n)) - 1) < 1e-12
    assert np.abs(q.signed_distance(img)).max() < 1e-12
    assert q.offset == pytest.approx(-2.0)


@pytest.mark.parametrize("scale", [0.0, -1.0])
def test_transform_plane_rejects_bad_scale(scale):
    with pytest.raises(InvalidTransformError):
        transform_plane(SurfacePlane((0, 0, 1), 0.0), SimTransform(scale=scale))


# ---------------------------------------------------------------------------
# overlaps


def test_footprint_overlap_examples():
    a = unit_box()
    assert footprint_overlap_area(a, a) == pytest.approx(1.0)
    assert footprint_overlap_area(a, unit_box((3, 0, 0))) == 0.0
    assert footprint_overlap_area(a, unit_box((0.5, 0, 0))) == pytest.approx(0.5)


def test_footprint_overlap_monte_carlo():
    a = unit_box()
    b = unit_box((0.5, 0, 0))
    rng = np.random.default_rng(0)
    n = 1_000_000
    xy = rng.uniform([-0.5, -0.5], [1.0, 0.5], (n, 2))
    inside = (np.abs(xy[:, 0]) <= 0.5) & (np.abs(xy[:, 0] - 0.5) <= 0.5)
    estimate = inside.mean() * 1.5
    assert abs(estimate - footprint_overlap_area(a, b)) < 1e-3


def test_overlap_volume_examples():
    a = unit_box()
    assert boxes_overlap_volume(a, a) == pytest.approx(1.0)
    assert boxes_overlap_volume(a, unit_box((0, 0, 1))) == 0.0
    # interval product: 0.5 * 1 * 0.5, and 0.5 ** 3 with the y offset too
    assert boxes_overlap_volume(a, unit_box((0.5, 0, 0.5))) == pytest.approx(0.25)
    assert boxes_overlap_volume(a, unit_box((0.5, 0.5, 0.5))) == pytest.approx(0.125)


def test_overlap_volume_by_sampling():
    a, b = unit_box(), unit_box((0.5, 0, 0.5), yaw=0.3)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.5, 0.5, (400_000, 3))
    frac = np.mean(b.contains(pts))
    assert abs(frac - boxes_overlap_volume(a, b)) < 5e-3


def test_box_iou_bounds():
    a = unit_box()
    assert box_iou(a, a) == pytest.approx(1.0)
    assert box_iou(a, unit_box((5, 0, 0))) == 0.0


# ---------------------------------------------------------------------------
# penetration


def test_penetration_examples():
    cube = box_mesh((1, 1, 1))
    assert not meshes_penetrate(cube, cube.translated((2, 0, 0)))
    assert meshes_penetrate(cube, cube)
    # exact box-intersection depth along x is 0.005
    assert not meshes_penetrate(cube, cube.translated((0.995, 0, 0)), tol=0.01)
    assert meshes_penetrate(cube, cube.translated((0.95, 0, 0)), tol=0.01)


def test_touching_is_not_penetration():
    cube = box_mesh((1, 1, 1))
    assert not meshes_penetrate(cube, cube.translated((0, 0, 1.0)), tol=0.0)


# ---------------------------------------------------------------------------
# rms distance


def test_rms_zero_on_surface():
    cube = box_mesh((1, 1, 1), subdivisions=2)
    pts = cube.sample_surface(500, np.random.default_rng(0))
    assert mesh_to_cad_rms(pts, cube) < 1e-12


def test_rms_single_vertex_over_plane():
    big = quad_mesh([(-50, -50, 0), (50, -50, 0), (50, 50, 0), (-50, 50, 0)])
    assert mesh_to_cad_rms([(1.0, 2.0, 0.3)], big) == pytest.approx(0.3)


def test_rms_matches_brute_force_on_scaled_cube():
    cube = box_mesh((1, 1, 1), subdivisions=2)
    pts = cube.sample_surface(1000, np.random.default_rng(2))
    bigger = TriangleMesh(cube.vertices * 1.1, cube.triangles)
    assert mesh_to_cad_rms(pts, bigger) == pytest.approx(brute_rms(pts, bigger), rel=1e-12, abs=1e-14)
