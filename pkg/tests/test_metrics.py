import numpy as np
import pytest

from ooalign import fixtures
from ooalign.guidance import ExternalProvider, GuidanceTarget, NullProvider, SilhouetteProvider
from ooalign.metrics import (
    build_eval_cameras,
    contact_fraction,
    intersection_ratio,
    semantic_eval,
)
from ooalign.mesh import compute_vertex_normals
from ooalign.pose import PoseParams, apply_pose, compose_scene, quat_from_axis_angle
from ooalign.render import render_soft
from scorer_double import EchoScorerServer


def aabb_overlap_ratio(center_a, size_a, center_b, size_b):
    """Analytic intersection-over-union for two axis-aligned boxes."""
    a_lo = np.asarray(center_a) - np.asarray(size_a) / 2
    a_hi = np.asarray(center_a) + np.asarray(size_a) / 2
    b_lo = np.asarray(center_b) - np.asarray(size_b) / 2
    b_hi = np.asarray(center_b) + np.asarray(size_b) / 2
    inter_sides = np.maximum(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0)
    inter = float(np.prod(inter_sides))
    vol_a = float(np.prod(size_a))
    vol_b = float(np.prod(size_b))
    return inter / (vol_a + vol_b - inter)


def test_identical_cubes_ratio_one(cube):
    report = intersection_ratio(cube, fixtures.unit_cube(), resolution=128)
    assert abs(report.ratio - 1.0) <= 0.02
    assert report.watertight_flags == (True, True)


def test_disjoint_cubes_ratio_zero(cube):
    other = fixtures.box(center=(3.0, 0.0, 0.0))
    report = intersection_ratio(cube, other, resolution=64)
    assert report.ratio == 0.0


def test_half_offset_cubes(cube):
    other = fixtures.box(center=(0.5, 0.0, 0.0))
    report = intersection_ratio(cube, other, resolution=128)
    assert abs(report.ratio - 1.0 / 3.0) <= 0.02


def test_random_box_pairs_match_analytic(rng):
    for _ in range(10):
        size_a = rng.uniform(0.5, 2.0, 3)
        size_b = rng.uniform(0.5, 2.0, 3)
        center_b = rng.uniform(-0.5, 0.5, 3)
        a = fixtures.box(size_a)
        b = fixtures.box(size_b, center=center_b)
        expected = aabb_overlap_ratio([0, 0, 0], size_a, center_b, size_b)
        report = intersection_ratio(a, b, resolution=128)
        assert abs(report.ratio - expected) <= 0.02


def test_ratio_symmetric(cube):
    other = fixtures.box((1.2, 0.8, 1.0), center=(0.3, 0.1, -0.2))
    r1 = intersection_ratio(cube, other, resolution=64)
    r2 = intersection_ratio(other, cube, resolution=64)
    assert r1.ratio == r2.ratio
    assert r1.intersection_volume == r2.intersection_volume


def test_ratio_resolution_convergence(cube):
    other = fixtures.box(center=(0.4, 0.2, 0.0))
    r128 = intersection_ratio(cube, other, resolution=128)
    r256 = intersection_ratio(cube, other, resolution=256)
    assert abs(r128.ratio - r256.ratio) < 0.01


def test_ratio_rigid_invariance(rng, cube):
    other = fixtures.box(center=(0.4, 0.0, 0.1))
    base = intersection_ratio(cube, other, resolution=128).ratio
    pose = PoseParams(tau=[0.3, -1.0, 2.0], quat=quat_from_axis_angle([1, 1, 0], 0.7))
    moved = intersection_ratio(apply_pose(cube, pose), apply_pose(other, pose), resolution=128)
    assert abs(moved.ratio - base) < 0.01


def test_zero_union_error():
    # two meshes so thin no voxel center falls inside either
    sliver = fixtures.box((1.0, 1e-12, 1.0))
    with pytest.raises(ValueError):
        intersection_ratio(sliver, fixtures.box((1.0, 1e-12, 1.0), center=(0, 0.5, 0)), resolution=16)


def test_nonwatertight_flagged(cube):
    from ooalign.mesh import TriMesh

    broken = TriMesh(cube.vertices, cube.faces[:-1], name="open")
    report = intersection_ratio(cube, broken, resolution=32)
    assert report.watertight_flags == (True, False)


# ---------------------------------------------------------------------------
# contact fraction
# ---------------------------------------------------------------------------


def test_contact_coincident(cube):
    assert contact_fraction(cube, fixtures.unit_cube(), epsilon=1e-6) == 1.0


def test_contact_separated(cube):
    far = fixtures.box(center=(10.0, 0.0, 0.0))
    assert contact_fraction(cube, far, epsilon=0.5) == 0.0


def brute_force_surface_distance(point, mesh):
    """Exhaustive point-to-triangle distance over every face."""
    from ooalign.metrics import _closest_points_on_triangles

    v = mesh.vertices
    f = mesh.faces
    p = np.tile(point, (len(f), 1))
    cp = _closest_points_on_triangles(p, v[f[:, 0]], v[f[:, 1]], v[f[:, 2]])
    return float(np.linalg.norm(p - cp, axis=1).min())


def test_contact_box_on_box_matches_enumeration():
    from ooalign.mesh import remesh_subdivide

    bottom = remesh_subdivide(fixtures.box((1, 1, 1), center=(0, -0.5, 0)), 60)
    top = remesh_subdivide(fixtures.box((1, 1, 1), center=(0, 0.5, 0)), 60)
    eps = 0.01
    got = contact_fraction(top, bottom, epsilon=eps)
    # brute-force surface-distance enumeration: bottom-face vertex share
    hits = sum(brute_force_surface_distance(v, bottom) < eps for v in top.vertices)
    assert got == hits / len(top.vertices)
    assert 0.0 < got < 1.0
    bottom_face_share = np.mean(np.abs(top.vertices[:, 1]) < 1e-9)
    assert abs(got - bottom_face_share) < 1e-12


def test_contact_monotone_in_epsilon(rng):
    a = fixtures.bumpy_blob(seed=1)
    b = fixtures.box(center=(0.5, 0.5, 0.0))
    eps = np.sort(rng.uniform(0.01, 2.0, 8))
    fracs = [contact_fraction(a, b, e) for e in eps]
    assert all(f2 >= f1 for f1, f2 in zip(fracs, fracs[1:]))


# ---------------------------------------------------------------------------
# semantic eval
# ---------------------------------------------------------------------------


def make_scene():
    target = fixtures.flat_plate(width=2, depth=2, nx=2, nz=2)
    source = fixtures.box((0.5, 0.5, 0.5), center=(0, 0.25, 0))
    return compose_scene(compute_vertex_normals(target), compute_vertex_normals(source))


def test_semantic_null_provider():
    report = semantic_eval(make_scene(), GuidanceTarget.text("x"), NullProvider(),
                           num_views=4, resolution=(32, 32))
    assert report.mean_score == 0.0
    assert report.num_views == 4
    assert report.available


def test_semantic_silhouette_self_is_max():
    scene = make_scene()
    cams = build_eval_cameras(scene, num_views=4, resolution=(32, 32))
    silhouettes = [render_soft(scene, c).rgba[..., 3] for c in cams]
    report = semantic_eval(scene, GuidanceTarget.text("x"), SilhouetteProvider(silhouettes),
                           num_views=4, resolution=(32, 32))
    assert report.mean_score == 0.0


def test_semantic_echo_matches_pixel_average():
    scene = make_scene()
    cams = build_eval_cameras(scene, num_views=4, resolution=(32, 32))
    expected = np.mean([
        render_soft(scene, c).composited_rgb().astype(np.float32).mean() for c in cams
    ])
    with EchoScorerServer("mean_intensity") as server:
        provider = ExternalProvider(address=server.address)
        report = semantic_eval(scene, GuidanceTarget.text("x"), provider,
                               num_views=4, resolution=(32, 32))
        provider.close()
    assert abs(report.mean_score - expected) < 1e-6


def test_semantic_unavailable_marked():
    provider = ExternalProvider(address="127.0.0.1:1")
    report = semantic_eval(make_scene(), GuidanceTarget.text("x"), provider,
                           num_views=2, resolution=(16, 16))
    assert not report.available
    assert report.provider_id == "unavailable"