import json
from pathlib import Path

import numpy as np
import pytest

from ooalign import fixtures
from ooalign.errors import ManifestError
from ooalign.harness import (
    BenchmarkCase,
    build_fixture_suite,
    compose_iterative,
    load_manifest,
    nearest_surface_points,
    perturb_case,
    run_benchmark,
    save_manifest,
    snap_baseline,
)
from ooalign.mesh import compute_stats, compute_vertex_normals, load_obj, save_obj
from ooalign.metrics import intersection_ratio
from ooalign.optim import AlignConfig, InitConfig, JitterConfig
from ooalign.pose import PoseParams, apply_pose
from ooalign.render import RigSchedule


def small_config(**kwargs):
    defaults = dict(
        total_steps=20, num_phases=1, num_views=2, num_restarts=2, seed=11,
        guidance="null", lambda_clip=0.0,
        lambda_icp_per_phase=(1.0,), lambda_pen_per_phase=(0.5,),
        jitter=JitterConfig(0.0, 0.0, 0.0),
        init=InitConfig(translation_scale=0.2, rotation_max_deg=15),
        rig=RigSchedule(num_views=2, betas=(0.0,), distance_factors=(2.0,)),
        resolution=(32, 32), remesh_target=0,
    )
    defaults.update(kwargs)
    return AlignConfig(**defaults)


# ---------------------------------------------------------------------------
# manifest + perturbation
# ---------------------------------------------------------------------------


def write_toy_manifest(tmp_path, n=2):
    cases = []
    pairs = [
        ("case_a", fixtures.box((3, 0.2, 3), center=(0, -0.1, 0)), fixtures.box((0.8, 0.8, 0.8), center=(0, 0.4, 0))),
        ("case_b", fixtures.box((1.5, 1.5, 1.5), center=(0, 0.75, 0)), fixtures.box((0.6, 0.6, 0.6), center=(0, 1.8, 0))),
    ][:n]
    for cid, target, source in pairs:
        save_obj(target, tmp_path / f"{cid}_t.obj")
        save_obj(source, tmp_path / f"{cid}_s.obj")
        cases.append(BenchmarkCase(
            id=cid, source_path=f"{cid}_s.obj", target_path=f"{cid}_t.obj",
            prompt=f"prompt {cid}", reference_pose=PoseParams.identity(), mode="rigid",
        ))
    manifest = tmp_path / "manifest.json"
    save_manifest(cases, manifest)
    return manifest


def test_manifest_roundtrip(tmp_path):
    manifest = write_toy_manifest(tmp_path)
    cases = load_manifest(manifest)
    assert [c.id for c in cases] == ["case_a", "case_b"]
    assert Path(cases[0].source_path).exists()


def test_manifest_duplicate_ids_rejected(tmp_path):
    manifest = write_toy_manifest(tmp_path)
    data = json.loads(manifest.read_text())
    data["cases"].append(data["cases"][0])
    manifest.write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(manifest)


def test_manifest_bad_schema_version(tmp_path):
    manifest = write_toy_manifest(tmp_path)
    data = json.loads(manifest.read_text())
    data["schema_version"] = 99
    manifest.write_text(json.dumps(data))
    with pytest.raises(ManifestError):
        load_manifest(manifest)


def test_perturb_rigid_keeps_scale(tmp_path):
    manifest = write_toy_manifest(tmp_path, n=1)
    case = load_manifest(manifest)[0]
    pose = perturb_case(case, np.random.default_rng(0))
    assert pose.scale == 1.0


def test_perturb_deterministic(tmp_path):
    manifest = write_toy_manifest(tmp_path, n=1)
    case = load_manifest(manifest)[0]
    p1 = perturb_case(case, np.random.default_rng(7))
    p2 = perturb_case(case, np.random.default_rng(7))
    np.testing.assert_array_equal(p1.to_vector(), p2.to_vector())


def test_perturb_translation_bounds(tmp_path):
    # unit-bbox source: translation components bounded by +-10
    target = fixtures.box((3, 3, 3))
    source = fixtures.box((1, 1, 1))
    save_obj(target, tmp_path / "t.obj")
    save_obj(source, tmp_path / "s.obj")
    case = BenchmarkCase("c", str(tmp_path / "s.obj"), str(tmp_path / "t.obj"),
                         "p", PoseParams.identity(), "rigid")
    rng = np.random.default_rng(3)
    stats = compute_stats(source)
    draws = np.array([perturb_case(case, rng, source_stats=stats).tau for _ in range(1000)])
    assert np.all(np.abs(draws) <= 10.0 + 1e-12)


# ---------------------------------------------------------------------------
# snap baseline
# ---------------------------------------------------------------------------


def test_snap_cube_above_plate():
    plate = fixtures.flat_plate(width=4, depth=4, nx=6, nz=6)
    cube = fixtures.box((1, 1, 1), center=(0.13, 1.5, -0.2))  # bottom face at y=1
    pose = snap_baseline(cube, plate)
    np.testing.assert_allclose(pose.tau, [0, -1.0, 0], atol=1e-3)
    assert pose.rotation_angle_deg() == 0.0
    assert pose.scale == 1.0


def test_snap_touching_is_noop():
    plate = fixtures.flat_plate(width=4, depth=4, nx=6, nz=6)
    cube = fixtures.box((1, 1, 1), center=(0, 0.5, 0))  # resting on the plate
    pose = snap_baseline(cube, plate)
    assert np.linalg.norm(pose.tau) < 1e-9


def test_snap_sphere_to_plate_contact(rng):
    for seed in range(3):
        r = np.random.default_rng(seed)
        sphere = fixtures.icosphere(0.5, 2, center=tuple(r.uniform(-1, 1, 2)) + (2.0,))
        # ^ center (x, y, 2.0): well above the plate
        plate = fixtures.flat_plate(width=6, depth=6, nx=8, nz=8)
        pose = snap_baseline(sphere, plate)
        snapped = apply_pose(sphere, pose)
        _, dists = nearest_surface_points(snapped.vertices, plate)
        diag = compute_stats(plate).bbox_diagonal
        assert dists.min() < 1e-3 * diag


# ---------------------------------------------------------------------------
# benchmark runner
# ---------------------------------------------------------------------------


def test_run_benchmark_toy(tmp_path):
    manifest = write_toy_manifest(tmp_path)
    out = tmp_path / "out"
    records, rows = run_benchmark(manifest, small_config(), out,
                                  voxel_resolution=32, eval_views=2,
                                  eval_resolution=(24, 24))
    ok = [r for r in records if r.status == "ok"]
    assert len(records) == 2 * 3  # 2 cases x (ours, b1, b2)
    assert len(ok) == 6
    assert {r["method"] for r in rows} == {"ours", "b1", "b2"}
    assert (out / "summary.csv").exists()
    # bijection: one record per case+method, ids unique
    seen = {(r.case_id, r.method) for r in records}
    assert len(seen) == len(records)


def test_run_benchmark_missing_file_isolated(tmp_path):
    manifest = write_toy_manifest(tmp_path)
    data = json.loads(manifest.read_text())
    data["cases"][0]["source_path"] = "does_not_exist.obj"
    manifest.write_text(json.dumps(data))
    out = tmp_path / "out"
    records, rows = run_benchmark(manifest, small_config(), out, methods=("b1",),
                                  voxel_resolution=32, eval_views=2, eval_resolution=(24, 24))
    by_case = {r.case_id: r for r in records}
    assert by_case["case_a"].status == "failed"
    assert by_case["case_b"].status == "ok"


def test_run_benchmark_deterministic_summary(tmp_path):
    manifest = write_toy_manifest(tmp_path, n=1)
    cfg = small_config(total_steps=10)
    _, _ = run_benchmark(manifest, cfg, tmp_path / "out1", methods=("ours", "b1"),
                         voxel_resolution=24, eval_views=2, eval_resolution=(16, 16))
    _, _ = run_benchmark(manifest, cfg, tmp_path / "out2", methods=("ours", "b1"),
                         voxel_resolution=24, eval_views=2, eval_resolution=(16, 16))
    csv1 = (tmp_path / "out1" / "summary.csv").read_bytes()
    csv2 = (tmp_path / "out2" / "summary.csv").read_bytes()
    assert csv1 == csv2
    s1 = (tmp_path / "out1" / "case_a" / "ours" / "steps.jsonl").read_bytes()
    s2 = (tmp_path / "out2" / "case_a" / "ours" / "steps.jsonl").read_bytes()
    assert s1 == s2


def test_records_self_contained(tmp_path):
    manifest = write_toy_manifest(tmp_path, n=1)
    out = tmp_path / "out"
    records, _ = run_benchmark(manifest, small_config(total_steps=5), out, methods=("b1",),
                               voxel_resolution=32, eval_views=2, eval_resolution=(16, 16))
    rec = records[0]
    src = load_obj(rec.artifacts["final_source"])
    tgt = load_obj(rec.artifacts["target"])
    report = intersection_ratio(src, tgt, resolution=32)
    assert abs(report.ratio - rec.metrics["intersection"]["ratio"]) < 1e-9
    from ooalign.metrics import contact_fraction

    eps = rec.metrics["contact_epsilon"]
    assert abs(contact_fraction(src, tgt, eps) - rec.metrics["contact_fraction"]) < 1e-9


def test_fixture_suite_builds(tmp_path):
    manifest = build_fixture_suite(tmp_path / "suite")
    cases = load_manifest(manifest)
    assert len(cases) == 10
    for case in cases:
        assert Path(case.source_path).exists()
        assert Path(case.target_path).exists()
        load_obj(case.source_path)
        load_obj(case.target_path)


# ---------------------------------------------------------------------------
# iterative assembly
# ---------------------------------------------------------------------------


def stacked_box_stages(n=3):
    stages = [(fixtures.box((2.0, 0.4, 2.0), center=(0, 0.2, 0), name="base"), "base")]
    for k in range(1, n):
        size = 2.0 - 0.5 * k
        y = 0.4 * k + 0.2
        stages.append(
            (fixtures.box((size, 0.4, size), center=(0, y, 0), name=f"level{k}"),
             f"box level {k} stacked on the pile")
        )
    return stages


def test_compose_single_stage_equals_run_alignment():
    stages = stacked_box_stages(2)
    cfg = small_config(total_steps=6, num_restarts=1)
    scene, results = compose_iterative(stages, cfg)
    assert len(results) == 1
    assert scene.vertex_count == stages[0][0].vertex_count + stages[1][0].vertex_count


def test_compose_three_boxes_silhouette():
    stages = stacked_box_stages(3)
    cfg = small_config(total_steps=8, num_restarts=1, guidance="silhouette",
                       lambda_clip=10.0, lambda_icp_per_phase=(0.1,),
                       lambda_pen_per_phase=(0.0,), resolution=(32, 32))
    scene, results = compose_iterative(stages, cfg)
    assert len(results) == 2
    assert set(np.unique(scene.vertex_labels)) == {0, 1, 2}
    # each stage's target grows by the prior compositions
    assert scene.vertex_count == sum(m.vertex_count for m, _ in stages)


def test_compose_burger_low_intersection():
    from ooalign.mesh import remesh_subdivide

    plate = fixtures.box((2.4, 0.15, 2.4), center=(0, 0.075, 0), name="plate")
    patty = fixtures.box((1.2, 0.25, 1.2), center=(0, 0.275, 0), name="patty")
    topping = fixtures.box((1.3, 0.08, 1.3), center=(0, 0.44, 0), name="topping")
    bun = fixtures.box((1.25, 0.35, 1.25), center=(0, 0.655, 0), name="bun")
    stages = [
        (remesh_subdivide(m, 150), p)
        for m, p in [(plate, "plate"), (patty, "patty on plate"),
                     (topping, "topping on patty"), (bun, "bun on top")]
    ]
    # silhouette-dominated: the tangent-half-space penetration term misbehaves
    # on closed targets (distant faces register phantom depth), so keep it off
    cfg = small_config(total_steps=8, num_restarts=1, guidance="silhouette",
                       lambda_clip=10.0, lambda_icp_per_phase=(0.01,),
                       lambda_pen_per_phase=(0.0,), resolution=(48, 48))
    scene, results = compose_iterative(stages, cfg)
    assert len(results) == 3
    # per-stage intersection of the placed mesh against its own target stays low
    composed = stages[0][0]
    from ooalign.pose import compose_scene

    for (mesh, _), res in zip(stages[1:], results):
        placed = apply_pose(mesh, res.pose)
        report = intersection_ratio(placed, composed, resolution=48)
        assert report.ratio < 0.05
        composed = compose_scene(composed, placed)
