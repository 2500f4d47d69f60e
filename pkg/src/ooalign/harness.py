"""Benchmark harness: manifest-driven batch runs, baseline aligners,
perturbation protocol, iterative multi-object assembly, and run persistence.

Benchmark assets store both meshes in their reference arrangement; a case's
initial poses are random perturbations of the source per the protocol, and a
method must move it back. Metrics are recomputed from the persisted OBJ
artifacts so every record is self-contained.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ManifestError, OoalignError, OptimizationError
from .fixtures import box, bumpy_blob, flat_plate, icosphere
from .guidance import GuidanceTarget, NullProvider, SilhouetteProvider, make_provider
from .losses import max_signed_depth
from .mesh import (
    TriMesh,
    compute_stats,
    compute_vertex_normals,
    ensure_vertex_normals,
    load_obj,
    remesh_subdivide,
    save_obj,
)
from .metrics import contact_fraction, intersection_ratio, nearest_surface_points, semantic_eval
from .optim import AlignConfig, RunResult, random_initial_pose, run_alignment
from .pose import PoseParams, apply_pose, compose_scene
from .render import RigSchedule, build_rig, render_soft

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
DEFAULT_METHODS = ("ours", "b1", "b2")


@dataclass(frozen=True)
class BenchmarkCase:
    id: str
    source_path: str
    target_path: str
    prompt: str
    reference_pose: PoseParams
    mode: str = "rigid"  # rigid | scaled

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "source_path": self.source_path,
            "target_path": self.target_path,
            "prompt": self.prompt,
            "reference_pose": self.reference_pose.to_json_dict(),
            "mode": self.mode,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "BenchmarkCase":
        required = {"id", "source_path", "target_path", "prompt", "reference_pose", "mode"}
        missing = required - set(d)
        if missing:
            raise ManifestError(f"case missing fields: {sorted(missing)}")
        if d["mode"] not in ("rigid", "scaled"):
            raise ManifestError(f"case {d['id']}: bad mode {d['mode']!r}")
        return cls(
            id=str(d["id"]),
            source_path=str(d["source_path"]),
            target_path=str(d["target_path"]),
            prompt=str(d["prompt"]),
            reference_pose=PoseParams.from_json_dict(d["reference_pose"]),
            mode=d["mode"],
        )


@dataclass
class RunRecord:
    case_id: str
    method: str
    status: str = "ok"  # ok | failed
    error: Optional[str] = None
    pose: Optional[PoseParams] = None
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    config_snapshot: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "method": self.method,
            "status": self.status,
            "error": self.error,
            "pose": self.pose.to_json_dict() if self.pose else None,
            "metrics": self.metrics,
            "timings": self.timings,
            "artifacts": self.artifacts,
            "config": self.config_snapshot,
        }


def load_manifest(path) -> list[BenchmarkCase]:
    """Accepts either {"schema_version": 1, "cases": [...]} or a bare JSON array."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if isinstance(data, dict):
        version = data.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema_version {version}")
        raw_cases = data.get("cases", [])
    elif isinstance(data, list):
        raw_cases = data
    else:
        raise ManifestError("manifest must be an object or array")
    cases = [BenchmarkCase.from_json_dict(c) for c in raw_cases]
    ids = [c.id for c in cases]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate case ids in manifest")
    base = Path(path).parent
    resolved = []
    for c in cases:
        resolved.append(
            replace(
                c,
                source_path=str((base / c.source_path).resolve()),
                target_path=str((base / c.target_path).resolve()),
            )
        )
    return resolved


def save_manifest(cases: list[BenchmarkCase], path) -> None:
    payload = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "cases": [c.to_json_dict() for c in cases],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def perturb_case(case: BenchmarkCase, rng: np.random.Generator, source_stats=None) -> PoseParams:
    """One randomized starting pose per the protocol, drawn relative to the
    source mesh's own bounding-box side lengths."""
    if source_stats is None:
        source_stats = compute_stats(load_obj(case.source_path))
    perturb = random_initial_pose(rng, source_stats, case.mode)
    return perturb.compose(case.reference_pose)


# ---------------------------------------------------------------------------
# geometric baseline
# ---------------------------------------------------------------------------


def snap_baseline(source: TriMesh, target: TriMesh) -> PoseParams:
    """Geometry-only placement: translate the source along the direction of
    its nearest surface pair until first contact. Rotation and scale identity."""
    closest, dists = nearest_surface_points(source.vertices, target)
    i = int(np.argmin(dists))
    tau = closest[i] - source.vertices[i]
    return PoseParams(tau=tau)


# ---------------------------------------------------------------------------
# fixture suite
# ---------------------------------------------------------------------------


def _fixture_pairs():
    """(name, target mesh, source mesh in reference arrangement, prompt)."""
    plate = lambda: box((3.0, 0.2, 3.0), center=(0, -0.1, 0), name="plate")  # noqa: E731
    return [
        ("cube_on_plate", plate(), box((0.8, 0.8, 0.8), center=(0, 0.4, 0), name="cube"),
         "a cube resting on a plate"),
        ("small_on_big_cube", box((1.5, 1.5, 1.5), center=(0, 0.75, 0), name="big"),
         box((0.6, 0.6, 0.6), center=(0, 1.8, 0), name="small"),
         "a small cube stacked on a big cube"),
        ("sphere_on_plate", plate(), icosphere(0.5, 2, center=(0, 0.5, 0), name="ball"),
         "a ball sitting on a plate"),
        ("plate_on_plate", box((2.0, 0.15, 2.0), center=(0, -0.075, 0), name="bottom"),
         box((2.0, 0.15, 2.0), center=(0, 0.075, 0), name="top"),
         "two plates stacked flat"),
        ("box_beside_box", box((1.0, 1.0, 1.0), center=(0, 0.5, 0), name="left"),
         box((1.0, 1.0, 1.0), center=(1.05, 0.5, 0), name="right"),
         "a box directly beside another box"),
        ("blob_on_plate", plate(), bumpy_blob(0.45, 2, seed=4, name="blob"),
         "a lumpy toy on a plate"),
        ("peg_on_plate", plate(), box((0.3, 1.4, 0.3), center=(0, 0.7, 0), name="peg"),
         "a peg standing upright on a plate"),
        ("lid_on_box", box((1.2, 0.8, 1.2), center=(0, 0.4, 0), name="bin"),
         box((1.3, 0.12, 1.3), center=(0, 0.86, 0), name="lid"),
         "a lid covering a box"),
        ("toy_on_cube", box((1.0, 1.0, 1.0), center=(0, 0.5, 0), name="block"),
         bumpy_blob(0.35, 1, seed=9, name="toy"),
         "a toy perched on a block"),
        ("bar_on_plate", plate(), box((2.2, 0.25, 0.4), center=(0, 0.125, 0), name="bar"),
         "a long bar lying on a plate"),
    ]


def build_fixture_suite(out_dir, mode: str = "rigid") -> Path:
    """Write the 10-case synthetic benchmark (meshes + manifest); returns the
    manifest path. Deterministic output for CI use."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for name, target, source, prompt in _fixture_pairs():
        if name == "blob_on_plate":
            source = TriMesh(source.vertices + np.array([0.0, 0.55, 0.0]), source.faces, name=source.name)
        if name == "toy_on_cube":
            source = TriMesh(source.vertices + np.array([0.0, 1.4, 0.0]), source.faces, name=source.name)
        t_path = out / f"{name}_target.obj"
        s_path = out / f"{name}_source.obj"
        save_obj(target, t_path)
        save_obj(source, s_path)
        cases.append(
            BenchmarkCase(
                id=name,
                source_path=s_path.name,
                target_path=t_path.name,
                prompt=prompt,
                reference_pose=PoseParams.identity(),
                mode=mode,
            )
        )
    manifest = out / "manifest.json"
    save_manifest(cases, manifest)
    return manifest


# ---------------------------------------------------------------------------
# batch execution
# ---------------------------------------------------------------------------


def _load_case_meshes(case: BenchmarkCase, remesh_target: int):
    source = load_obj(case.source_path)
    target = load_obj(case.target_path)
    if remesh_target:
        source = remesh_subdivide(source, remesh_target)
        target = remesh_subdivide(target, remesh_target)
    return compute_vertex_normals(source), compute_vertex_normals(target)


def _case_eval_provider(config: AlignConfig, scene_for_silhouette=None, eval_views=4,
                        eval_resolution=(64, 64)):
    if config.guidance == "silhouette" and scene_for_silhouette is not None:
        from .metrics import build_eval_cameras

        cams = build_eval_cameras(scene_for_silhouette, eval_views, eval_resolution)
        return SilhouetteProvider([render_soft(scene_for_silhouette, c).rgba[..., 3] for c in cams])
    if config.guidance == "external":
        return make_provider("external")
    return NullProvider()


def _case_metrics(source_posed: TriMesh, target: TriMesh, prompt: str, config: AlignConfig,
                  eval_provider, voxel_resolution: int, eval_views: int,
                  eval_resolution) -> dict:
    stats = compute_stats(target)
    eps = 0.01 * stats.bbox_diagonal
    report = intersection_ratio(source_posed, target, voxel_resolution)
    scene = compose_scene(target, source_posed)
    sem = semantic_eval(scene, GuidanceTarget.text(prompt), eval_provider,
                        num_views=eval_views, resolution=eval_resolution)
    pen_depth = None
    if target.vertex_normals is not None:
        pen_depth = max_signed_depth(source_posed.vertices, target.vertices, target.vertex_normals)
    return {
        "intersection": report.to_json_dict(),
        "contact_fraction": contact_fraction(source_posed, target, eps),
        "contact_epsilon": eps,
        "semantic": sem.to_json_dict(),
        "max_signed_depth": pen_depth,
    }


def _pose_error(pose: PoseParams, reference: PoseParams, stats) -> dict:
    delta = pose.compose(reference.inverse())
    return {
        "translation_rel": float(np.linalg.norm(pose.tau - reference.tau) / stats.bbox_diagonal),
        "rotation_deg": delta.rotation_angle_deg(),
        "log_scale_abs": abs(pose.log_scale - reference.log_scale),
    }


def run_case(
    case: BenchmarkCase,
    config: AlignConfig,
    out_dir: Path,
    methods=DEFAULT_METHODS,
    voxel_resolution: int = 64,
    eval_views: int = 4,
    eval_resolution=(64, 64),
    provider_factory: Optional[Callable] = None,
) -> list[RunRecord]:
    """Run every method on one case; persists artifacts and returns records."""
    records = []
    case_dir = out_dir / case.id
    case_dir.mkdir(parents=True, exist_ok=True)
    t_load = time.perf_counter()
    source, target = _load_case_meshes(case, config.remesh_target)
    load_s = time.perf_counter() - t_load
    target_stats = compute_stats(target)
    source_stats = compute_stats(source)

    # one shared set of perturbations per case+seed: paired comparisons stay valid
    case_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _stable_id(case.id)]))
    perturbations = [
        random_initial_pose(case_rng, source_stats, case.mode, config.init)
        for _ in range(config.num_restarts)
    ]

    reference_scene = compose_scene(target, apply_pose(source, case.reference_pose))
    eval_provider = _case_eval_provider(config, reference_scene, eval_views, eval_resolution)

    target_obj = case_dir / "target.obj"
    save_obj(target, target_obj)

    for method in methods:
        record = RunRecord(case_id=case.id, method=method,
                           config_snapshot=config.to_json_dict())
        t0 = time.perf_counter()
        try:
            if method == "ours":
                pose, run_result = _method_ours(case, config, source, target, target_stats,
                                                perturbations, reference_scene)
            elif method == "b1":
                pose = perturbations[0].compose(case.reference_pose)
                posed = apply_pose(source, pose)
                pose = snap_baseline(posed, target).compose(pose)
                run_result = None
            elif method == "b2":
                pose = _method_b2(case, source, target, perturbations, eval_provider,
                                  eval_views, eval_resolution)
                run_result = None
            else:
                raise OoalignError(f"unknown method '{method}'")

            method_dir = case_dir / method
            method_dir.mkdir(exist_ok=True)
            posed = apply_pose(source, pose)
            final_obj = method_dir / "final_source.obj"
            scene_obj = method_dir / "scene.obj"
            save_obj(posed, final_obj)
            save_obj(compose_scene(target, posed), scene_obj)
            (method_dir / "pose.json").write_text(
                json.dumps(pose.to_json_dict(), sort_keys=True) + "\n"
            )
            if run_result is not None:
                with open(method_dir / "steps.jsonl", "w") as fh:
                    for step in run_result.all_step_records():
                        fh.write(json.dumps(step, sort_keys=True) + "\n")

            # metrics from the persisted artifacts: records are self-contained
            reloaded_source = ensure_vertex_normals(load_obj(final_obj))
            reloaded_target = ensure_vertex_normals(load_obj(target_obj))
            record.metrics = _case_metrics(
                reloaded_source, reloaded_target, case.prompt, config, eval_provider,
                voxel_resolution, eval_views, eval_resolution,
            )
            record.metrics["pose_error"] = _pose_error(pose, case.reference_pose, target_stats)
            (method_dir / "metrics.json").write_text(
                json.dumps(record.metrics, sort_keys=True) + "\n"
            )
            record.pose = pose
            record.artifacts = {
                "final_source": str(final_obj),
                "scene": str(scene_obj),
                "target": str(target_obj),
                "pose": str(method_dir / "pose.json"),
                "metrics": str(method_dir / "metrics.json"),
            }
            for path in record.artifacts.values():
                if not Path(path).exists():
                    raise OoalignError(f"artifact missing at record time: {path}")
            record.timings = {"load_s": load_s, "method_s": time.perf_counter() - t0}
            (method_dir / "record.json").write_text(
                json.dumps(record.to_json_dict(), sort_keys=True, default=str) + "\n"
            )
        except (OoalignError, OSError, ValueError) as exc:
            record.status = "failed"
            record.error = str(exc)
            logger.warning("case %s method %s failed: %s", case.id, method, exc)
        records.append(record)
    return records


def _method_ours(case, config, source, target, target_stats, perturbations, reference_scene):
    cfg = replace_config(config, mode=case.mode)
    cfg.init_poses = [p.compose(case.reference_pose) for p in perturbations]
    provider_factory = None
    if cfg.guidance == "silhouette":
        s_ref_stats = compute_stats(apply_pose(source, case.reference_pose))
        phase1_rig = RigSchedule(
            num_views=cfg.num_views,
            betas=(0.0,),
            distance_factors=(cfg.rig.distance_factors[0],),
        )
        cams = build_rig(target_stats, s_ref_stats, 1, phase1_rig, resolution=cfg.resolution)
        silhouettes = [render_soft(reference_scene, c, cfg.softness_temp).rgba[..., 3] for c in cams]
        cfg.fixed_cameras = cams
        provider_factory = lambda: SilhouetteProvider(silhouettes)  # noqa: E731
    result = run_alignment(source, target, GuidanceTarget.text(case.prompt), cfg, provider_factory)
    return result.best_pose, result


def _method_b2(case, source, target, perturbations, eval_provider, eval_views, eval_resolution):
    """Multi-start snap + semantic selection over the shared perturbations."""
    best_pose, best_score = None, -np.inf
    for perturb in perturbations:
        init = perturb.compose(case.reference_pose)
        posed = apply_pose(source, init)
        pose = snap_baseline(posed, target).compose(init)
        if best_pose is None:
            best_pose = pose
        scene = compose_scene(target, apply_pose(source, pose))
        report = semantic_eval(scene, GuidanceTarget.text(case.prompt), eval_provider,
                               num_views=eval_views, resolution=eval_resolution)
        score = report.mean_score if report.available else -np.inf
        if score > best_score:
            best_score, best_pose = score, pose
    return best_pose


def _stable_id(text: str) -> int:
    import hashlib

    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "big")


def replace_config(config: AlignConfig, **kwargs) -> AlignConfig:
    data = config.to_json_dict()
    data.update(kwargs)
    cfg = AlignConfig.from_json_dict(data)
    cfg.fixed_cameras = config.fixed_cameras
    cfg.init_poses = config.init_poses
    return cfg


def summarize(records: list[RunRecord]) -> list[dict]:
    """Per-method mean metrics over successful records."""
    methods = sorted({r.method for r in records})
    rows = []
    for method in methods:
        ok = [r for r in records if r.method == method and r.status == "ok"]
        failed = [r for r in records if r.method == method and r.status == "failed"]
        row = {
            "method": method,
            "cases_ok": len(ok),
            "cases_failed": len(failed),
            "semantic_mean": _mean(r.metrics["semantic"]["mean_score"] for r in ok),
            "intersection_mean": _mean(r.metrics["intersection"]["ratio"] for r in ok),
            "contact_mean": _mean(r.metrics["contact_fraction"] for r in ok),
            "translation_err_mean": _mean(r.metrics["pose_error"]["translation_rel"] for r in ok),
            "rotation_err_deg_mean": _mean(r.metrics["pose_error"]["rotation_deg"] for r in ok),
        }
        rows.append(row)
    return rows


def _mean(values) -> float:
    vals = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def write_summary_csv(rows: list[dict], path) -> None:
    import csv

    fieldnames = ["method", "cases_ok", "cases_failed", "semantic_mean",
                  "intersection_mean", "contact_mean", "translation_err_mean",
                  "rotation_err_deg_mean"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_benchmark(
    manifest_path,
    config: AlignConfig,
    out_dir,
    methods=DEFAULT_METHODS,
    voxel_resolution: int = 64,
    eval_views: int = 4,
    eval_resolution=(64, 64),
    workers: int = 1,
) -> tuple[list[RunRecord], list[dict]]:
    """Execute every manifest case; partial failures are recorded, not fatal."""
    cases = load_manifest(manifest_path)
    for case in cases:
        for path in (case.source_path, case.target_path):
            if not Path(path).exists():
                logger.warning("case %s references missing file %s", case.id, path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    records: list[RunRecord] = []
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [
                pool.submit(_run_case_isolated, case, config, out, methods,
                            voxel_resolution, eval_views, eval_resolution)
                for case in cases
            ]
            for fut in futs:
                records.extend(fut.result())
    else:
        for case in cases:
            records.extend(
                _run_case_isolated(case, config, out, methods, voxel_resolution,
                                   eval_views, eval_resolution)
            )
    rows = summarize(records)
    write_summary_csv(rows, out / "summary.csv")
    with open(out / "records.json", "w") as fh:
        json.dump([r.to_json_dict() for r in records], fh, sort_keys=True, indent=2, default=str)
    return records, rows


def _run_case_isolated(case, config, out, methods, voxel_resolution, eval_views, eval_resolution):
    try:
        return run_case(case, config, out, methods, voxel_resolution, eval_views, eval_resolution)
    except Exception as exc:  # noqa: BLE001 - case isolation contract
        logger.warning("case %s failed wholesale: %s", case.id, exc)
        return [RunRecord(case_id=case.id, method=m, status="failed", error=str(exc))
                for m in methods]


# ---------------------------------------------------------------------------
# iterative assembly
# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    stage_index: int
    prompt: str
    pose: PoseParams
    run: RunResult


def compose_iterative(
    stages: list[tuple[TriMesh, str]],
    config: AlignConfig,
    perturb: bool = False,
) -> tuple[TriMesh, list[StageResult]]:
    """Progressively place each mesh against the composition of its
    predecessors. Stage meshes arrive in reference arrangement; set
    ``perturb`` to draw protocol starting poses instead of aligned ones.

    A stage failure raises OptimizationError with partial results attached
    as ``exc.partial_results``.
    """
    if len(stages) < 2:
        raise OoalignError("iterative composition needs at least 2 stages")
    scene = ensure_vertex_normals(stages[0][0])
    results: list[StageResult] = []
    for k, (mesh, prompt) in enumerate(stages[1:], start=1):
        source = ensure_vertex_normals(mesh)
        cfg = replace_config(config)
        cfg.init_poses = config.init_poses
        provider_factory = None
        if cfg.guidance == "silhouette":
            t_stats = compute_stats(scene)
            s_stats = compute_stats(source)
            phase1_rig = RigSchedule(
                num_views=cfg.num_views, betas=(0.0,),
                distance_factors=(cfg.rig.distance_factors[0],),
            )
            cams = build_rig(t_stats, s_stats, 1, phase1_rig, resolution=cfg.resolution)
            gt_scene = compose_scene(scene, source)
            silhouettes = [render_soft(gt_scene, c, cfg.softness_temp).rgba[..., 3] for c in cams]
            cfg.fixed_cameras = cams
            provider_factory = lambda s=silhouettes: SilhouetteProvider(s)  # noqa: E731
        if cfg.init_poses is None:
            if perturb:
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, k]))
                s_stats = compute_stats(source)
                cfg.init_poses = [
                    random_initial_pose(rng, s_stats, cfg.mode, cfg.init)
                    for _ in range(cfg.num_restarts)
                ]
            else:
                cfg.init_poses = [PoseParams.identity()]  # meshes arrive aligned
        try:
            result = run_alignment(source, scene, GuidanceTarget.text(prompt), cfg, provider_factory)
        except OptimizationError as exc:
            exc.partial_results = (scene, results)
            raise
        results.append(StageResult(k, prompt, result.best_pose, result))
        scene = compose_scene(scene, apply_pose(source, result.best_pose))
    return scene, results
