"""Command-line interface.

Exit codes: 0 success, 2 invalid arguments (argparse), 3 guidance provider
unavailable, 4 optimization failure. Every command accepts --json for
machine-readable output and writes artifacts only under its --out directory.
Config precedence: flags > environment > --config file > defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ManifestError,
    MeshLoadError,
    OoalignError,
    OptimizationError,
    ScorerUnavailableError,
)
from .guidance import SCORER_ADDR_ENV, ExternalProvider, GuidanceTarget, make_provider
from .harness import (
    build_fixture_suite,
    compose_iterative,
    load_manifest,
    perturb_case,
    run_benchmark,
)
from .hparams import decide_hparams
from .mesh import (
    compute_stats,
    compute_vertex_normals,
    load_obj,
    remesh_subdivide,
    save_obj,
    upright_canonicalize,
)
from .metrics import contact_fraction, intersection_ratio, semantic_eval
from .optim import AlignConfig, run_alignment
from .pose import PoseParams, apply_pose, compose_scene

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_GUIDANCE = 3
EXIT_OPTIMIZATION = 4


def _load_config(args) -> AlignConfig:
    if getattr(args, "config", None):
        cfg = AlignConfig.from_json_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = AlignConfig()
    for flag, attr in (
        ("steps", "total_steps"),
        ("phases", "num_phases"),
        ("views", "num_views"),
        ("restarts", "num_restarts"),
        ("seed", "seed"),
        ("mode", "mode"),
        ("guidance", "guidance"),
        ("remesh", "remesh_target"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "phases", None) is not None:
        # re-derive per-phase defaults when the phase count changes on the CLI
        from .render import RigSchedule

        p = cfg.num_phases
        cfg.lambda_icp_per_phase = tuple(0.1 * 10**k for k in range(p))
        cfg.lambda_pen_per_phase = tuple(0.01 * 10**k for k in range(p))
        betas = tuple(k / max(p - 1, 1) for k in range(p))
        factors = tuple(2.0 - k * (1.0 / max(p - 1, 1)) for k in range(p))
        cfg.rig = RigSchedule(num_views=cfg.num_views, betas=betas, distance_factors=factors)
    cfg.__post_init__()
    return cfg


def _emit(payload: dict, args, human: str = "") -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    elif human:
        print(human)


def _preprocess(mesh, remesh_target, canonicalize=False):
    if canonicalize:
        mesh = upright_canonicalize(mesh)
    if remesh_target:
        mesh = remesh_subdivide(mesh, remesh_target)
    return compute_vertex_normals(mesh)


def cmd_align(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        source = load_obj(args.source)
        target = load_obj(args.target)
    except MeshLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if cfg.guidance == "external":
        try:
            probe = ExternalProvider(address=getattr(args, "scorer_addr", None))
            probe._connect()
            probe.close()
        except ScorerUnavailableError as exc:
            print(
                f"error: external scorer unavailable ({exc}); "
                f"set {SCORER_ADDR_ENV} or pass --scorer-addr",
                file=sys.stderr,
            )
            return EXIT_GUIDANCE

    source = _preprocess(source, cfg.remesh_target, args.canonicalize)
    target = _preprocess(target, cfg.remesh_target, args.canonicalize)

    if args.llm_hparams:
        decision = decide_hparams(source.name, target.name, args.prompt or "")
        from .hparams import apply_decision

        cfg = apply_decision(cfg, decision)
        (out / "hparams.json").write_text(json.dumps(decision.to_json_dict(), sort_keys=True) + "\n")

    if args.ref_image:
        from PIL import Image

        img = np.asarray(Image.open(args.ref_image).convert("RGB"), dtype=np.float64) / 255.0
        target_spec = GuidanceTarget.image(img)
    else:
        target_spec = GuidanceTarget.text(args.prompt)

    provider_factory = None
    if cfg.guidance == "silhouette":
        from .guidance import SilhouetteProvider
        from .render import RigSchedule, build_rig, render_soft

        t_stats = compute_stats(target)
        rig1 = RigSchedule(num_views=cfg.num_views, betas=(0.0,),
                           distance_factors=(cfg.rig.distance_factors[0],))
        cams = build_rig(t_stats, t_stats, 1, rig1, resolution=cfg.resolution)
        silhouettes = [render_soft(target, c, cfg.softness_temp).rgba[..., 3] for c in cams]
        cfg.fixed_cameras = cams
        provider_factory = lambda: SilhouetteProvider(silhouettes)  # noqa: E731

    try:
        result = run_alignment(source, target, target_spec, cfg, provider_factory)
    except OptimizationError as exc:
        print(f"error: optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    except ScorerUnavailableError as exc:
        print(f"error: scorer became unavailable ({exc}); check {SCORER_ADDR_ENV}", file=sys.stderr)
        return EXIT_GUIDANCE

    posed = apply_pose(source, result.best_pose)
    scene = compose_scene(target, posed)
    save_obj(posed, out / "final_source.obj")
    save_obj(scene, out / "scene.obj")
    (out / "pose.json").write_text(json.dumps(result.best_pose.to_json_dict(), sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg.to_json_dict(), sort_keys=True, indent=2) + "\n")
    with open(out / "steps.jsonl", "w") as fh:
        for record in result.all_step_records():
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    if args.dump_views:
        from .metrics import build_eval_cameras
        from .render import render_soft, save_view_png

        views_dir = out / "views"
        views_dir.mkdir(exist_ok=True)
        for i, cam in enumerate(build_eval_cameras(scene, num_views=cfg.num_views,
                                                   resolution=cfg.resolution)):
            save_view_png(render_soft(scene, cam), views_dir / f"view_{i:02d}.png")

    payload = {
        "pose": result.best_pose.to_json_dict(),
        "best_objective": result.best_objective,
        "restart_index": result.restart_index,
        "artifacts": {
            "final_source": str(out / "final_source.obj"),
            "scene": str(out / "scene.obj"),
            "pose": str(out / "pose.json"),
            "steps": str(out / "steps.jsonl"),
        },
    }
    _emit(payload, args, human=(
        f"alignment done: objective {result.best_objective:.6g} "
        f"(restart {result.restart_index}); artifacts in {out}"
    ))
    return EXIT_OK


def cmd_eval(args) -> int:
    payload: dict = {}
    lines = []
    if args.pair:
        a = load_obj(args.pair[0])
        b = load_obj(args.pair[1])
        report = intersection_ratio(a, b, resolution=args.resolution)
        eps = 0.01 * compute_stats(b).bbox_diagonal
        contact = contact_fraction(a, b, eps)
        payload["intersection"] = report.to_json_dict()
        payload["contact_fraction"] = contact
        payload["contact_epsilon"] = eps
        lines.append(f"{'metric':<24}{'value':>14}")
        lines.append(f"{'intersection_ratio':<24}{report.ratio:>14.6f}")
        lines.append(f"{'intersection_volume':<24}{report.intersection_volume:>14.6g}")
        lines.append(f"{'union_volume':<24}{report.union_volume:>14.6g}")
        lines.append(f"{'contact_fraction':<24}{contact:>14.6f}")
    if args.scene:
        scene = compute_vertex_normals(load_obj(args.scene))
        provider = make_provider(args.guidance or "null")
        report = semantic_eval(scene, GuidanceTarget.text(args.prompt or ""), provider,
                               num_views=args.views or 8)
        payload["semantic"] = report.to_json_dict()
        lines.append(f"{'semantic_mean':<24}{report.mean_score:>14.6f}")
    if not payload:
        print("error: pass --pair A B and/or --scene S", file=sys.stderr)
        return EXIT_USAGE
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("metric,value\n")
            for key in ("intersection", "contact_fraction", "semantic"):
                if key == "intersection" and key in payload:
                    fh.write(f"intersection_ratio,{payload[key]['ratio']!r}\n")
                elif key in payload and key == "contact_fraction":
                    fh.write(f"contact_fraction,{payload[key]!r}\n")
                elif key in payload and key == "semantic":
                    fh.write(f"semantic_mean,{payload[key]['mean_score']!r}\n")
    _emit(payload, args, human="\n".join(lines))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    methods = tuple(args.methods.split(",")) if args.methods else ("ours", "b1", "b2")
    try:
        records, rows = run_benchmark(
            args.manifest, cfg, args.out, methods=methods,
            voxel_resolution=args.resolution, workers=args.workers,
        )
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    payload = {"summary": rows, "records": len(records),
               "failed": sum(r.status == "failed" for r in records)}
    header = f"{'method':<8}{'ok':>4}{'fail':>6}{'semantic':>12}{'intersect':>12}{'contact':>10}"
    body = [
        f"{r['method']:<8}{r['cases_ok']:>4}{r['cases_failed']:>6}"
        f"{r['semantic_mean']:>12.4f}{r['intersection_mean']:>12.4f}{r['contact_mean']:>10.4f}"
        for r in rows
    ]
    _emit(payload, args, human="\n".join([header] + body))
    return EXIT_OK


def cmd_perturb(args) -> int:
    cases = {c.id: c for c in load_manifest(args.manifest)}
    if args.case not in cases:
        print(f"error: case '{args.case}' not in manifest", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed or 0)
    pose = perturb_case(cases[args.case], rng)
    payload = {"case": args.case, "seed": args.seed or 0, "pose": pose.to_json_dict()}
    _emit(payload, args, human=json.dumps(payload["pose"], sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.case}_perturb_{args.seed or 0}.json").write_text(
            json.dumps(payload, sort_keys=True) + "\n"
        )
    return EXIT_OK


def cmd_compose(args) -> int:
    cfg = _load_config(args)
    if len(args.stages) < 2:
        print("error: need at least 2 stage meshes", file=sys.stderr)
        return EXIT_USAGE
    prompts = args.prompts or []
    if len(prompts) < len(args.stages) - 1:
        prompts = prompts + [f"stage {k}" for k in range(len(prompts), len(args.stages) - 1)]
    stages = [(load_obj(args.stages[0]), "base")]
    for path, prompt in zip(args.stages[1:], prompts):
        stages.append((load_obj(path), prompt))
    if cfg.remesh_target:
        stages = [(remesh_subdivide(m, cfg.remesh_target), p) for m, p in stages]
    try:
        scene, results = compose_iterative(stages, cfg, perturb=args.perturb)
    except (OptimizationError, OoalignError) as exc:
        print(f"error: composition failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(scene, out / "composed.obj")
    stage_payload = [
        {"stage": r.stage_index, "prompt": r.prompt, "pose": r.pose.to_json_dict()}
        for r in results
    ]
    (out / "stages.json").write_text(json.dumps(stage_payload, sort_keys=True, indent=2) + "\n")
    _emit({"stages": stage_payload, "scene": str(out / "composed.obj")}, args,
          human=f"composed {len(args.stages)} meshes into {out / 'composed.obj'}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    manifest = build_fixture_suite(args.out, mode=args.mode or "rigid")
    _emit({"manifest": str(manifest)}, args, human=f"fixture suite written: {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ooalign",
                                     description="Mesh-to-mesh pose alignment by test-time optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--seed", type=int, default=None, help="master seed for all randomness")

    p = sub.add_parser("align", help="align a source mesh to a target mesh")
    add_common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--prompt", default="", help="text description of the arrangement")
    group.add_argument("--ref-image", help="reference image instead of a prompt")
    p.add_argument("--guidance", choices=["null", "silhouette", "external"], default=None)
    p.add_argument("--scorer-addr", help=f"external scorer host:port (or {SCORER_ADDR_ENV})")
    p.add_argument("--mode", choices=["rigid", "scaled"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--phases", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--remesh", type=int, default=None, help="target vertex count (0 disables)")
    p.add_argument("--canonicalize", action="store_true", help="PCA upright reorientation")
    p.add_argument("--llm-hparams", action="store_true", help="query the LLM hyperparameter policy")
    p.add_argument("--dump-views", action="store_true", help="write PNG renders of the result")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="metrics for a mesh pair or composed scene")
    add_common(p)
    p.add_argument("--pair", nargs=2, metavar=("SOURCE", "TARGET"))
    p.add_argument("--scene")
    p.add_argument("--prompt", default="")
    p.add_argument("--guidance", choices=["null", "silhouette", "external"], default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--resolution", type=int, default=128, help="voxel grid resolution")
    p.add_argument("--csv", help="also write metrics as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a benchmark manifest")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", help="comma-separated subset of ours,b1,b2")
    p.add_argument("--guidance", choices=["null", "silhouette", "external"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--remesh", type=int, default=None)
    p.add_argument("--resolution", type=int, default=64, help="voxel grid resolution")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("perturb", help="draw a protocol starting pose for a case")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("compose", help="iterative multi-object assembly")
    add_common(p)
    p.add_argument("--stages", nargs="+", required=True, help="mesh files, base first")
    p.add_argument("--prompts", nargs="*", help="one prompt per stage after the base")
    p.add_argument("--guidance", choices=["null", "silhouette", "external"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--remesh", type=int, default=None)
    p.add_argument("--perturb", action="store_true", help="start stages from protocol draws")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("fixtures", help="write the synthetic benchmark suite")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["rigid", "scaled"], default=None)
    p.set_defaults(func=cmd_fixtures)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestError, MeshLoadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScorerUnavailableError as exc:
        print(f"error: scorer unavailable ({exc}); check {SCORER_ADDR_ENV}", file=sys.stderr)
        return EXIT_GUIDANCE
    except OptimizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION


if __name__ == "__main__":
    sys.exit(main())
