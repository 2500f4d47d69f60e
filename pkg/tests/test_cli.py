import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ooalign import fixtures
from ooalign.cli import main
from ooalign.harness import build_fixture_suite
from ooalign.mesh import save_obj


@pytest.fixture
def toy_pair(tmp_path):
    target = fixtures.box((2.5, 0.2, 2.5), center=(0, -0.1, 0), name="plate")
    source = fixtures.box((0.7, 0.7, 0.7), center=(0, 0.35, 0), name="cube")
    t, s = tmp_path / "target.obj", tmp_path / "source.obj"
    save_obj(target, t)
    save_obj(source, s)
    return s, t


def fast_align_args(s, t, out, extra=()):
    return [
        "align", "--source", str(s), "--target", str(t), "--prompt", "a cube on a plate",
        "--guidance", "silhouette", "--steps", "10", "--phases", "1", "--views", "2",
        "--restarts", "1", "--remesh", "0", "--seed", "3", "--out", str(out), *extra,
    ]


def test_align_writes_artifacts(toy_pair, tmp_path, capsys):
    s, t = toy_pair
    out = tmp_path / "run"
    code = main(fast_align_args(s, t, out, extra=["--json"]))
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert "pose" in payload and "scale" in payload["pose"]
    assert (out / "pose.json").exists()
    assert (out / "final_source.obj").exists()
    assert (out / "scene.obj").exists()
    assert (out / "steps.jsonl").exists()
    pose = json.loads((out / "pose.json").read_text())
    assert set(pose) == {"tau", "quat", "scale"}


def test_align_missing_target_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["align", "--source", "x.obj", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_align_external_without_scorer_exit_3(toy_pair, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("OOALIGN_SCORER_ADDR", raising=False)
    s, t = toy_pair
    code = main([
        "align", "--source", str(s), "--target", str(t), "--prompt", "x",
        "--guidance", "external", "--out", str(tmp_path / "run"),
    ])
    assert code == 3
    assert "OOALIGN_SCORER_ADDR" in capsys.readouterr().err


def test_eval_identical_cubes(tmp_path, capsys):
    cube = fixtures.unit_cube()
    a, b = tmp_path / "a.obj", tmp_path / "b.obj"
    save_obj(cube, a)
    save_obj(cube, b)
    code = main(["eval", "--pair", str(a), str(b), "--resolution", "64", "--json"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert abs(payload["intersection"]["ratio"] - 1.0) <= 0.02


def test_eval_requires_input(capsys):
    code = main(["eval"])
    assert code == 2


def test_perturb_deterministic(tmp_path, capsys):
    manifest = build_fixture_suite(tmp_path / "suite")
    code = main(["perturb", "--manifest", str(manifest), "--case", "cube_on_plate",
                 "--seed", "9", "--json"])
    assert code == 0
    first = json.loads(capsys.readouterr().out)
    code = main(["perturb", "--manifest", str(manifest), "--case", "cube_on_plate",
                 "--seed", "9", "--json"])
    assert code == 0
    second = json.loads(capsys.readouterr().out)
    assert first == second


def test_perturb_unknown_case(tmp_path, capsys):
    manifest = build_fixture_suite(tmp_path / "suite")
    code = main(["perturb", "--manifest", str(manifest), "--case", "nope"])
    assert code == 2


def test_bench_fixture_subset(tmp_path, capsys):
    manifest = build_fixture_suite(tmp_path / "suite")
    # trim to two cases for speed
    data = json.loads(Path(manifest).read_text())
    data["cases"] = data["cases"][:2]
    manifest.write_text(json.dumps(data))
    out = tmp_path / "bench"
    code = main([
        "bench", "--manifest", str(manifest), "--out", str(out), "--methods", "b1",
        "--steps", "5", "--restarts", "1", "--remesh", "60", "--resolution", "32",
        "--seed", "0", "--json",
    ])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["records"] == 2
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("method,")
    assert len(summary) == 2  # header + b1 row


def test_compose_cli(tmp_path, capsys):
    base = fixtures.box((2.0, 0.3, 2.0), center=(0, 0.15, 0), name="base")
    mid = fixtures.box((1.2, 0.3, 1.2), center=(0, 0.45, 0), name="mid")
    paths = []
    for mesh in (base, mid):
        p = tmp_path / f"{mesh.name}.obj"
        save_obj(mesh, p)
        paths.append(str(p))
    out = tmp_path / "composed"
    code = main(["compose", "--stages", *paths, "--prompts", "mid on base",
                 "--guidance", "silhouette", "--steps", "6", "--restarts", "1",
                 "--remesh", "0", "--seed", "1", "--out", str(out), "--json"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["stages"]) == 1
    assert (out / "composed.obj").exists()


def test_fixtures_command(tmp_path, capsys):
    code = main(["fixtures", "--out", str(tmp_path / "fx"), "--json"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert Path(payload["manifest"]).exists()


def test_cli_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "ooalign.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "align" in proc.stdout


def test_json_payload_schema(toy_pair, tmp_path, capsys):
    import jsonschema

    s, t = toy_pair
    out = tmp_path / "run"
    main(fast_align_args(s, t, out, extra=["--json"]))
    payload = json.loads(capsys.readouterr().out)
    schema = {
        "type": "object",
        "required": ["pose", "best_objective", "restart_index", "artifacts"],
        "properties": {
            "pose": {
                "type": "object",
                "required": ["tau", "quat", "scale"],
                "properties": {
                    "tau": {"type": "array", "minItems": 3, "maxItems": 3},
                    "quat": {"type": "array", "minItems": 4, "maxItems": 4},
                    "scale": {"type": "number", "exclusiveMinimum": 0},
                },
            },
            "best_objective": {"type": "number"},
            "restart_index": {"type": "integer"},
            "artifacts": {"type": "object"},
        },
    }
    jsonschema.validate(payload, schema)


def test_config_file_precedence(toy_pair, tmp_path, capsys):
    from ooalign.optim import AlignConfig

    from ooalign.render import RigSchedule

    s, t = toy_pair
    cfg = AlignConfig(total_steps=4, num_phases=1, num_views=2, num_restarts=1,
                      guidance="null", lambda_clip=0.0,
                      lambda_icp_per_phase=(1.0,), lambda_pen_per_phase=(0.0,),
                      rig=RigSchedule(num_views=2, betas=(0.0,), distance_factors=(2.0,)))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_json_dict()))
    out = tmp_path / "run"
    # flag --steps 6 overrides the file's 4
    code = main(["align", "--source", str(s), "--target", str(t), "--prompt", "x",
                 "--config", str(cfg_path), "--steps", "6", "--remesh", "0",
                 "--out", str(out), "--json"])
    assert code == 0
    written = json.loads((out / "config.json").read_text())
    assert written["total_steps"] == 6
