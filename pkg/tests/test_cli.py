import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from advcamo import cli
from advcamo.evaluation import write_external_manifest
from advcamo.optimizer import OptimizationTrace
from advcamo.pattern import PatternParams, load_params, save_params
from advcamo.report import read_tsv

from oracles import band_period


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def only_run(out, command):
    (path,) = sorted(out.glob(f"{command}-*"))
    return path


def tree_digest(root, skip=("thresholds.json",)):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and "runs" not in p.relative_to(root).parts and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def params_file(tmp_path):
    path = tmp_path / "stripes.json"
    save_params(PatternParams("stripes", 0.25, 0.0, ((220, 30, 30), (30, 30, 220))), path)
    return path


def test_calibrate_is_idempotent(toy_root, toy_config, tmp_path):
    sidecar = toy_root / "models" / "thresholds.json"
    before = sidecar.read_bytes()
    assert run("calibrate", "--config", toy_config, "--out", tmp_path) == 0
    assert run("calibrate", "--config", toy_config, "--out", tmp_path) == 0
    assert sidecar.read_bytes() == before
    a, b = sorted(tmp_path.glob("calibrate-*"))
    assert (a / "thresholds.json").read_bytes() == (b / "thresholds.json").read_bytes()
    header, rows = read_tsv(a / "calibration.tsv")
    assert [r[0] for r in rows] == ["toy", "toy1"] and all(r[-1] == "ok" for r in rows)


def test_missing_registry_is_config_error(toy_root, tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(f"dataset: {toy_root / 'data' / 'manifest.jsonl'}\nregistry: {tmp_path / 'nowhere.yaml'}\n")
    assert run("calibrate", "--config", cfg, "--out", tmp_path) == 2
    assert "nowhere.yaml" in capsys.readouterr().err


def test_argparse_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        run("optimize", "--family", "hexagons")
    assert exc.value.code == 2


def test_dry_run_writes_nothing(toy_config, tmp_path, capsys):
    assert run("optimize", "--config", toy_config, "--out", tmp_path, "--restarts", 3, "--dry-run") == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["command"] == "optimize" and len(plan["steps"]) == 3
    assert list(tmp_path.iterdir()) == []


def test_optimize_zero_iterations(toy_config, tmp_path):
    out = tmp_path / "o"
    assert run("optimize", "--config", toy_config, "--out", out, "--restarts", 1, "--jobs", 1, "--max-iterations", 0) == 0
    d = only_run(out, "optimize")
    trace = OptimizationTrace.read(d / "trace_0.jsonl")
    assert len(trace.iterations) == 1 and trace.best_index == 0
    for name in ("best.json", "best.png", "trace.png", "restarts.tsv", "report.txt", "config.json"):
        assert (d / name).exists(), name


def test_optimize_same_seed_same_result(toy_config, tmp_path):
    args = ["optimize", "--config", toy_config, "--restarts", 1, "--jobs", 1, "--max-iterations", 6, "--seed", 5]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    a, b = only_run(tmp_path / "a", "optimize"), only_run(tmp_path / "b", "optimize")
    assert (a / "best.json").read_bytes() == (b / "best.json").read_bytes()
    assert (a / "trace_0.jsonl").read_bytes() == (b / "trace_0.jsonl").read_bytes()


def test_optimize_picks_best_restart(toy_config, tmp_path, capsys):
    out = tmp_path / "o"
    code = run("optimize", "--config", toy_config, "--out", out, "--restarts", 2, "--jobs", 1, "--max-iterations", 8)
    assert code == 0
    summary = capsys.readouterr().out
    d = only_run(out, "optimize")
    _, rows = read_tsv(d / "restarts.tsv")
    accs = [float(r[-1]) for r in rows]
    best = json.loads(summary[summary.index("{\n") : summary.rindex("}") + 1])
    assert best["accuracy"] <= min(accs) + 5e-4  # the TSV rounds to 3 decimals
    k = best["best_restart"]
    assert load_params(d / "best.json") == load_params(d / f"best_{k}.json")


def test_render_pattern_period(params_file, tmp_path):
    out = tmp_path / "p.png"
    assert run("render-pattern", params_file, "--output", out) == 0
    img = np.asarray(Image.open(out), dtype=np.float64)
    assert img.shape == (112, 112, 3)
    assert band_period(img, 0.0) == pytest.approx(0.25 * 112, abs=1.0)


def test_transfer_matrix_single_cell(toy_config, params_file, tmp_path):
    assert run("transfer-matrix", "--config", toy_config, "--out", tmp_path, "--pattern", f"toy={params_file}", "--models", "toy") == 0
    d = only_run(tmp_path, "transfer-matrix")
    header, rows = read_tsv(d / "transfer_unconstrained.tsv")
    assert header == ["optimization", "toy/stripes"]
    assert len(rows) == 1 and 0 <= float(rows[0][1]) <= 1


def test_ingest_empty_manifest(toy_config, tmp_path):
    write_external_manifest([], tmp_path / "ext.jsonl")
    assert run("ingest", "--config", toy_config, "--out", tmp_path / "o", "--manifest", tmp_path / "ext.jsonl") == 0
    d = only_run(tmp_path / "o", "ingest")
    header, rows = read_tsv(d / "external.tsv")
    assert header[:3] == ["pattern", "stage", "attributes"] and rows == []


def test_commands_leave_inputs_untouched(toy_root, toy_config, params_file, tmp_path):
    before = tree_digest(toy_root)
    params_before = params_file.read_bytes()
    out = tmp_path / "o"
    assert run("evaluate", "--config", toy_config, "--out", out, f"s={params_file}") == 0
    assert run("neighborhood", "--config", toy_config, "--out", out, params_file, "--n-neighbors", 2) == 0
    assert run("random-baseline", "--config", toy_config, "--out", out, "--n-patterns", 2, "--n-identities", 5) == 0
    assert tree_digest(toy_root) == before
    assert params_file.read_bytes() == params_before
    ev = only_run(out, "evaluate")
    _, rows = read_tsv(ev / "accuracy.tsv")
    assert [r[0] for r in rows] == ["toy", "toy1"]
    assert list((ev / "figures").glob("*.png"))
    assert (only_run(out, "random-baseline") / "random_baseline.png").exists()
    assert "pixel and degree units" in (only_run(out, "neighborhood") / "report.txt").read_text()


def test_ingest_with_simulated_comparison(toy_ctx, toy_config, params_file, tmp_path):
    from advcamo.evaluation import ExternalRecord
    from advcamo.face import blend_arrays
    from advcamo.pattern import rasterize

    pat = rasterize(load_params(params_file), 112, 112).pixels
    (tmp_path / "ext").mkdir()
    recs = []
    for ident, s in list(toy_ctx.splits.items())[:4]:
        probe = s.holdout[0]
        img = blend_arrays(probe.image, probe.mask, pat, 0.4)
        Image.fromarray(np.rint(img * 255).astype(np.uint8)).save(tmp_path / "ext" / f"{ident}.png")
        recs.append(ExternalRecord(f"ext/{ident}.png", ident, "p1", "generated", {"glasses": False}))
    write_external_manifest(recs, tmp_path / "ext.jsonl")
    out = tmp_path / "o"
    code = run("ingest", "--config", toy_config, "--out", out, "--manifest", tmp_path / "ext.jsonl", "--simulated", f"p1={params_file}")
    assert code == 0
    d = only_run(out, "ingest")
    _, rows = read_tsv(d / "external.tsv")
    assert [r[:3] for r in rows] == [["p1", "generated", "glasses=False"]] and rows[0][-1] == "8"
    _, rows = read_tsv(d / "simulated_average.tsv")
    assert rows[0][0] == "p1" and rows[0][2] == "2"
    assert (d / "ttest.tsv").exists()
    assert "optimization-stage models" in (d / "report.txt").read_text()
