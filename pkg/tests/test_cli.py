import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from ered.bench import aggregate, job_seed, plan_jobs, render_table, run_bench, worker_count
from ered.cli import main
from ered.ednz import load_tensor
from ered.image import load_image, psnr


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


DEBLUR = {"kind": "deblur", "kernel": {"kind": "gaussian", "size": 5, "std": 1.0}, "sigma_y": 0.02}
RUN = {"lambda": 0.2, "step": 1e-4, "sigma": 0.05, "iterations": 30, "transform": "flip"}


def test_degrade_then_restore(tmp_path):
    out = tmp_path / "deg"
    cfg = _write(tmp_path, {"input": "fixture:synthetic32", "model": DEBLUR})
    assert main(["degrade", "--config", cfg, "--seed", "5", "--out", str(out)]) == 0
    meta = json.loads((out / "observation.json").read_text())
    assert meta["seed"] == 5 and meta["metrics"]["psnr"] > 15
    y = load_tensor(out / "observation.ednz")
    x = load_tensor(out / "ground_truth.ednz")
    assert psnr(y, x) == pytest.approx(meta["metrics"]["psnr"], abs=1e-3)
    # PNG is 16-bit by default: quantization error below 1/131070 on in-range pixels
    png = load_image(out / "observation.png")
    inside = (y > 0) & (y < 1)
    assert np.max(np.abs(png - y)[inside]) <= 1 / 131070 + 1e-7

    rcfg = _write(tmp_path, {
        "input": str(out / "observation.ednz"), "reference": str(out / "ground_truth.ednz"),
        "model": DEBLUR, "denoiser": {"kind": "dct_threshold", "block": 4},
        "run": {**RUN, "snapshot_stride": 10},
    }, "restore.json")
    rout = tmp_path / "res"
    assert main(["restore", "--config", rcfg, "--seed", "1", "--out", str(rout)]) == 0
    manifest = json.loads((rout / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["resolved"]["run"]["transform"] == {"kind": "flip"}
    assert set(manifest["metrics"]) == {"restored", "observation"}
    with open(rout / "trace.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 30
    assert sorted(p.name for p in rout.glob("snapshot_*.png")) == [
        "snapshot_000000.png", "snapshot_000010.png", "snapshot_000020.png"]
    assert (rout / "restored.png").exists() and (rout / "restored.ednz").exists()


def test_restore_is_deterministic(tmp_path):
    cfg = _write(tmp_path, {"input": "fixture:synthetic32", "model": {**DEBLUR, "sigma_y": 0.05},
                            "denoiser": {"kind": "dct_threshold", "block": 4},
                            "run": {**RUN, "transform": "rot90"}})
    for d in ("a", "b"):
        assert main(["restore", "--config", cfg, "--seed", "7", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/trace.csv").read_bytes() == (tmp_path / "b/trace.csv").read_bytes()
    assert (tmp_path / "a/restored.ednz").read_bytes() == (tmp_path / "b/restored.ednz").read_bytes()


def test_restore_with_gmm_prior_logs_oracle(tmp_path):
    prior = {"weights": [0.5, 0.5], "means": [[1, 0, 0, 1], [0, 1, 1, 0]], "stds": [0.5, 0.5], "shape": [2, 2, 1]}
    (tmp_path / "prior.json").write_text(json.dumps(prior))
    y = tmp_path / "y.ednz"
    from ered.ednz import save_tensor
    save_tensor(y, np.array([[0.9, 0.1], [0.2, 0.8]]))
    cfg = _write(tmp_path, {"input": "y.ednz", "model": {"kind": "denoise", "sigma_y": 0.5},
                            "prior": "prior.json", "denoiser": {"kind": "gmm_oracle", "prior": "prior.json"},
                            "run": {"lambda": 1, "step": {"kind": "polynomial", "delta0": 0.05, "alpha": 0.75},
                                    "sigma": 0.3, "iterations": 50, "transform": "flip"}})
    assert main(["restore", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o/trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["grad_norm"] != "" for r in rows)


def test_restore_divergence_exit_code(tmp_path):
    cfg = _write(tmp_path, {"input": "fixture:synthetic32", "model": {"kind": "denoise", "sigma_y": 1.0},
                            "denoiser": {"kind": "linear_shrink", "c": 0.5},
                            "run": {"lambda": 1, "step": 1e3, "sigma": 1e-3, "iterations": 500}})
    with np.errstate(over="ignore", invalid="ignore"):
        assert main(["restore", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert json.loads((tmp_path / "o/manifest.json").read_text())["status"] == "diverged"
    assert (tmp_path / "o/trace.csv").exists()


@pytest.mark.parametrize("cfg", [
    "{not json",
    {"model": DEBLUR},
    {"input": "fixture:synthetic32", "model": {**DEBLUR, "kind": "inpaint"}},
    {"input": "fixture:nothing", "model": DEBLUR},
    {"input": "missing.png", "model": DEBLUR},
    {"input": "fixture:synthetic32", "model": {**DEBLUR, "kernel": "missing_kernel.txt"}},
])
def test_degrade_config_errors(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg))
    assert main(["degrade", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("run", [{"lambda": 1, "bogus": 2}, {"step": {"kind": "cosine"}}, {"iterations": 0},
                                 {"transform": "shear"}, {"sigma": -1}])
def test_restore_config_errors(tmp_path, run):
    cfg = _write(tmp_path, {"input": "fixture:synthetic32", "model": DEBLUR,
                            "denoiser": {"kind": "dct_threshold"}, "run": run})
    assert main(["restore", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_argument_errors(tmp_path, capsys):
    assert main(["restore", "--out", str(tmp_path)]) == 2
    assert main(["degrade", "--config", "x", "--seed", "-1", "--out", str(tmp_path)]) == 2
    assert main(["degrade", "--config", "x", "--seed", str(2**64), "--out", str(tmp_path)]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["verify", "nosuch", "--out", str(tmp_path)]) == 2


def test_missing_config_file(tmp_path):
    assert main(["degrade", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 2


def test_external_protocol_error_exit_code(tmp_path, wrong_dims_server):
    cfg = _write(tmp_path, {"input": "fixture:synthetic32", "sigma": 0.05,
                            "denoiser": {"kind": "external", "command": wrong_dims_server, "timeout": 30}})
    assert main(["denoise", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_denoise_command(tmp_path, echo_server):
    cfg = _write(tmp_path, {"input": "fixture:synthetic32", "sigma": 0.05, "add_noise": True,
                            "denoiser": {"kind": "dct_threshold", "block": 4}})
    assert main(["denoise", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o/manifest.json").read_text())["metrics"]
    assert m["denoised"]["psnr"] > m["noisy"]["psnr"]
    cfg = _write(tmp_path, {"input": "fixture:synthetic32", "sigma": 0.05,
                            "denoiser": {"kind": "external", "command": echo_server}}, "ext.json")
    assert main(["denoise", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e/manifest.json").read_text())["metrics"]
    assert m["denoised"]["psnr"] > 60  # float32 round trip only


def test_verify_command(tmp_path, capsys):
    assert main(["verify", "operators", "--seed", "2", "--out", str(tmp_path)]) == 0
    lines = [json.loads(ln) for ln in capsys.readouterr().out.splitlines()]
    assert lines[0]["name"] == "operators" and lines[0]["status"] == "pass"
    assert (tmp_path / "reports.jsonl").read_text().count("\n") == 1


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    from ered import cli
    from ered.verify import CheckReport
    monkeypatch.setattr(cli, "run_suite", lambda name, seed: [CheckReport("x", False, {}, {}, {})])
    assert main(["verify", "operators", "--out", str(tmp_path)]) == 1


def test_console_script(tmp_path):
    exe = shutil.which("ered")
    cmd = [exe] if exe else [sys.executable, "-m", "ered.cli"]
    res = subprocess.run([*cmd, "verify", "lipschitz", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert len(res.stdout.splitlines()) == 4


# Bench -----------------------------------------------------------------------

BENCH = {
    "model": {"kind": "deblur", "sigma_y": 0.02},
    "denoiser": {"kind": "dct_threshold", "block": 4},
    "run": {"lambda": 0.2, "step": 1e-4, "sigma": 0.05, "iterations": 15},
    "bench": {
        "images": ["fixture:synthetic32"],
        "kernels": {"g5": {"kind": "gaussian", "size": 5, "std": 1.0}, "box3": {"kind": "box", "size": 3}},
        "methods": {"RED": {"transform": "identity"}, "ERED-flip": {"transform": "flip"}},
    },
}


def test_job_seeds_are_distinct_and_stable():
    seeds = {job_seed(0, i, j, r) for i in range(3) for j in range(3) for r in range(2)}
    assert len(seeds) == 18
    assert job_seed(0, 1, 2, 0) == job_seed(0, 1, 2, 0) != job_seed(1, 1, 2, 0)


def test_plan_shares_observations_across_methods():
    jobs = plan_jobs(BENCH, None, 11)
    assert len(jobs) == 4
    by_kernel = {}
    for j in jobs:
        by_kernel.setdefault(j.kernel_name, set()).add((j.degrade_seed, j.run_seed))
    assert all(len(v) == 1 for v in by_kernel.values())


def test_worker_count(monkeypatch):
    monkeypatch.setenv("ERED_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2
    monkeypatch.setenv("ERED_THREADS", "zero")
    with pytest.raises(ValueError):
        worker_count(4)


def test_bench_independent_of_worker_count():
    jobs = plan_jobs(BENCH, None, 4)
    serial = run_bench(jobs, 1)
    parallel = run_bench(jobs, 2)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    assert strip(serial) == strip(parallel)
    table = aggregate(serial)
    assert [t["method"] for t in table] == ["RED", "ERED-flip"]
    assert all(t["runs"] == 2 and t["N"] == 15 for t in table)
    text = render_table(table)
    assert text.splitlines()[0].split() == ["Method", "PSNR", "SSIM", "N", "runs"]


def test_bench_command(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ERED_THREADS", "1")
    cfg = _write(tmp_path, BENCH)
    assert main(["bench", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    with open(tmp_path / "b/rows.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and {r["status"] for r in rows} == {"ok"}
    assert "ERED-flip" in capsys.readouterr().out


def test_bench_corpus_and_errors(tmp_path):
    from ered.data import synthetic_image
    from ered.image import save_image
    (tmp_path / "corpus").mkdir()
    save_image(synthetic_image(32), tmp_path / "corpus/a.png")
    cfg = {**BENCH, "bench": {**BENCH["bench"], "images": [], "corpus": "corpus"}}
    assert len(plan_jobs(cfg, tmp_path, 0)) == 4
    bad = {**BENCH, "bench": {**BENCH["bench"], "methods": {}}}
    assert main(["bench", "--config", _write(tmp_path, bad), "--out", str(tmp_path / "o")]) == 2
    bad = {**BENCH, "bench": {**BENCH["bench"], "kernels": {"k": "nofile.txt"}}}
    assert main(["bench", "--config", _write(tmp_path, bad), "--out", str(tmp_path / "o")]) == 2


def test_shipped_configs_are_valid(tmp_path):
    from pathlib import Path

    from ered.config import build_denoiser, build_model, build_run_config, load_config

    root = Path(__file__).resolve().parent.parent / "configs"
    names = sorted(p.name for p in root.glob("*.json"))
    assert {"bench.json", "degrade.json", "denoise.json", "restore.json"} <= set(names)
    for name in names:
        cfg, base = load_config(root / name)
        if "model" in cfg and "kernel" in cfg["model"]:
            build_model(cfg["model"], base)
        if "run" in cfg:
            build_run_config(cfg["run"], build_denoiser(cfg["denoiser"], base), 0)
    assert len(plan_jobs(load_config(root / "bench.json")[0], root, 0)) == 10
