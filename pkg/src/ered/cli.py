"""Command-line interface.

    ered degrade|restore|bench|verify|denoise --config <path> --seed <u64> --out <dir>

Exit codes: 0 success, 1 failed check or runtime error, 2 configuration
error, 3 divergence of the restoration loop.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .bench import ROW_FIELDS, TABLE_FIELDS, aggregate, plan_jobs, render_table, run_bench, worker_count, write_csv
from .config import (
    ConfigError,
    build_denoiser,
    build_model,
    build_prior,
    build_run_config,
    load_config,
    load_input,
    require,
)
from .ednz import ProtocolError, save_tensor
from .image import as_image, psnr, save_image, ssim
from .optim import DivergenceError, ered_run
from .verify import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
U64_MAX = 2**64 - 1

log = logging.getLogger("ered")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from err
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _dump(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _finite_or_none(v: float) -> float | None:
    return v if math.isfinite(v) else None


def _metrics(x: np.ndarray, ref: np.ndarray) -> dict[str, float]:
    out = {"psnr": psnr(x, ref)}
    try:
        out["ssim"] = ssim(x, ref)
    except ValueError:
        pass
    return out


def _manifest(command: str, args, cfg: dict, **extra) -> dict[str, Any]:
    return {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config_path": str(Path(args.config).resolve()) if args.config else None,
        "config": cfg,
        "seed": args.seed,
        **extra,
    }


# Commands -------------------------------------------------------------------


def cmd_degrade(args, cfg: dict, base_dir: Path, out: Path) -> int:
    x = load_input(require(cfg, "input"), base_dir)
    model = build_model(require(cfg, "model"), base_dir)
    t0 = time.perf_counter()
    try:
        y = model.degrade(x, np.random.default_rng(args.seed))
    except ValueError as err:
        raise ConfigError(f"degrade: {err}") from err
    bit_depth = int(cfg.get("bit_depth", 16))
    save_image(y, out / "observation.png", bit_depth)
    save_tensor(out / "observation.ednz", y)
    save_image(x, out / "ground_truth.png", bit_depth)
    save_tensor(out / "ground_truth.ednz", x)
    meta = _manifest(
        "degrade", args, cfg,
        model=model.to_dict(),
        outputs={"observation": "observation.png", "observation_exact": "observation.ednz",
                 "ground_truth": "ground_truth.png", "ground_truth_exact": "ground_truth.ednz"},
        wall_time=time.perf_counter() - t0,
        metrics=_metrics(y, x) if y.shape == x.shape else {},
    )
    _dump(meta, out / "observation.json")
    print(json.dumps({"observation": str(out / "observation.png"), **meta["metrics"]}))
    return EXIT_OK


def cmd_restore(args, cfg: dict, base_dir: Path, out: Path) -> int:
    y = load_input(require(cfg, "input"), base_dir)
    ref = load_input(cfg["reference"], base_dir) if "reference" in cfg else None
    model = build_model(require(cfg, "model"), base_dir)
    prior = build_prior(cfg.get("prior"), base_dir)
    with build_denoiser(require(cfg, "denoiser"), base_dir) as den:
        run_cfg = build_run_config(cfg.get("run", {}), den, args.seed)
        status, code = "ok", EXIT_OK
        try:
            trace = ered_run(run_cfg, model, y, prior=prior)
        except DivergenceError as err:
            trace, status, code = err.trace, "diverged", EXIT_DIVERGED
            log.error("%s", err)
        except ValueError as err:
            raise ConfigError(f"restore: {err}") from err
    trace.to_csv(out / "trace.csv")
    outputs = {"trace": "trace.csv"}
    if status == "ok":
        x = as_image(trace.x)
        save_image(x, out / "restored.png", int(cfg.get("bit_depth", 16)))
        save_tensor(out / "restored.ednz", x)
        outputs.update(restored="restored.png", restored_exact="restored.ednz")
    for k, snap in trace.snapshots.items():
        save_image(as_image(snap), out / f"snapshot_{k:06d}.png", 16)
    metrics: dict[str, Any] = {}
    if ref is not None:
        if status == "ok":
            metrics["restored"] = _metrics(trace.x, ref)
        if y.shape == ref.shape:
            metrics["observation"] = _metrics(y, ref)
    meta = _manifest(
        "restore", args, cfg,
        status=status,
        resolved={"run": run_cfg.describe(), "model": model.to_dict()},
        trace_metadata=trace.metadata,
        outputs=outputs,
        wall_time=trace.wall_time,
        metrics=metrics,
    )
    _dump(meta, out / "manifest.json")
    print(json.dumps({"status": status, **{k: v.get("psnr") for k, v in metrics.items()}}))
    return code


def cmd_bench(args, cfg: dict, base_dir: Path, out: Path) -> int:
    jobs = plan_jobs(cfg, base_dir, args.seed)
    workers = worker_count(len(jobs))
    t0 = time.perf_counter()
    rows = run_bench(jobs, workers)
    table = aggregate(rows)
    write_csv(rows, ROW_FIELDS, out / "rows.csv")
    write_csv(table, TABLE_FIELDS, out / "table.csv")
    text = render_table(table)
    (out / "table.txt").write_text(text)
    diverged = sum(r["status"] != "ok" for r in rows)
    _dump(
        _manifest("bench", args, cfg, jobs=len(jobs), workers=workers, diverged=diverged,
                  wall_time=time.perf_counter() - t0,
                  outputs={"rows": "rows.csv", "table": "table.csv", "table_text": "table.txt"}),
        out / "manifest.json",
    )
    sys.stdout.write(text)
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_verify(args, cfg: dict, base_dir: Path, out: Path) -> int:
    suite = args.suite or cfg.get("suite", "all")
    if suite != "all" and suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES) + ['all']}")
    reports = run_suite(suite, args.seed)
    docs = [r.to_dict() for r in reports]
    for d in docs:
        print(json.dumps(d))
    (out / "reports.jsonl").write_text("".join(json.dumps(d) + "\n" for d in docs))
    failed = [r.name for r in reports if r.hard and not r.passed]
    _dump(_manifest("verify", args, cfg, suite=suite, checks=len(reports), failed=failed),
          out / "manifest.json")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_denoise(args, cfg: dict, base_dir: Path, out: Path) -> int:
    x = load_input(require(cfg, "input"), base_dir)
    sigma = float(require(cfg, "sigma"))
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    noisy = x
    if cfg.get("add_noise", False):
        noisy = x + sigma * np.random.default_rng(args.seed).standard_normal(x.shape)
    t0 = time.perf_counter()
    with build_denoiser(require(cfg, "denoiser"), base_dir) as den:
        try:
            z = as_image(den(noisy, sigma))
        except ValueError as err:
            raise ConfigError(f"denoise: {err}") from err
    save_image(z, out / "denoised.png", int(cfg.get("bit_depth", 16)))
    save_tensor(out / "denoised.ednz", z, sigma)
    metrics = {"denoised": _metrics(z, x)}
    if cfg.get("add_noise", False):
        metrics["noisy"] = _metrics(noisy, x)
    _dump(_manifest("denoise", args, cfg, metrics=metrics, wall_time=time.perf_counter() - t0,
                    outputs={"denoised": "denoised.png", "denoised_exact": "denoised.ednz"}),
          out / "manifest.json")
    print(json.dumps({k: v["psnr"] for k, v in metrics.items()}))
    return EXIT_OK


COMMANDS = {
    "degrade": cmd_degrade,
    "restore": cmd_restore,
    "bench": cmd_bench,
    "verify": cmd_verify,
    "denoise": cmd_denoise,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ered", description="Equivariant regularization by denoising.")
    p.add_argument("--version", action="version", version=f"ered {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "verify":
            sp.add_argument("suite", nargs="?", help="suite name or 'all'")
        sp.add_argument("--config", required=name != "verify", help="JSON config file")
        sp.add_argument("--seed", type=_u64, default=0, help="unsigned 64-bit seed (default 0)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            cfg, base_dir = load_config(args.config)
        else:
            cfg, base_dir = {}, Path.cwd()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, base_dir, out)
    except ConfigError as err:
        print(f"ered: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, TimeoutError, OSError, RuntimeError) as err:
        print(f"ered: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
