"""Benchmark sweeps over images x kernels x methods.

Observations depend only on ``(seed, image, kernel)``, so every method sees
the same degraded input; run seeds are shared across methods as well. Jobs
run in a bounded process pool and results are reported in job order, which
keeps outputs independent of scheduling.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .config import ConfigError, build_denoiser, build_model, build_run_config, load_input, require
from .forward import make_kernel
from .image import psnr, ssim
from .optim import DivergenceError, ered_run

ROW_FIELDS = (
    "image",
    "kernel",
    "method",
    "status",
    "psnr",
    "ssim",
    "psnr_observation",
    "iterations",
    "wall_time",
    "degrade_seed",
    "run_seed",
)
TABLE_FIELDS = ("method", "psnr", "ssim", "N", "runs")
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")


@dataclass(frozen=True)
class BenchJob:
    index: int
    image_name: str
    image: np.ndarray
    kernel_name: str
    kernel: np.ndarray
    method: str
    model: dict[str, Any]
    denoiser: dict[str, Any]
    run: dict[str, Any]
    degrade_seed: int
    run_seed: int


def job_seed(seed: int, *key: int) -> int:
    """Independent 64-bit stream seed for a job key."""
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0])


def worker_count(n_jobs: int) -> int:
    """``ERED_THREADS`` if set, else the CPU count, never more than the job count."""
    env = os.environ.get("ERED_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as err:
            raise ConfigError(f"ERED_THREADS must be an integer, got {env!r}") from err
        if n < 1:
            raise ConfigError("ERED_THREADS must be at least 1")
    else:
        n = os.cpu_count() or 1
    return max(1, min(n, n_jobs))


def _images(cfg: dict[str, Any], base_dir: Path | None) -> list[tuple[str, np.ndarray]]:
    names: list[str] = list(cfg.get("images", []))
    if "corpus" in cfg:
        corpus = Path(cfg["corpus"])
        corpus = corpus if corpus.is_absolute() or base_dir is None else base_dir / corpus
        if not corpus.is_dir():
            raise ConfigError(f"corpus directory not found: {corpus}")
        names += sorted(str(p) for p in corpus.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not names:
        raise ConfigError("bench needs 'images' or a non-empty 'corpus'")
    return [(Path(n).stem if not n.startswith("fixture:") else n.split(":", 1)[1], load_input(n, base_dir))
            for n in names]


def plan_jobs(cfg: dict[str, Any], base_dir: Path | None, seed: int) -> list[BenchJob]:
    """Expand a bench config into one job per (image, kernel, method)."""
    bench = require(cfg, "bench")
    images = _images(bench, base_dir)
    kernels = bench.get("kernels", {"delta": {"kind": "delta"}})
    if not isinstance(kernels, dict) or not kernels:
        raise ConfigError("bench.kernels must be a non-empty object of name -> kernel")
    methods = require(bench, "methods")
    if not isinstance(methods, dict) or not methods:
        raise ConfigError("bench.methods must be a non-empty object of name -> run overrides")
    model = dict(cfg.get("model", {}))
    denoiser = require(cfg, "denoiser")
    run = dict(cfg.get("run", {}))
    try:
        kmats = {name: make_kernel(spec, base_dir) for name, spec in kernels.items()}
    except FileNotFoundError as err:
        raise ConfigError(f"kernel file not found: {err.filename or err}") from err
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"bench.kernels: {err}") from err
    jobs = []
    for i, (img_name, img) in enumerate(images):
        for j, (k_name, kmat) in enumerate(kmats.items()):
            for method, override in methods.items():
                override = dict(override)
                den = override.pop("denoiser", denoiser)
                jobs.append(
                    BenchJob(
                        len(jobs), img_name, img, k_name, kmat, method, model, den,
                        {**run, **override}, job_seed(seed, i, j, 0), job_seed(seed, i, j, 1),
                    )
                )
    # Validate every job's config up front so errors surface before any work starts.
    for job in jobs:
        build_model({**job.model, "kernel": job.kernel.tolist()})
        build_run_config(job.run, build_denoiser(job.denoiser, base_dir), job.run_seed).describe()
    return jobs


def run_job(job: BenchJob) -> dict[str, Any]:
    model = build_model({**job.model, "kernel": job.kernel.tolist()})
    y = model.degrade(job.image, np.random.default_rng(job.degrade_seed))
    row: dict[str, Any] = {
        "image": job.image_name,
        "kernel": job.kernel_name,
        "method": job.method,
        "degrade_seed": job.degrade_seed,
        "run_seed": job.run_seed,
        "psnr_observation": psnr(y, job.image) if y.shape == job.image.shape else math.nan,
    }
    with build_denoiser(job.denoiser) as den:
        cfg = build_run_config(job.run, den, job.run_seed)
        row["iterations"] = cfg.iterations
        try:
            trace = ered_run(cfg, model, y)
        except DivergenceError as err:
            return {**row, "status": "diverged", "psnr": math.nan, "ssim": math.nan,
                    "wall_time": err.trace.wall_time}
    x = trace.x
    return {**row, "status": "ok", "psnr": psnr(x, job.image), "ssim": ssim(x, job.image),
            "wall_time": trace.wall_time}


def run_bench(jobs: list[BenchJob], workers: int | None = None) -> list[dict[str, Any]]:
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_job, jobs))


def aggregate(rows: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Mean PSNR/SSIM per method (finished runs only), in first-appearance order."""
    order: list[str] = []
    for r in rows:
        if r["method"] not in order:
            order.append(r["method"])
    table = []
    for m in order:
        ok = [r for r in rows if r["method"] == m and r["status"] == "ok"]
        table.append({
            "method": m,
            "psnr": float(np.mean([r["psnr"] for r in ok])) if ok else math.nan,
            "ssim": float(np.mean([r["ssim"] for r in ok])) if ok else math.nan,
            "N": ok[0]["iterations"] if ok else math.nan,
            "runs": len(ok),
        })
    return table


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def write_csv(rows: list[dict[str, Any]], fields: tuple[str, ...], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def render_table(table: list[dict[str, Any]]) -> str:
    """Aligned text: one line per method with PSNR (dB), SSIM and iteration count."""
    header = ("Method", "PSNR", "SSIM", "N", "runs")
    body = [
        (t["method"], f"{t['psnr']:.2f}", f"{t['ssim']:.4f}", _fmt(t["N"]), str(t["runs"]))
        for t in table
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *body]]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
