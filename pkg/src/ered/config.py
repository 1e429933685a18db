"""JSON run configuration: parsing, validation and object construction.

Every problem with a config file (bad JSON, unknown keys, invalid values,
missing referenced files) surfaces as :class:`ConfigError`, which the CLI
maps to its own exit code.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .data import is_fixture, load_fixture
from .denoisers import Denoiser, make_denoiser
from .ednz import ProtocolError, load_tensor
from .forward import ForwardModel, make_model
from .gmm import GmmPrior
from .image import as_image, load_image
from .optim import EredRunConfig, SigmaSchedule, StepSchedule
from .transforms import TransformSpec

RUN_KEYS = {
    "lambda",
    "step",
    "sigma",
    "iterations",
    "transform",
    "x0",
    "trace_stride",
    "snapshot_stride",
    "positivity_floor",
    "n_mc",
}


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


def load_config(path: str | Path) -> tuple[dict[str, Any], Path]:
    """Read a JSON config; relative paths inside it resolve against its directory."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg, path.resolve().parent


def _resolve(path: str, base_dir: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base_dir is None else base_dir / p


def build_model(d: dict[str, Any], base_dir: Path | None = None) -> ForwardModel:
    try:
        d = dict(d)
        if d.get("sigma_y") == "inf":
            d["sigma_y"] = float("inf")
        return make_model(d, base_dir)
    except FileNotFoundError as err:
        raise ConfigError(f"kernel file not found: {err.filename or err}") from err
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"model: {err}") from err


def build_prior(d: dict[str, Any] | str | None, base_dir: Path | None = None) -> GmmPrior | None:
    if d is None:
        return None
    try:
        if isinstance(d, str):
            d = json.loads(_resolve(d, base_dir).read_text())
        return GmmPrior.from_dict(d)
    except FileNotFoundError as err:
        raise ConfigError(f"prior file not found: {d}") from err
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"prior: {err}") from err


def build_denoiser(d: dict[str, Any], base_dir: Path | None = None) -> Denoiser:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("denoiser must be an object with a 'kind'")
    d = dict(d)
    if "prior" in d:
        d["prior"] = build_prior(d["prior"], base_dir)
    try:
        return make_denoiser(d)
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"denoiser: {err}") from err


def build_transform(d: dict[str, Any] | str | None) -> TransformSpec:
    try:
        return TransformSpec.from_dict(d or "identity")
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"transform: {err}") from err


def _step(d: Any) -> StepSchedule:
    if isinstance(d, (int, float)):
        return StepSchedule("constant", float(d))
    return StepSchedule(**d)


def _sigma(d: Any) -> SigmaSchedule:
    if isinstance(d, (int, float)):
        return SigmaSchedule("constant", float(d))
    return SigmaSchedule(**d)


def build_run_config(d: dict[str, Any], denoiser: Denoiser, seed: int) -> EredRunConfig:
    """``run`` section to :class:`EredRunConfig`. ``step``/``sigma`` accept a number or an object."""
    unknown = set(d) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown run fields: {sorted(unknown)}")
    try:
        return EredRunConfig(
            denoiser,
            lam=float(d.get("lambda", 1.0)),
            step=_step(d.get("step", 1.0)),
            sigma=_sigma(d.get("sigma", 0.05)),
            iterations=int(d.get("iterations", 100)),
            transform=build_transform(d.get("transform")),
            seed=seed,
            x0=d.get("x0", "default"),
            trace_stride=int(d.get("trace_stride", 1)),
            snapshot_stride=int(d.get("snapshot_stride", 0)),
            positivity_floor=bool(d.get("positivity_floor", False)),
            n_mc=int(d.get("n_mc", 1)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"run: {err}") from err


def load_input(spec: str, base_dir: Path | None = None) -> np.ndarray:
    """Image from ``fixture:<name>``, an ``.ednz`` tensor file or a PNG/PGM/PPM file."""
    if not isinstance(spec, str):
        raise ConfigError("input must be a path or fixture name")
    try:
        if is_fixture(spec):
            return load_fixture(spec)
        path = _resolve(spec, base_dir)
        if path.suffix.lower() == ".ednz":
            return as_image(load_tensor(path))
        return load_image(path)
    except FileNotFoundError as err:
        raise ConfigError(f"input not found: {spec}") from err
    except (ValueError, ProtocolError) as err:
        raise ConfigError(f"input {spec}: {err}") from err


def require(cfg: dict[str, Any], key: str) -> Any:
    if key not in cfg:
        raise ConfigError(f"missing required field {key!r}")
    return cfg[key]
