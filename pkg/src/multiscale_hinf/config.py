"""TOML model descriptions and experiment configurations.

Both formats reject unknown keys.  See README.md for the full schemas.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import PARAM_NAMES, GameWeights, MultiscaleModel, NodeParams, NoiseSpec, uniform_model
from .tree import NodeId, TreeTopology

SOURCES = ("step", "image", "simulate")
SCENARIOS = ("step1d", "image2d", "gamma_sweep", "missing_stage", "steady_state")
FILTER_CHOICES = ("predictor_hinf", "current_hinf", "kalman", "all")


class ConfigError(ValueError):
    pass


def _check_keys(table: dict, allowed, where: str):
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _matrix(value, shape: tuple[int, int] | None, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        if shape is None:
            raise ConfigError(f"{name}: flat lists need a [dims] table to be reshaped")
        if arr.size != shape[0] * shape[1]:
            raise ConfigError(f"{name}: {arr.size} entries cannot fill a {shape[0]}x{shape[1]} matrix")
        return arr.reshape(shape)
    if arr.ndim != 2:
        raise ConfigError(f"{name}: expected a matrix")
    return arr


def _load_toml(path: str | Path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class ModelFile:
    model: MultiscaleModel
    noise: NoiseSpec
    seed: int | None = None
    missing_stages: tuple[int, ...] = ()


_MODEL_SECTIONS = ("topology", "dims", "defaults", "node", "weights", "noise", "run")


def parse_model(data: dict, where: str = "model file") -> ModelFile:
    """Build a model from an already-parsed TOML document."""
    _check_keys(data, _MODEL_SECTIONS, where)
    for required in ("topology", "defaults", "weights"):
        if required not in data:
            raise ConfigError(f"{where}: missing [{required}] table")
    topo_t = data["topology"]
    _check_keys(topo_t, ("depth", "arity"), f"{where} [topology]")
    try:
        topology = TreeTopology(int(topo_t["depth"]), int(topo_t.get("arity", 2)))
    except KeyError:
        raise ConfigError(f"{where}: [topology] needs depth") from None

    dims_t = data.get("dims", {})
    _check_keys(dims_t, "npqr", f"{where} [dims]")
    shapes = None
    if dims_t:
        try:
            n, p, q, r = (int(dims_t[k]) for k in "npqr")
        except KeyError as exc:
            raise ConfigError(f"{where}: [dims] needs all of n, p, q, r") from exc
        shapes = {"A": (n, n), "B": (n, q), "C": (p, n), "L": (r, n), "Q": (r, r), "R": (p, p)}

    def params_from(table: dict, base: NodeParams | None, label: str) -> NodeParams:
        mats = {}
        for name in PARAM_NAMES:
            if name in table:
                mats[name] = _matrix(table[name], shapes and shapes[name], f"{label}.{name}")
            elif base is not None:
                mats[name] = getattr(base, name)
            else:
                raise ConfigError(f"{label}: missing matrix {name}")
        try:
            return NodeParams(**mats)
        except ValueError as exc:
            raise ConfigError(f"{label}: {exc}") from None

    defaults_t = data["defaults"]
    _check_keys(defaults_t, PARAM_NAMES, f"{where} [defaults]")
    defaults = params_from(defaults_t, None, "defaults")

    w_t = data["weights"]
    _check_keys(w_t, ("gamma", "prior_mean", "prior_cov"), f"{where} [weights]")
    n = defaults.dims[0]
    try:
        weights = GameWeights(
            float(w_t.get("gamma", 1.0)),
            np.array(w_t.get("prior_mean", [0.0] * n), dtype=float).reshape(-1),
            _matrix(w_t.get("prior_cov", np.eye(n).tolist()), (n, n), "prior_cov"),
        )
    except ValueError as exc:
        raise ConfigError(f"{where} [weights]: {exc}") from None

    overrides = data.get("node", [])
    try:
        if overrides:
            params = {nd: defaults for nd in topology.level_order()}
            for i, entry in enumerate(overrides):
                _check_keys(entry, ("level", "index") + PARAM_NAMES, f"{where} [[node]] #{i + 1}")
                nd = NodeId(int(entry["level"]), int(entry["index"]))
                if not topology.contains(nd):
                    raise ConfigError(f"[[node]] #{i + 1}: node {nd} not in tree")
                params[nd] = params_from(entry, defaults, f"node {nd}")
            model = MultiscaleModel.from_node_params(topology, params, weights)
        else:
            model = uniform_model(topology, defaults, weights)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None

    noise_t = data.get("noise", {})
    _check_keys(noise_t, ("process_var", "measurement_var"), f"{where} [noise]")
    noise = NoiseSpec(noise_t.get("process_var", 1.0), noise_t.get("measurement_var", 0.02))

    run_t = data.get("run", {})
    _check_keys(run_t, ("seed", "missing_stages"), f"{where} [run]")
    return ModelFile(model, noise, run_t.get("seed"), tuple(int(s) for s in run_t.get("missing_stages", ())))


def load_model(path: str | Path) -> ModelFile:
    return parse_model(_load_toml(path), str(path))


@dataclass
class ExperimentConfig:
    scenario: str
    model: str | None = None
    gamma: float | str = "auto"
    process_var: float = 0.01
    measurement_var: float = 0.02
    prior_mean: float = 0.5
    prior_var: float = 1.0
    q_weight: float = 1.0
    seed: int | None = None
    missing_stages: list[int] = field(default_factory=list)
    filter: str = "all"
    output: str = "results"
    depth: int | None = None
    breakpoints: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    values: list[float] = field(default_factory=lambda: [0.2, 0.7, 0.4, 0.9])
    image: str | None = None
    source: str | None = None
    gamma_grid: list[float] = field(default_factory=list)
    gamma_lo: float = 1e-6
    gamma_hi: float = 1e6
    gamma_tol: float = 1e-4
    auto_factor: float = 0.9

    def validate(self, base_dir: Path | None = None) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.filter not in FILTER_CHOICES:
            raise ConfigError(f"unknown filter {self.filter!r}; choose from {', '.join(FILTER_CHOICES)}")
        if isinstance(self.gamma, str):
            if self.gamma != "auto":
                try:
                    self.gamma = float(self.gamma)
                except ValueError:
                    raise ConfigError(f"gamma must be a number or 'auto', got {self.gamma!r}") from None
        if not isinstance(self.gamma, str) and not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not self.gamma_lo < self.gamma_hi:
            raise ConfigError("gamma_lo must be below gamma_hi")
        if not 0 < self.auto_factor <= 1:
            raise ConfigError("auto_factor must lie in (0, 1]")
        if self.process_var < 0 or self.measurement_var <= 0 or self.prior_var <= 0:
            raise ConfigError("variances must be positive (process_var may be zero)")
        if self.scenario == "image2d" and not self.image:
            raise ConfigError("image2d requires an 'image' path (PGM or PPM)")
        if self.source is None:
            self.source = "image" if self.image else "step"
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}; choose from {', '.join(SOURCES)}")
        if self.scenario == "image2d" and self.source != "image":
            raise ConfigError("image2d always uses the image source")
        if self.source == "image" and not self.image:
            raise ConfigError("source 'image' requires an 'image' path")
        if self.seed is not None and (isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0):
            raise ConfigError("seed must be a non-negative integer")
        if self.scenario == "gamma_sweep":
            if not self.gamma_grid:
                raise ConfigError("gamma_sweep requires a non-empty 'gamma_grid'")
            if any(not g > 0 for g in self.gamma_grid):
                raise ConfigError("gamma_grid entries must be positive")
        if self.scenario == "missing_stage" and not self.missing_stages:
            self.missing_stages = [4]
        if self.depth is not None and self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if base_dir is not None:
            for key in ("model", "image"):
                val = getattr(self, key)
                if val is not None and not Path(val).is_absolute():
                    setattr(self, key, str(base_dir / val))
        for key in ("model", "image"):
            val = getattr(self, key)
            if val is not None and not Path(val).is_file():
                raise ConfigError(f"{key} file not found: {val}")
        return self

    def echo(self) -> dict[str, Any]:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


_CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def config_from_dict(data: dict, scenario: str | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    _check_keys(data, _CONFIG_KEYS, "experiment config")
    data = dict(data)
    if scenario is not None:
        if data.get("scenario", scenario) != scenario:
            raise ConfigError(f"config is for scenario {data['scenario']!r}, not {scenario!r}")
        data["scenario"] = scenario
    if "scenario" not in data:
        raise ConfigError("experiment config needs a 'scenario'")
    return ExperimentConfig(**data).validate(base_dir)


def load_config(path: str | Path | None, scenario: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    data = _load_toml(path) if path is not None else {}
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = Path(path).resolve().parent if path is not None else None
    return config_from_dict(data, scenario, base)
