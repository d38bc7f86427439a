"""Experiment runner: ``multiscale-hinf <scenario> [--config PATH] ...``.

Every run builds its artifacts in memory, writes them into a staging
directory next to the output directory and moves them into place only once
all of them exist, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import FILTER_CHOICES, SCENARIOS, ConfigError, ExperimentConfig, load_config, load_model
from .filters import (
    FilterReport,
    covariance_pass,
    estimation_cost,
    max_gamma_current,
    run_current_hinf,
    run_kalman,
    run_predictor_hinf,
)
from .metrics import (
    METRICS_HEADER,
    attenuation_holds,
    channel_metrics_rows,
    confidence_bounds,
    fmt,
    game_objective,
    report_snr,
    write_csv,
)
from .model import MultiscaleModel, NoiseSpec, TreeSignal, experiment_model, gaussian_draws, simulate
from .pnm import PNMError, encode_pnm, from_unit, read_pnm, to_unit
from .pyramid import ImagePlane, build_pyramid, level_to_plane, pyramid_to_observations, step_signal
from .riccati import InfeasibleGammaError, max_gamma, observed_masks, sweep
from .tree import TreeTopology

log = logging.getLogger("multiscale_hinf")

HINF_FILTERS = ("predictor_hinf", "current_hinf")
DEFAULT_DEPTH = {"step1d": 5, "missing_stage": 6, "gamma_sweep": 5, "steady_state": 30}
SWEEP_HEADER = ("kind", "filter", "gamma", "feasible", "total_cost", "min_snr_db")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3


class RunError(RuntimeError):
    pass


@dataclass
class Problem:
    """Model, noise and (optionally) observed channels for one run."""

    model: MultiscaleModel
    noise: NoiseSpec
    seed: int
    missing: tuple[int, ...]
    signals: list[TreeSignal] = field(default_factory=list)
    image_shape: tuple[int, ...] | None = None


def selected_filters(choice: str) -> list[str]:
    return ["predictor_hinf", "current_hinf", "kalman"] if choice == "all" else [choice]


# ---------------------------------------------------------------- setup


def _load_image(path: str) -> np.ndarray:
    try:
        img = read_pnm(path)
    except PNMError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    h, w = img.shape[:2]
    if h != w or w & (w - 1):
        raise ConfigError(f"{path}: image must be square with a power-of-two side, got {w}x{h}")
    return img


def _build_problem(cfg: ExperimentConfig) -> Problem:
    image = _load_image(cfg.image) if cfg.source == "image" else None
    if image is not None:
        side = image.shape[0]
        topology = TreeTopology(side.bit_length() - 1, 4)
    else:
        topology = TreeTopology(cfg.depth or DEFAULT_DEPTH[cfg.scenario], 2)

    seed, missing = cfg.seed, tuple(cfg.missing_stages)
    if cfg.model is not None:
        mf = load_model(cfg.model)
        model, noise = mf.model, mf.noise
        if image is not None and model.topology != topology:
            raise ConfigError(f"model tree {model.topology} does not fit a {image.shape[0]}-pixel image")
        if cfg.depth is not None and cfg.depth != model.topology.depth:
            raise ConfigError(f"config depth {cfg.depth} conflicts with model depth {model.topology.depth}")
        if cfg.source == "step" and model.topology.arity != 2:
            raise ConfigError("the step source needs a dyadic (arity 2) model")
        if seed is None:
            seed = mf.seed
        if not missing:
            missing = mf.missing_stages
    else:
        model, noise = experiment_model(
            topology,
            process_var=cfg.process_var,
            measurement_var=cfg.measurement_var,
            prior_mean=cfg.prior_mean,
            prior_var=cfg.prior_var,
            q_weight=cfg.q_weight,
        )
    seed = 0 if seed is None else int(seed)
    bad = [s for s in missing if not 0 <= s <= model.topology.depth]
    if bad:
        raise ConfigError(f"missing stage(s) {bad} outside levels 0..{model.topology.depth}")
    problem = Problem(model, noise, seed, tuple(sorted(set(missing))))
    if cfg.scenario != "steady_state":
        problem.signals = _signals(cfg, problem, image)
        if image is not None:
            problem.image_shape = image.shape
    return problem


def _signals(cfg: ExperimentConfig, pb: Problem, image: np.ndarray | None) -> list[TreeSignal]:
    model = pb.model
    if cfg.source == "image":
        planes = [image] if image.ndim == 2 else [image[..., c] for c in range(image.shape[2])]
        return [
            pyramid_to_observations(build_pyramid(ImagePlane(to_unit(pl))), model, pb.noise, pb.seed + c, pb.missing)
            for c, pl in enumerate(planes)
        ]
    if cfg.source == "step":
        try:
            stack = step_signal(model.topology.depth, cfg.breakpoints, cfg.values)
        except ValueError as exc:
            raise ConfigError(f"step signal: {exc}") from None
        return [pyramid_to_observations(stack, model, pb.noise, pb.seed, pb.missing)]
    # root state drawn from the prior on a stream separate from the noise draws
    w0 = model.weights
    root = w0.prior_mean + gaussian_draws(np.random.default_rng([pb.seed, 1]), w0.prior_cov, 1)[0]
    sig = simulate(model, root, pb.noise, pb.seed)
    return [sig.without_observations(levels=pb.missing) if pb.missing else sig]


def _observed(pb: Problem) -> list:
    if pb.signals:
        return observed_masks(pb.model.topology, signal=pb.signals[0])
    return observed_masks(pb.model.topology, pb.missing)


def _max_gamma(name: str, pb: Problem, cfg: ExperimentConfig, observed) -> float:
    fn = max_gamma if name == "predictor_hinf" else max_gamma_current
    try:
        return fn(pb.model, cfg.gamma_lo, cfg.gamma_hi, cfg.gamma_tol, observed)
    except ValueError as exc:
        raise RunError(f"{name}: cannot bracket the largest feasible gamma: {exc}") from None


def _resolve_gammas(cfg: ExperimentConfig, pb: Problem, filters: Sequence[str]) -> dict[str, dict]:
    """Working gamma per H-infinity filter plus the feasibility record."""
    observed = _observed(pb)
    out = {}
    for name in filters:
        if name not in HINF_FILTERS:
            continue
        gmax = _max_gamma(name, pb, cfg, observed)
        if cfg.gamma == "auto":
            gamma, mode = cfg.auto_factor * gmax, "auto"
        else:
            gamma, mode = float(cfg.gamma), "explicit"
        out[name] = {"gamma": gamma, "gamma_mode": mode, "max_gamma": gmax}
    return out


def _run(name: str, model: MultiscaleModel, sig: TreeSignal, gamma: float | None) -> FilterReport:
    if name == "predictor_hinf":
        return run_predictor_hinf(model, sig, gamma)
    if name == "current_hinf":
        return run_current_hinf(model, sig, gamma)
    return run_kalman(model, sig)


def _run_all(pb: Problem, filters: Sequence[str], gammas: dict) -> dict[str, list[FilterReport]]:
    runs = {name: [] for name in filters}
    # baseline always runs: it fills the Kalman columns of metrics.csv
    if "kalman" not in runs:
        runs["kalman"] = []
    for name in runs:
        g = gammas.get(name, {}).get("gamma")
        for sig in pb.signals:
            try:
                runs[name].append(_run(name, pb.model, sig, g))
            except InfeasibleGammaError as exc:
                gmax = gammas[name]["max_gamma"]
                raise InfeasibleGammaError(
                    f"{name}: gamma={fmt(g)} is infeasible; first failing node {exc.node} at stage "
                    f"{exc.node.level} (largest feasible gamma ~ {fmt(gmax)})",
                    node=exc.node,
                    gamma=g,
                ) from None
    return runs


# ---------------------------------------------------------------- artifacts


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    write_csv(buf, header, rows)
    return buf.getvalue().encode()


def _metrics_files(pb: Problem, filters: Sequence[str], runs: dict) -> dict[str, bytes]:
    # the current-measurement variant fills the H-infinity columns when selected
    hinf = sorted((f for f in filters if f in HINF_FILTERS), key=lambda f: f != "current_hinf")
    model, signals = pb.model, pb.signals
    files = {}
    primary = hinf[0] if hinf else None
    files["metrics.csv"] = _csv(
        METRICS_HEADER, channel_metrics_rows(signals, runs[primary] if primary else None, runs["kalman"], model)
    )
    for extra in hinf[1:]:
        files[f"metrics_{extra}.csv"] = _csv(METRICS_HEADER, channel_metrics_rows(signals, runs[extra], runs["kalman"], model))
    return files


def _estimate_dump(report: FilterReport) -> bytes:
    est = report.estimates
    topo = est.xhat.topology
    n = est.xhat.level(0).shape[-1]
    header = ["level", "index"]
    for i in range(1, n + 1):
        header += [f"xhat_{i}", f"lower70_{i}", f"upper70_{i}"]
    header.append("cov_trace")
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for k in topo.levels:
        x = est.xhat.level(k)
        P = np.broadcast_to(est.P.level(k), (x.shape[0], n, n))
        lo, hi = confidence_bounds(x, P)
        tr = np.trace(P, axis1=-2, axis2=-1)
        cols = [np.full(x.shape[0], k), np.arange(1, x.shape[0] + 1)]
        for i in range(n):
            cols += [x[:, i], lo[:, i], hi[:, i]]
        cols.append(tr)
        for row in zip(*cols):
            buf.write(",".join([str(int(row[0])), str(int(row[1]))] + [fmt(v) for v in row[2:]]) + "\n")
    return buf.getvalue().encode()


def _estimate_files(pb: Problem, runs: dict, filters: Sequence[str]) -> dict[str, bytes]:
    files = {}
    multi = len(pb.signals) > 1
    for name in filters:
        for c, rep in enumerate(runs[name]):
            suffix = f"_c{c}" if multi else ""
            files[f"estimates_{name}{suffix}.csv"] = _estimate_dump(rep)
    return files


def _image(planes: list[np.ndarray]) -> bytes:
    img = from_unit(np.stack(planes, axis=-1) if len(planes) > 1 else planes[0])
    return encode_pnm(img)


def _image_files(pb: Problem, runs: dict, filters: Sequence[str]) -> dict[str, bytes]:
    ext = "ppm" if len(pb.signals) > 1 else "pgm"
    K = pb.model.topology.depth
    files = {}
    noisy = [np.nan_to_num(level_to_plane(s.y.level(K)[:, 0]), nan=0.0) for s in pb.signals]
    files[f"observed.{ext}"] = _image(noisy)
    for name in filters:
        files[f"restored_{name}.{ext}"] = _image([level_to_plane(r.xhat.level(K)[:, 0]) for r in runs[name]])
    return files


def _objective_record(pb: Problem, runs: dict, gammas: dict) -> dict:
    out = {}
    for name, rec in gammas.items():
        Js = [game_objective(s, r, pb.model) for s, r in zip(pb.signals, runs[name])]
        J = max(Js)
        out[name] = {"J": J, "inverse_gamma": 1.0 / rec["gamma"], "bound_holds": attenuation_holds(J, rec["gamma"])}
        log.info("%s: J = %s, 1/gamma = %s", name, fmt(J), fmt(1.0 / rec["gamma"]))
    return out


def _filter_runs(cfg: ExperimentConfig, pb: Problem, filters: Sequence[str]):
    gammas = _resolve_gammas(cfg, pb, filters)
    runs = _run_all(pb, filters, gammas)
    for rec in gammas.values():
        rec.update(feasible=True, first_failure=None)
    return gammas, runs


def scenario_estimates(cfg: ExperimentConfig, pb: Problem) -> tuple[dict, dict]:
    filters = selected_filters(cfg.filter)
    gammas, runs = _filter_runs(cfg, pb, filters)
    files = _metrics_files(pb, filters, runs)
    files.update(_estimate_files(pb, runs, filters))
    if pb.image_shape is not None:
        files.update(_image_files(pb, runs, filters))
    extra = {"feasibility": gammas, "game_objective": _objective_record(pb, runs, gammas)}
    return files, extra


def scenario_missing_stage(cfg: ExperimentConfig, pb: Problem) -> tuple[dict, dict]:
    if not pb.missing:
        raise ConfigError("missing_stage needs at least one missing stage")
    files, extra = scenario_estimates(cfg, pb)
    filters = selected_filters(cfg.filter)
    full_obs = observed_masks(pb.model.topology)
    missing_obs = _observed(pb)
    header = ["level"]
    cols = []
    for name in filters:
        g = extra["feasibility"].get(name, {}).get("gamma")
        for label, obs in (("full", full_obs), ("missing", missing_obs)):
            if name == "predictor_hinf":
                st = sweep(pb.model, obs, g)
                if not st.feasible:
                    raise InfeasibleGammaError(f"{name} ({label}): infeasible at node {st.first_failure}", st.first_failure, g)
                P = st.levels
            else:
                cp = covariance_pass(pb.model, obs, g)
                if not cp.feasible:
                    raise InfeasibleGammaError(f"{name} ({label}): infeasible at node {cp.first_failure}", cp.first_failure, g)
                P = cp.posterior
            header.append(f"cov_trace_{name}_{label}")
            cols.append([float(np.mean(np.trace(p, axis1=-2, axis2=-1))) for p in P])
    rows = [[k] + [c[k] for c in cols] for k in pb.model.topology.levels]
    files["covariance.csv"] = _csv(header, rows)
    extra["missing_stages"] = list(pb.missing)
    return files, extra


def scenario_steady_state(cfg: ExperimentConfig, pb: Problem) -> tuple[dict, dict]:
    if not pb.model.is_homogeneous:
        raise ConfigError("steady_state needs a level-homogeneous model")
    filters = selected_filters(cfg.filter)
    gammas = _resolve_gammas(cfg, pb, filters)
    observed = _observed(pb)
    header, cols, summary = ["level"], [], {}
    for name in filters:
        g = gammas.get(name, {}).get("gamma")
        if name == "predictor_hinf":
            st = sweep(pb.model, observed, g)
            failure, P = st.first_failure, st.levels
        else:
            cp = covariance_pass(pb.model, observed, g)
            failure, P = cp.first_failure, cp.posterior
        if failure is not None:
            raise InfeasibleGammaError(
                f"{name}: gamma={fmt(g)} is infeasible; first failing node {failure} at stage {failure.level}",
                failure,
                g,
            )
        tr = [float(np.mean(np.trace(p, axis1=-2, axis2=-1))) for p in P]
        header.append(f"cov_trace_{name}")
        cols.append(tr)
        summary[name] = {"final_trace": tr[-1], "last_change": abs(tr[-1] - tr[-2]) if len(tr) > 1 else math.nan}
        if name in gammas:
            gammas[name].update(feasible=True, first_failure=None)
    rows = [[k] + [c[k] for c in cols] for k in pb.model.topology.levels]
    return {"steady_state.csv": _csv(header, rows)}, {"feasibility": gammas, "steady_state": summary}


def scenario_gamma_sweep(cfg: ExperimentConfig, pb: Problem) -> tuple[dict, dict]:
    grid = []
    for g in cfg.gamma_grid:
        g = float(g)
        if g in grid:
            log.warning("duplicate gamma %s in gamma_grid ignored", fmt(g))
            continue
        grid.append(g)
    filters = [f for f in selected_filters(cfg.filter) if f in HINF_FILTERS]
    if not filters:
        filters = list(HINF_FILTERS)
    observed = _observed(pb)
    rows, record = [], {}
    for name in filters:
        for g in grid:
            try:
                reps = [_run(name, pb.model, s, g) for s in pb.signals]
            except InfeasibleGammaError:
                rows.append(["grid", name, g, False, None, None])
                continue
            cost = sum(estimation_cost(s, r, pb.model) for s, r in zip(pb.signals, reps))
            snr = min(min(report_snr(s, r)) for s, r in zip(pb.signals, reps))
            rows.append(["grid", name, g, True, cost, snr])
        gmax = _max_gamma(name, pb, cfg, observed)
        rows.append(["max_gamma", name, gmax, True, None, None])
        record[name] = {"max_gamma": gmax}
    kal = [run_kalman(pb.model, s) for s in pb.signals]
    rows.append(
        [
            "reference",
            "kalman",
            None,
            True,
            sum(estimation_cost(s, r, pb.model) for s, r in zip(pb.signals, kal)),
            min(min(report_snr(s, r)) for s, r in zip(pb.signals, kal)),
        ]
    )
    return {"gamma_sweep.csv": _csv(SWEEP_HEADER, rows)}, {"feasibility": record, "gamma_grid": grid}


SCENARIO_RUNNERS = {
    "step1d": scenario_estimates,
    "image2d": scenario_estimates,
    "missing_stage": scenario_missing_stage,
    "gamma_sweep": scenario_gamma_sweep,
    "steady_state": scenario_steady_state,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else fmt(v)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def build_artifacts(cfg: ExperimentConfig) -> dict[str, bytes]:
    """All files of one run, keyed by name, including ``manifest.json``."""
    pb = _build_problem(cfg)
    files, extra = SCENARIO_RUNNERS[cfg.scenario](cfg, pb)
    echo = cfg.echo()
    echo.pop("output", None)
    manifest = {
        "package": "multiscale_hinf",
        "version": __version__,
        "scenario": cfg.scenario,
        "seed": pb.seed,
        "config": echo,
        "tree": {"depth": pb.model.topology.depth, "arity": pb.model.topology.arity},
        **extra,
        "files": {
            name: {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)} for name, data in sorted(files.items())
        },
    }
    files = dict(files)
    files["manifest.json"] = (json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n").encode()
    return files


def write_artifacts(files: dict[str, bytes], output: str | os.PathLike) -> list[Path]:
    """Write into a sibling staging directory, then move every file into place."""
    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.staging-", dir=out.parent))
    try:
        for name, data in files.items():
            (staging / name).write_bytes(data)
        out.mkdir(exist_ok=True)
        written = []
        for name in files:
            os.replace(staging / name, out / name)
            written.append(out / name)
        return written
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def run_experiment(cfg: ExperimentConfig, output: str | os.PathLike | None = None) -> list[Path]:
    return write_artifacts(build_artifacts(cfg), output or cfg.output)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiscale-hinf", description="Robust estimation on multiscale trees.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="scenario", required=True, metavar="SCENARIO")
    for name in SCENARIOS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, help="experiment TOML file")
        p.add_argument("--output", help="output directory (default: config 'output' or ./results)")
        p.add_argument("--seed", type=int, help="noise seed, overrides the config")
        p.add_argument("--filter", choices=FILTER_CHOICES, help="filter selection (default: all)")
        p.add_argument("--gamma", help="attenuation level, a number or 'auto'")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    overrides = {"seed": args.seed, "filter": args.filter, "gamma": args.gamma, "output": args.output}
    try:
        cfg = load_config(args.config, args.scenario, overrides)
        written = run_experiment(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleGammaError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("wrote %d files to %s", len(written), cfg.output)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
