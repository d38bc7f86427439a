"""Evaluation of filter runs: SNR, game objective, covariance trends, CSV."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence, TextIO

import numpy as np

from ._levels import mv
from .filters import FilterReport, estimation_cost
from .model import MultiscaleModel, TreeSignal

METRICS_HEADER = (
    "level",
    "snr_hinf_db",
    "snr_kalman_db",
    "cov_trace_hinf",
    "cov_trace_kalman",
    "cost_hinf",
    "cost_kalman",
)


def snr_db(truth: Sequence[np.ndarray], estimate: Sequence[np.ndarray]) -> list[float]:
    """Per-level ``10 log10(sum x^2 / sum (x - xhat)^2)``; ``inf`` for exact estimates."""
    if len(truth) != len(estimate):
        raise ValueError("truth and estimate have different level counts")
    out = []
    for k, (x, xh) in enumerate(zip(truth, estimate)):
        x, xh = np.asarray(x, dtype=float), np.asarray(xh, dtype=float)
        if x.shape != xh.shape:
            raise ValueError(f"level {k}: shapes {x.shape} and {xh.shape} differ")
        signal = float(np.sum(x**2))
        if signal == 0.0:
            raise ValueError(f"level {k}: zero signal energy")
        err = float(np.sum((x - xh) ** 2))
        out.append(math.inf if err == 0.0 else 10.0 * math.log10(signal / err))
    return out


def report_snr(signal: TreeSignal, report: FilterReport) -> list[float]:
    levels = signal.topology.levels
    return snr_db([signal.x.level(k) for k in levels], [report.xhat.level(k) for k in levels])


def level_costs(signal: TreeSignal, report: FilterReport, model: MultiscaleModel) -> list[float]:
    out = []
    for k in signal.topology.levels:
        e = signal.z.level(k) - report.estimates.zhat.level(k)
        out.append(float(np.sum(e * mv(model.level("Q", k), e))))
    return out


def game_objective(signal: TreeSignal, report: FilterReport, model: MultiscaleModel, gamma: float | None = None) -> float:
    """Ratio of weighted estimation-error energy to disturbance energy.

    Numerator: output errors at levels 1..K.  Denominator: the prior error
    weighted by ``p0^{-1}``, ``||w||^2`` over every edge and ``||v||^2_{R^{-1}}``
    over every observed node.  ``gamma`` is accepted for symmetry with
    :func:`attenuation_holds` and does not enter the ratio.
    """
    topo = signal.topology
    num = sum(level_costs(signal, report, model)[1:])
    e0 = signal.x[(0, 1)] - model.weights.prior_mean
    den = float(e0 @ np.linalg.solve(model.weights.prior_cov, e0))
    den += sum(float(np.sum(signal.w.level(k) ** 2)) for k in signal.w.level_range)
    for k in topo.levels:
        mk = signal.observed(k)
        v = signal.v.level(k)[mk]
        R = np.broadcast_to(model.level("R", k), (topo.level_size(k),) + model.level("R", k).shape[1:])[mk]
        den += float(np.sum(v * np.linalg.solve(R, v[..., None])[..., 0])) if v.size else 0.0
    if den <= 0.0:
        raise ValueError("zero disturbance energy: objective undefined")
    return num / den


def attenuation_holds(J: float, gamma: float) -> bool:
    return J < 1.0 / gamma


def covariance_trend(report: FilterReport) -> list[float]:
    """Mean trace of ``P`` per level, coarse to fine."""
    return list(report.per_level_cov_trace)


def confidence_bounds(xhat: np.ndarray, P: np.ndarray, coverage: float = 0.70) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided Gaussian band on each state component (+-1.04 sd at 70%)."""
    z = NormalDist().inv_cdf(0.5 + coverage / 2)
    sd = np.sqrt(np.clip(np.diagonal(np.asarray(P), axis1=-2, axis2=-1), 0.0, None))
    xhat = np.asarray(xhat)
    return xhat - z * sd, xhat + z * sd


@dataclass(frozen=True)
class EvalSummary:
    snr_db_per_level: list[float]
    total_cost: float
    cov_trace_per_level: list[float]
    cost_reduction_vs_baseline: float


def summarize(signal: TreeSignal, report: FilterReport, baseline: FilterReport, model: MultiscaleModel) -> EvalSummary:
    cost = estimation_cost(signal, report, model)
    base = estimation_cost(signal, baseline, model)
    return EvalSummary(
        snr_db_per_level=report_snr(signal, report),
        total_cost=cost,
        cov_trace_per_level=covariance_trend(report),
        cost_reduction_vs_baseline=1.0 - cost / base if base > 0 else math.nan,
    )


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.9g}"


def write_csv(out: TextIO, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def _pooled_snr(signals: Sequence[TreeSignal], reports: Sequence[FilterReport], k: int) -> float:
    sig = sum(float(np.sum(s.x.level(k) ** 2)) for s in signals)
    err = sum(float(np.sum((s.x.level(k) - r.xhat.level(k)) ** 2)) for s, r in zip(signals, reports))
    if sig == 0.0:
        raise ValueError(f"level {k}: zero signal energy")
    return math.inf if err == 0.0 else 10.0 * math.log10(sig / err)


def channel_metrics_rows(
    signals: Sequence[TreeSignal],
    hinf: Sequence[FilterReport] | None,
    kalman: Sequence[FilterReport],
    model: MultiscaleModel,
) -> list[list]:
    """Metrics rows pooled over independent channels (e.g. RGB planes).

    SNR pools signal and error energy, covariance traces are averaged and
    costs are summed across channels.
    """
    levels = list(signals[0].topology.levels)

    def columns(reports):
        if reports is None:
            return [None] * len(levels), [None] * len(levels), [None] * len(levels)
        snr = [_pooled_snr(signals, reports, k) for k in levels]
        cov = np.mean([covariance_trend(r) for r in reports], axis=0).tolist()
        cost = np.sum([level_costs(s, r, model) for s, r in zip(signals, reports)], axis=0).tolist()
        return snr, cov, cost

    snr_h, cov_h, cost_h = columns(hinf)
    snr_k, cov_k, cost_k = columns(kalman)
    return [[k, snr_h[k], snr_k[k], cov_h[k], cov_k[k], cost_h[k], cost_k[k]] for k in levels]


def metrics_rows(
    signal: TreeSignal, hinf: FilterReport | None, kalman: FilterReport, model: MultiscaleModel
) -> list[list]:
    """One row per level in :data:`METRICS_HEADER` order."""
    return channel_metrics_rows([signal], None if hinf is None else [hinf], [kalman], model)


def metrics_csv(signal: TreeSignal, hinf: FilterReport | None, kalman: FilterReport, model: MultiscaleModel) -> str:
    buf = io.StringIO()
    write_csv(buf, METRICS_HEADER, metrics_rows(signal, hinf, kalman, model))
    return buf.getvalue()
