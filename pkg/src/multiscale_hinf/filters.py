"""Coarse-to-fine estimators on multiscale trees.

* ``predictor_hinf``: gains from the coupled Riccati sweep; a child's estimate
  uses the observations down to its parent only.
* ``current_hinf``: predict from the parent, then correct with the node's own
  observation; the covariance update carries an extra indefinite output
  channel of weight ``-1/gamma``.
* ``kalman``: the same predict/correct pass without the output channel.

Missing observations drop the innovation from the mean update and the
measurement terms from the covariance update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._levels import (
    LevelMap,
    batch_len,
    broadcast_level,
    expand_to_children,
    inertia,
    mT,
    mv,
    psd_sqrt,
    sym,
)
from .model import MultiscaleModel, TreeSignal
from .riccati import InfeasibleGammaError, bisect_gamma, observed_masks, predictor_gains, sweep
from .tree import NodeId


@dataclass(frozen=True)
class FilterState:
    xhat: LevelMap
    zhat: LevelMap
    P: LevelMap
    K_gain: LevelMap


@dataclass(frozen=True)
class FilterReport:
    estimates: FilterState
    per_level_cov_trace: list[float]
    feasibility: bool
    name: str = ""
    gamma: float | None = None

    @property
    def xhat(self) -> LevelMap:
        return self.estimates.xhat

    def level_estimates(self, k: int) -> np.ndarray:
        return self.estimates.xhat.level(k)


def _trace_trend(P_levels: Sequence[np.ndarray]) -> list[float]:
    return [float(np.mean(np.trace(Pk, axis1=-2, axis2=-1))) for Pk in P_levels]


def _outputs(model: MultiscaleModel, x: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [mv(model.level("L", k), xk) for k, xk in enumerate(x)]


def _innovation(obs: TreeSignal, k: int, C: np.ndarray, xm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = obs.observed(k)
    y = np.where(mask[:, None], obs.y.level(k), 0.0)
    return np.where(mask[:, None], y - mv(C, xm), 0.0), mask


def _check_signal(model: MultiscaleModel, obs: TreeSignal):
    if obs.topology != model.topology:
        raise ValueError(f"signal topology {obs.topology} does not match model {model.topology}")


def run_predictor_hinf(model: MultiscaleModel, obs: TreeSignal, gamma: float | None = None) -> FilterReport:
    """Predictor-form H-infinity filter driven by the Riccati sweep."""
    _check_signal(model, obs)
    topo = model.topology
    observed = observed_masks(topo, signal=obs)
    state = sweep(model, observed, gamma)
    if not state.feasible:
        raise InfeasibleGammaError(
            f"gamma={state.gamma} infeasible: no valid Riccati solution at node {state.first_failure}",
            node=state.first_failure,
            gamma=state.gamma,
        )
    gains = predictor_gains(model, state, observed)
    x = [model.weights.prior_mean[None].copy()]
    for k in range(topo.depth):
        innov, _ = _innovation(obs, k, model.level("C", k), x[k])
        A = model.level("A", k + 1)
        x.append(mv(A, expand_to_children(x[k], topo.arity)) + mv(gains[k], expand_to_children(innov, topo.arity)))
    P = state.levels
    est = FilterState(
        xhat=LevelMap(topo, x),
        zhat=LevelMap(topo, _outputs(model, x)),
        P=LevelMap(topo, P),
        K_gain=LevelMap(topo, gains, first_level=1),
    )
    return FilterReport(est, _trace_trend(P), True, "predictor_hinf", state.gamma)


@dataclass
class CovariancePass:
    """Covariances and gains of the predict/correct recursion."""

    prior: list[np.ndarray] = field(default_factory=list)
    posterior: list[np.ndarray] = field(default_factory=list)
    gains: list[np.ndarray] = field(default_factory=list)
    first_failure: NodeId | None = None

    @property
    def feasible(self) -> bool:
        return self.first_failure is None


def _output_channel(model: MultiscaleModel, k: int) -> np.ndarray:
    # Q^{1/2} L, so that ||z - zhat||_Q^2 = ||Q^{1/2} L (x - xhat)||^2
    return psd_sqrt(model.level("Q", k)) @ model.level("L", k)


def _hinf_correction(Pm, H, R, gamma, p):
    """``Pm - Pm H^T Rt^{-1} H Pm`` and the inertia verdict of ``Rt``."""
    size = H.shape[-2]
    r = size - p
    b = batch_len(H, R) if p else H.shape[0]
    Rt = np.zeros((b, size, size))
    if p:
        Rt[:, :p, :p] = R
    Rt[:, p:, p:] = -np.eye(r) / gamma
    Rt = Rt + H @ Pm @ mT(H)
    pos, neg = inertia(Rt)
    ok = (pos == p) & (neg == r)
    safe = np.where(ok[:, None, None], Rt, np.eye(size))
    P = sym(Pm - Pm @ mT(H) @ np.linalg.solve(safe, H @ Pm))
    return P, ok


def covariance_pass(
    model: MultiscaleModel, observed: Sequence, gamma: float | None, stop_on_failure: bool = True
) -> CovariancePass:
    """Predict/correct covariance recursion; ``gamma=None`` gives the Kalman form.

    Covariances do not depend on the observed values, so this pass also
    serves as the feasibility test of the current-measurement variant.
    """
    topo = model.topology
    out = CovariancePass()
    for k in topo.levels:
        if k == 0:
            Pm = model.weights.prior_cov[None]
        else:
            A, B = model.level("A", k), model.level("B", k)
            Pm = sym(A @ expand_to_children(out.posterior[-1], topo.arity) @ mT(A) + B @ mT(B))
        C, R = model.level("C", k), model.level("R", k)
        p = C.shape[-2]
        S = sym(R + C @ Pm @ mT(C))
        try:
            K = mT(np.linalg.solve(S, C @ Pm))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"singular innovation covariance at level {k}") from exc
        obs = observed[k]
        if gamma is None:
            P_obs = sym(Pm - K @ C @ Pm)
            P_miss = Pm
            ok_obs = ok_miss = np.ones(batch_len(P_obs, Pm), dtype=bool)
        else:
            Lt = _output_channel(model, k)
            P_obs = ok_obs = None
            if obs is not False:
                b = batch_len(C, Lt)
                H = np.concatenate([broadcast_level(C, b), broadcast_level(Lt, b)], axis=-2)
                P_obs, ok_obs = _hinf_correction(Pm, H, R, gamma, p)
            P_miss = ok_miss = None
            if obs is not True:
                P_miss, ok_miss = _hinf_correction(Pm, Lt, R, gamma, 0)
        if obs is True:
            P, ok = P_obs, ok_obs
        elif obs is False:
            P, ok = P_miss, ok_miss
        else:
            n_k = topo.level_size(k)
            P = np.where(obs[:, None, None], broadcast_level(P_obs, n_k), broadcast_level(P_miss, n_k))
            ok = np.where(obs, broadcast_level(ok_obs, n_k), broadcast_level(ok_miss, n_k))
        if not np.all(ok) and out.first_failure is None:
            out.first_failure = NodeId(k, int(np.flatnonzero(~ok)[0]) + 1)
            if stop_on_failure:
                break
        out.prior.append(Pm)
        out.posterior.append(P)
        gains = K if obs is True else K * np.asarray(obs, dtype=float).reshape(-1, 1, 1)
        out.gains.append(gains)
    return out


def current_feasible(model: MultiscaleModel, gamma: float, observed: Sequence | None = None) -> bool:
    if observed is None:
        observed = observed_masks(model.topology)
    return covariance_pass(model, observed, gamma).feasible


def max_gamma_current(
    model: MultiscaleModel, lo: float, hi: float, tol: float, observed: Sequence | None = None
) -> float:
    """Bisection for the largest gamma the current-measurement variant admits."""
    return bisect_gamma(lambda g: current_feasible(model, g, observed), lo, hi, tol)


def _run_predict_correct(model: MultiscaleModel, obs: TreeSignal, gamma: float | None, name: str) -> FilterReport:
    _check_signal(model, obs)
    topo = model.topology
    observed = observed_masks(topo, signal=obs)
    cov = covariance_pass(model, observed, gamma)
    if not cov.feasible:
        raise InfeasibleGammaError(
            f"gamma={gamma} infeasible for the current-measurement filter at node {cov.first_failure}",
            node=cov.first_failure,
            gamma=gamma,
        )
    x = []
    for k in topo.levels:
        if k == 0:
            xm = model.weights.prior_mean[None]
        else:
            xm = mv(model.level("A", k), expand_to_children(x[-1], topo.arity))
        innov, _ = _innovation(obs, k, model.level("C", k), xm)
        x.append(xm + mv(cov.gains[k], innov))
    est = FilterState(
        xhat=LevelMap(topo, x),
        zhat=LevelMap(topo, _outputs(model, x)),
        P=LevelMap(topo, cov.posterior),
        K_gain=LevelMap(topo, cov.gains),
    )
    return FilterReport(est, _trace_trend(cov.posterior), True, name, gamma)


def run_current_hinf(model: MultiscaleModel, obs: TreeSignal, gamma: float | None = None) -> FilterReport:
    g = model.gamma if gamma is None else float(gamma)
    return _run_predict_correct(model, obs, g, "current_hinf")


def run_kalman(model: MultiscaleModel, obs: TreeSignal) -> FilterReport:
    return _run_predict_correct(model, obs, None, "kalman")


FILTERS: dict[str, Callable[[MultiscaleModel, TreeSignal], FilterReport]] = {
    "predictor_hinf": run_predictor_hinf,
    "current_hinf": run_current_hinf,
    "kalman": run_kalman,
}


def run_filter(name: str, model: MultiscaleModel, obs: TreeSignal) -> FilterReport:
    try:
        fn = FILTERS[name]
    except KeyError:
        raise ValueError(f"unknown filter {name!r}; choose from {sorted(FILTERS)}") from None
    return fn(model, obs)


def estimation_cost(signal: TreeSignal, report: FilterReport, model: MultiscaleModel) -> float:
    """Q-weighted squared output error summed over every node."""
    if signal.topology != report.xhat.topology:
        raise ValueError("signal and report cover different trees")
    total = 0.0
    for k in signal.topology.levels:
        try:
            e = signal.z.level(k) - report.estimates.zhat.level(k)
        except KeyError:
            raise ValueError(f"report has no estimates at level {k}") from None
        total += float(np.sum(e * mv(model.level("Q", k), e)))
    return total
