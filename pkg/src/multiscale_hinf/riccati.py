"""Coupled Riccati recursion for the predictor-form H-infinity filter.

Along every edge ``parent -> child``::

    M       = I - gamma * Qbar P + C^T R^{-1} C P          (parent quantities)
    P_child = A P M^{-1} A^T + B B^T                      (child A, B)
    K_child = A P M^{-1} C^T R^{-1}

A node's ``P`` is a valid (stabilizing) solution when it is positive
definite and ``P^{-1} - gamma * Qbar + C^T R^{-1} C`` is positive definite
at its parent, which is exactly the condition for ``M`` to have a positive
spectrum.  All functions accept stacks of matrices (leading batch axes).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._levels import EIG_TOL, LevelMap, batch_len, expand_to_children, is_posdef, mT, sym, uniform_or_array
from .model import MultiscaleModel, NodeParams
from .tree import NodeId, TreeTopology

COND_LIMIT = 1e12


class InfeasibleGammaError(RuntimeError):
    """The attenuation level admits no valid solution; ``node`` is the first failure."""

    def __init__(self, message: str, node: NodeId | None = None, gamma: float | None = None):
        super().__init__(message)
        self.node = node
        self.gamma = gamma


def _mask(observed, batch_ndim: int = 3):
    if isinstance(observed, (bool, np.bool_)):
        return 1.0 if observed else 0.0
    return np.asarray(observed, dtype=float).reshape((-1,) + (1,) * (batch_ndim - 1))


def observation_info(C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``C^T R^{-1} C`` via a solve against ``R``."""
    try:
        return sym(mT(C) @ np.linalg.solve(R, C))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("R is singular") from exc


def middle_matrix(P, qbar, C, R, gamma: float, observed=True) -> np.ndarray:
    """``I - gamma * Qbar P + C^T R^{-1} C P``; the C/R term is dropped when unobserved."""
    P = np.asarray(P, dtype=float)
    eye = np.eye(P.shape[-1])
    M = eye - gamma * (np.asarray(qbar) @ P)
    info = observation_info(np.asarray(C, dtype=float), np.asarray(R, dtype=float))
    return M + _mask(observed, P.ndim) * (info @ P)


def _p_minv(P: np.ndarray, M: np.ndarray) -> np.ndarray:
    # P M^{-1} from the transposed system M^T X^T = P^T
    return mT(np.linalg.solve(mT(M), mT(P)))


def _check_cond(M: np.ndarray, gamma: float):
    if np.any(~np.isfinite(M)) or np.any(np.linalg.cond(M) > COND_LIMIT):
        raise InfeasibleGammaError(f"middle matrix is numerically singular at gamma={gamma}", gamma=gamma)


def riccati_step(
    P_parent, params: NodeParams, gamma: float, child: NodeParams | None = None, observed: bool = True
) -> np.ndarray:
    """Propagate ``P`` across one edge.

    ``params`` supplies the parent's ``C, L, Q, R``; ``child`` (defaulting to
    ``params``) supplies the edge's ``A, B``.
    """
    edge = params if child is None else child
    P = np.asarray(P_parent, dtype=float)
    M = middle_matrix(P, params.qbar, params.C, params.R, gamma, observed)
    _check_cond(M, gamma)
    A, B = edge.A, edge.B
    return sym(A @ _p_minv(P, M) @ mT(A) + B @ mT(B))


def gain(P_parent, params: NodeParams, gamma: float, child: NodeParams | None = None, observed: bool = True):
    """Filter gain ``A P M^{-1} C^T R^{-1}`` for one edge (zero when unobserved)."""
    edge = params if child is None else child
    P = np.asarray(P_parent, dtype=float)
    M = middle_matrix(P, params.qbar, params.C, params.R, gamma, observed)
    _check_cond(M, gamma)
    K = edge.A @ _p_minv(P, M) @ mT(np.linalg.solve(params.R, params.C))
    return K if observed else np.zeros_like(K)


def step_feasible(P, qbar, C, R, gamma: float, observed=True, tol: float = EIG_TOL) -> np.ndarray:
    """Per-matrix test that ``P > 0`` and ``P^{-1} - gamma Qbar + C^T R^{-1} C > 0``.

    The second form is tested congruently as ``I + G^T (C^T R^{-1} C - gamma Qbar) G``
    with ``P = G G^T`` so ``P`` is never inverted.
    """
    P = np.asarray(P, dtype=float)
    info = _mask(observed, P.ndim) * observation_info(np.asarray(C, dtype=float), np.asarray(R, dtype=float))
    W = np.broadcast_to(info - gamma * np.asarray(qbar), np.broadcast_shapes(info.shape, np.shape(qbar)))
    shape = np.broadcast_shapes(P.shape, W.shape)
    P, W = np.broadcast_to(P, shape), np.broadcast_to(W, shape)
    ok = np.asarray(is_posdef(P, tol))
    if not ok.any():
        return ok
    out = np.zeros(shape[:-2], dtype=bool)
    G = np.linalg.cholesky(sym(P[ok]))
    inner = np.eye(shape[-1]) + mT(G) @ W[ok] @ G
    out[ok] = is_posdef(inner, tol)
    return out


@dataclass(frozen=True)
class RiccatiState:
    """Result of a full-tree sweep.

    ``P`` holds the levels computed before the first failure; ``first_failure``
    is the level-order-first node without a valid solution.
    """

    P: LevelMap
    feasible: bool
    first_failure: NodeId | None
    gamma: float

    @property
    def levels(self) -> list[np.ndarray]:
        return [self.P.raw_level(k) for k in self.P.level_range]


def observed_masks(topology: TreeTopology, missing_levels: Sequence[int] = (), signal=None) -> list:
    """Per-level observation availability: a bool or a boolean array per level."""
    out = []
    for k in topology.levels:
        if k in missing_levels:
            out.append(False)
        elif signal is None:
            out.append(True)
        else:
            out.append(uniform_or_array(signal.observed(k)))
    return out


def sweep(model: MultiscaleModel, observed: Sequence | None = None, gamma: float | None = None) -> RiccatiState:
    """Run the recursion over every edge in level order from ``P_0 = p_0``.

    ``observed`` gives per-level observation availability (see
    :func:`observed_masks`); unobserved nodes drop the ``C^T R^{-1} C`` term
    but keep the ``gamma`` term.
    """
    topo = model.topology
    g = model.gamma if gamma is None else float(gamma)
    if observed is None:
        observed = [True] * (topo.depth + 1)
    P = [model.weights.prior_cov[None]]
    failure = None
    for k in range(topo.depth):
        Pk, obs = P[-1], observed[k]
        qbar, C, R = model.qbar(k), model.level("C", k), model.level("R", k)
        ok = step_feasible(Pk, qbar, C, R, g, obs)
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            failure = topo.children(NodeId(k, bad + 1))[0]
            break
        M = middle_matrix(Pk, qbar, C, R, g, obs)
        Y = expand_to_children(_p_minv(np.broadcast_to(Pk, M.shape), M), topo.arity)
        A, B = model.level("A", k + 1), model.level("B", k + 1)
        Pc = sym(A @ Y @ mT(A) + B @ mT(B))
        pd = is_posdef(Pc)
        if not pd.all():
            failure = NodeId(k + 1, int(np.flatnonzero(~pd)[0]) + 1)
            break
        P.append(Pc)
    return RiccatiState(LevelMap(topo, P), failure is None, failure, g)


def predictor_gains(model: MultiscaleModel, state: RiccatiState, observed: Sequence) -> list[np.ndarray]:
    """Per-level child gains ``A P M^{-1} C^T R^{-1}`` (levels 1..K)."""
    topo = model.topology
    out = []
    for k in range(topo.depth):
        Pk, obs = state.P.raw_level(k), observed[k]
        C, R = model.level("C", k), model.level("R", k)
        M = middle_matrix(Pk, model.qbar(k), C, R, state.gamma, obs)
        Y = _p_minv(np.broadcast_to(Pk, M.shape), M)
        G = Y @ mT(np.linalg.solve(R, C)) * _mask(obs)
        out.append(model.level("A", k + 1) @ expand_to_children(G, topo.arity))
    return out


def is_feasible(model: MultiscaleModel, gamma: float, observed: Sequence | None = None) -> bool:
    return sweep(model, observed, gamma).feasible


def bisect_gamma(feasible: Callable[[float], bool], lo: float, hi: float, tol: float) -> float:
    """Largest feasible gamma to within ``tol``, assuming an interval feasible set."""
    if not lo < hi:
        raise ValueError(f"degenerate bracket [{lo}, {hi}]")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not feasible(lo):
        raise ValueError(f"lower bracket gamma={lo} is infeasible")
    if feasible(hi):
        raise ValueError(f"upper bracket gamma={hi} is feasible")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def max_gamma(model: MultiscaleModel, lo: float, hi: float, tol: float, observed: Sequence | None = None) -> float:
    return bisect_gamma(lambda g: is_feasible(model, g, observed), lo, hi, tol)


def feasibility_grid(feasible: Callable[[float], bool], gammas: Sequence[float]) -> tuple[list[bool], int]:
    """Feasibility on a grid and the number of flips (1 for an interval set)."""
    flags = [bool(feasible(g)) for g in gammas]
    flips = sum(a != b for a, b in zip(flags, flags[1:]))
    return flags, flips
