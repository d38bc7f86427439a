"""Multiscale linear state-space models on trees.

The latent process runs coarse to fine::

    x[child] = A[child] @ x[parent] + B[child] @ w[child]
    y[node]  = C[node] @ x[node] + v[node]
    z[node]  = L[node] @ x[node]

``A`` and ``B`` belong to the edge entering a node and are stored on the
child; ``C``, ``L``, ``Q`` and ``R`` belong to the node itself.  The root
carries ``A``/``B`` entries for uniformity but they are never used.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from ._levels import LevelMap, expand_to_children, is_posdef, mT, mv, sym
from .tree import NodeId, TreeTopology

PARAM_NAMES = ("A", "B", "C", "L", "Q", "R")


class DimensionError(ValueError):
    pass


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _check_weight_matrices(Q: np.ndarray, R: np.ndarray, tol: float = 1e-10):
    if not np.allclose(Q, mT(Q), atol=1e-12) or not np.allclose(R, mT(R), atol=1e-12):
        raise ValueError("Q and R must be symmetric")
    if not np.all(is_posdef(R, tol)):
        raise ValueError("R must be positive definite")
    evq = np.linalg.eigvalsh(sym(Q))
    if np.any(evq < -tol * np.maximum(1.0, np.abs(evq).max(axis=-1, keepdims=True))):
        raise ValueError("Q must be positive semidefinite")


@dataclass(frozen=True, eq=False)
class NodeParams:
    """System matrices attached to one node (and the edge entering it)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    L: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))
        n = self.A.shape[0]
        expect = {
            "A": (n, n),
            "B": (n, self.B.shape[1]),
            "C": (self.C.shape[0], n),
            "L": (self.L.shape[0], n),
            "Q": (self.L.shape[0],) * 2,
            "R": (self.C.shape[0],) * 2,
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        _check_weight_matrices(self.Q, self.R)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """``(n, p, q, r)``: state, observation, disturbance and output sizes."""
        return self.A.shape[0], self.C.shape[0], self.B.shape[1], self.L.shape[0]

    @property
    def qbar(self) -> np.ndarray:
        return self.L.T @ self.Q @ self.L

    @classmethod
    def identity(cls, n: int = 1, *, b: float = 1.0, r: float = 1.0, q: float = 1.0) -> "NodeParams":
        eye = np.eye(n)
        return cls(A=eye, B=b * eye, C=eye, L=eye, Q=q * eye, R=r * eye)


@dataclass(frozen=True, eq=False)
class GameWeights:
    gamma: float
    prior_mean: np.ndarray
    prior_cov: np.ndarray

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        mean = np.array(self.prior_mean, dtype=float).reshape(-1)
        cov = _as_matrix(self.prior_cov, "prior_cov")
        if cov.shape != (mean.size, mean.size):
            raise DimensionError("prior_cov does not match prior_mean")
        if not np.allclose(cov, cov.T, atol=1e-12) or not is_posdef(cov):
            raise ValueError("prior_cov must be symmetric positive definite")
        mean.flags.writeable = False
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "prior_mean", mean)
        object.__setattr__(self, "prior_cov", cov)

    def with_gamma(self, gamma: float) -> "GameWeights":
        return dataclasses.replace(self, gamma=gamma)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise levels: scalar variances or full covariance matrices."""

    process_var: float | np.ndarray = 0.01
    measurement_var: float | np.ndarray = 0.02

    @staticmethod
    def _cov(spec, dim: int, name: str) -> np.ndarray:
        arr = np.array(spec, dtype=float)
        if arr.ndim == 0:
            if arr < 0:
                raise ValueError(f"{name} must be non-negative")
            return float(arr) * np.eye(dim)
        if arr.shape != (dim, dim):
            raise DimensionError(f"{name} has shape {arr.shape}, expected {(dim, dim)}")
        return sym(arr)

    def process_cov(self, q: int) -> np.ndarray:
        return self._cov(self.process_var, q, "process_var")

    def measurement_cov(self, p: int) -> np.ndarray:
        return self._cov(self.measurement_var, p, "measurement_var")


class _ParamsView(Mapping):
    def __init__(self, model: "MultiscaleModel"):
        self._model = model

    def __getitem__(self, node) -> NodeParams:
        node = NodeId(*node)
        if not self._model.topology.contains(node):
            raise KeyError(node)
        k, m = node
        i = m - 1
        mats = {}
        for name in PARAM_NAMES:
            arr = self._model.arrays[name][k]
            mats[name] = arr[0] if arr.shape[0] == 1 else arr[i]
        return NodeParams(**mats)

    def __iter__(self) -> Iterator[NodeId]:
        return self._model.topology.level_order()

    def __len__(self) -> int:
        return self._model.topology.num_nodes


class MultiscaleModel:
    """Tree topology, per-node system matrices and game weights.

    Parameters are held per level in ``arrays[name][k]`` with shape
    ``(N, rows, cols)``, ``N`` being either the level size or 1 (shared).
    Instances are treated as immutable.
    """

    def __init__(self, topology: TreeTopology, arrays: Mapping[str, Sequence[np.ndarray]], weights: GameWeights):
        self.topology = topology
        self.weights = weights
        self.arrays: dict[str, tuple[np.ndarray, ...]] = {}
        for name in PARAM_NAMES:
            levels = arrays[name]
            if len(levels) != topology.depth + 1:
                raise DimensionError(f"{name}: expected {topology.depth + 1} levels, got {len(levels)}")
            stored = []
            for k, arr in enumerate(levels):
                arr = np.array(arr, dtype=float)
                if arr.ndim != 3 or arr.shape[0] not in (1, topology.level_size(k)):
                    raise DimensionError(f"{name} level {k}: bad shape {arr.shape}")
                arr.flags.writeable = False
                stored.append(arr)
            self.arrays[name] = tuple(stored)
        self._validate()

    def _validate(self):
        A0, B0, C0, L0 = (self.arrays[k][0] for k in "ABCL")
        n, q, p, r = A0.shape[1], B0.shape[2], C0.shape[1], L0.shape[1]
        expect = {"A": (n, n), "B": (n, q), "C": (p, n), "L": (r, n), "Q": (r, r), "R": (p, p)}
        for name, shape in expect.items():
            for k, arr in enumerate(self.arrays[name]):
                if arr.shape[1:] != shape:
                    raise DimensionError(f"{name} level {k} has matrices {arr.shape[1:]}, expected {shape}")
        for Q, R in zip(self.arrays["Q"], self.arrays["R"]):
            _check_weight_matrices(Q, R)
        if self.weights.prior_mean.shape != (n,):
            raise DimensionError(f"prior_mean has size {self.weights.prior_mean.size}, state dimension is {n}")
        self.dims = (n, p, q, r)

    @property
    def n(self) -> int:
        return self.dims[0]

    @property
    def gamma(self) -> float:
        return self.weights.gamma

    @property
    def params(self) -> Mapping[NodeId, NodeParams]:
        return _ParamsView(self)

    @property
    def is_homogeneous(self) -> bool:
        """True when every level shares a single parameter set."""
        return all(arr.shape[0] == 1 for levels in self.arrays.values() for arr in levels)

    def level(self, name: str, k: int) -> np.ndarray:
        return self.arrays[name][k]

    def qbar(self, k: int) -> np.ndarray:
        L, Q = self.arrays["L"][k], self.arrays["Q"][k]
        return sym(mT(L) @ Q @ L)

    def with_gamma(self, gamma: float) -> "MultiscaleModel":
        return MultiscaleModel(self.topology, self.arrays, self.weights.with_gamma(gamma))

    def with_depth(self, depth: int) -> "MultiscaleModel":
        """Same homogeneous model on a tree with a different depth."""
        if not self.is_homogeneous:
            raise ValueError("with_depth requires a homogeneous model")
        topo = TreeTopology(depth, self.topology.arity)
        arrays = {name: [levels[0]] + [levels[min(1, self.topology.depth)]] * depth for name, levels in self.arrays.items()}
        return MultiscaleModel(topo, arrays, self.weights)

    @classmethod
    def from_node_params(
        cls, topology: TreeTopology, params: Mapping[NodeId, NodeParams], weights: GameWeights
    ) -> "MultiscaleModel":
        arrays: dict[str, list[np.ndarray]] = {name: [] for name in PARAM_NAMES}
        for k in topology.levels:
            nodes = list(topology.level_nodes(k))
            missing = [nd for nd in nodes if nd not in params]
            if missing:
                raise KeyError(f"no parameters for node {missing[0]}")
            for name in PARAM_NAMES:
                try:
                    stack = np.stack([getattr(params[nd], name) for nd in nodes])
                except ValueError as exc:
                    raise DimensionError(f"inconsistent {name} shapes at level {k}") from exc
                if np.all(stack == stack[:1]):
                    stack = stack[:1]
                arrays[name].append(stack)
        return cls(topology, arrays, weights)


def uniform_model(
    topology: TreeTopology,
    defaults: NodeParams,
    weights: GameWeights,
    n: int | None = None,
    p: int | None = None,
    q: int | None = None,
    r: int | None = None,
) -> MultiscaleModel:
    """Give every node and edge of ``topology`` the same parameters."""
    for given, actual, label in zip((n, p, q, r), defaults.dims, "npqr"):
        if given is not None and given != actual:
            raise DimensionError(f"{label}={given} but defaults imply {label}={actual}")
    arrays = {name: [getattr(defaults, name)[None]] * (topology.depth + 1) for name in PARAM_NAMES}
    return MultiscaleModel(topology, arrays, weights)


def experiment_model(
    topology: TreeTopology,
    process_var: float = 0.01,
    measurement_var: float = 0.02,
    gamma: float = 1.0,
    prior_mean: float = 0.5,
    prior_var: float = 1.0,
    q_weight: float = 1.0,
) -> tuple[MultiscaleModel, NoiseSpec]:
    """Scalar identity model with the process deviation folded into ``B``.

    Returns the model and the matching noise specification for
    :func:`simulate` (unit-variance ``w``, measurement variance as given).
    """
    defaults = NodeParams(A=1.0, B=np.sqrt(process_var), C=1.0, L=1.0, Q=q_weight, R=measurement_var)
    weights = GameWeights(gamma, [prior_mean], [[prior_var]])
    return uniform_model(topology, defaults, weights), NoiseSpec(1.0, measurement_var)


@dataclass(frozen=True, eq=False)
class TreeSignal:
    """One realization of the model: states, disturbances and observations.

    ``w`` is keyed by child node (levels 1..K).  Nodes without an observation
    are absent from ``y``.
    """

    topology: TreeTopology
    x: LevelMap
    w: LevelMap
    v: LevelMap
    y: LevelMap
    z: LevelMap

    @classmethod
    def from_levels(cls, model: MultiscaleModel, x, w, v, y, y_mask=None) -> "TreeSignal":
        topo = model.topology
        z = [mv(model.level("L", k), x[k]) for k in topo.levels]
        if y_mask is not None:
            y = [np.where(mk[:, None], yk, np.nan) for yk, mk in zip(y, y_mask)]
        return cls(
            topo,
            LevelMap(topo, x),
            LevelMap(topo, w, first_level=1),
            LevelMap(topo, v),
            LevelMap(topo, y, y_mask),
            LevelMap(topo, z),
        )

    def observed(self, k: int) -> np.ndarray:
        return self.y.mask(k)

    def without_observations(self, levels: Iterable[int] = (), nodes: Iterable[NodeId] = ()) -> "TreeSignal":
        """Copy with the observations at the given levels/nodes removed."""
        masks = [self.y.mask(k).copy() for k in self.topology.levels]
        for k in levels:
            if k not in self.topology.levels:
                raise ValueError(f"level {k} not in tree")
            masks[k][:] = False
        for nd in nodes:
            nd = self.topology.check(nd)
            masks[nd.level][nd.index - 1] = False
        y = [np.where(mk[:, None], self.y.level(k), np.nan) for k, mk in enumerate(masks)]
        return dataclasses.replace(self, y=LevelMap(self.topology, y, masks))

    def with_observations(self, y_levels: Sequence[np.ndarray]) -> "TreeSignal":
        """Copy with replaced observation values (mask unchanged)."""
        masks = [self.y.mask(k) for k in self.topology.levels]
        y = [np.where(mk[:, None], np.asarray(yk, dtype=float), np.nan) for yk, mk in zip(y_levels, masks)]
        return dataclasses.replace(self, y=LevelMap(self.topology, y, masks))


def gaussian_draws(rng: np.random.Generator, cov: np.ndarray, count: int) -> np.ndarray:
    ev, vec = np.linalg.eigh(cov)
    root = vec * np.sqrt(np.clip(ev, 0.0, None))
    return rng.standard_normal((count, cov.shape[0])) @ root.T


def _propagate(model: MultiscaleModel, root_state: np.ndarray, w: Sequence[np.ndarray]) -> list[np.ndarray]:
    topo = model.topology
    x = [root_state[None].copy()]
    for k in range(1, topo.depth + 1):
        xp = expand_to_children(x[-1], topo.arity)
        A, B = model.level("A", k), model.level("B", k)
        x.append(mv(A, xp) + mv(B, w[k - 1]))
    return x


def _observe(model: MultiscaleModel, x: Sequence[np.ndarray], v: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [mv(model.level("C", k), x[k]) + v[k] for k in model.topology.levels]


def simulate(model: MultiscaleModel, root_state, noise: NoiseSpec, rng_seed: int) -> TreeSignal:
    """Draw one trajectory top-down with i.i.d. Gaussian ``w`` and ``v``."""
    topo = model.topology
    n, p, q, _ = model.dims
    root_state = np.asarray(root_state, dtype=float).reshape(-1)
    if root_state.shape != (n,):
        raise DimensionError(f"root_state has size {root_state.size}, state dimension is {n}")
    rng = np.random.default_rng(rng_seed)
    qcov, rcov = noise.process_cov(q), noise.measurement_cov(p)
    v = [gaussian_draws(rng, rcov, 1)]
    w = []
    for k in range(1, topo.depth + 1):
        w.append(gaussian_draws(rng, qcov, topo.level_size(k)))
        v.append(gaussian_draws(rng, rcov, topo.level_size(k)))
    x = _propagate(model, root_state, w)
    return TreeSignal.from_levels(model, x, w, v, _observe(model, x, v))


def implied_disturbances(model: MultiscaleModel, x: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Least-squares ``w`` explaining given per-level states through the dynamics."""
    topo = model.topology
    out = []
    for k in range(1, topo.depth + 1):
        xp = expand_to_children(np.asarray(x[k - 1]), topo.arity)
        resid = np.asarray(x[k]) - mv(model.level("A", k), xp)
        Bp = np.linalg.pinv(model.level("B", k))
        out.append(mv(Bp, resid))
    return out


def adversarial_disturbance(
    model: MultiscaleModel,
    power_budget: float,
    rng_seed: int,
    *,
    process_share: float = 1.0,
    active_fraction: float = 0.02,
) -> TreeSignal:
    """Bounded-energy disturbance that concentrates on the strongest edges.

    A ``process_share`` fraction of ``power_budget`` goes into ``w``, spread
    in equal amounts over a seeded random subset (``active_fraction``, at
    least one edge) of the edges whose ``B B^T`` has the largest top
    eigenvalue, each aligned with that eigenvector.  The remainder goes into
    ``v``, spread evenly over all nodes along the top eigenvector of ``R``.
    Signs are random.  The trajectory starts from the prior mean and every
    node is observed.
    """
    if not power_budget > 0:
        raise ValueError("power_budget must be positive")
    if not 0.0 <= process_share <= 1.0:
        raise ValueError("process_share must lie in [0, 1]")
    if not 0.0 < active_fraction <= 1.0:
        raise ValueError("active_fraction must lie in (0, 1]")
    topo = model.topology
    n, p, q, _ = model.dims
    rng = np.random.default_rng(rng_seed)

    scores, dirs = [], []
    for k in range(1, topo.depth + 1):
        B = np.broadcast_to(model.level("B", k), (topo.level_size(k), n, q))
        _, s, vt = np.linalg.svd(B)
        scores.append(s[:, 0] ** 2)
        dirs.append(vt[:, 0, :])
    score = np.concatenate(scores)
    if process_share > 0 and not score.max() > 0:
        raise ValueError("B vanishes on every edge; use process_share=0")
    direction = np.concatenate(dirs)
    top = np.flatnonzero(score >= score.max() * (1 - 1e-12))
    count = max(1, int(round(active_fraction * top.size)))
    active = np.sort(rng.choice(top, size=count, replace=False))
    w_flat = np.zeros((score.size, q))
    if process_share > 0:
        signs = rng.choice([-1.0, 1.0], size=count)
        amp = np.sqrt(process_share * power_budget / count)
        w_flat[active] = amp * signs[:, None] * direction[active]

    total = topo.num_nodes
    v_flat = np.zeros((total, p))
    if process_share < 1:
        R = np.concatenate([np.broadcast_to(model.level("R", k), (topo.level_size(k), p, p)) for k in topo.levels])
        _, vec = np.linalg.eigh(R)
        signs = rng.choice([-1.0, 1.0], size=total)
        amp = np.sqrt((1 - process_share) * power_budget / total)
        v_flat = amp * signs[:, None] * vec[:, :, -1]

    bounds = np.cumsum([0] + [topo.level_size(k) for k in topo.levels])
    w = [w_flat[bounds[k] - 1 : bounds[k + 1] - 1] for k in range(1, topo.depth + 1)]
    v = [v_flat[bounds[k] : bounds[k + 1]] for k in topo.levels]
    x = _propagate(model, model.weights.prior_mean, w)
    return TreeSignal.from_levels(model, x, w, v, _observe(model, x, v))


def disturbance_energy(signal: TreeSignal) -> float:
    ew = sum(float(np.sum(signal.w.level(k) ** 2)) for k in signal.w.level_range)
    ev = sum(float(np.sum(signal.v.level(k) ** 2)) for k in signal.v.level_range)
    return ew + ev
