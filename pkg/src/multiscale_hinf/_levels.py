"""Per-level array storage and small batched linear-algebra helpers.

Every per-node quantity is stored level by level as an array whose leading
axis runs over the nodes of that level.  A leading axis of length 1 means the
value is shared by the whole level; this keeps level-homogeneous recursions
O(depth) instead of O(nodes).
"""

from __future__ import annotations

from collections.abc import Mapping
from typing import Iterator, Sequence

import numpy as np

from .tree import NodeId, TreeTopology

EIG_TOL = 1e-10


def mT(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched matrix-vector product ``M v`` over leading axes."""
    return (M @ v[..., None])[..., 0]


def sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + mT(x))


def batch_len(*arrays: np.ndarray) -> int:
    n = 1
    for a in arrays:
        if a.shape[0] != 1:
            if n != 1 and a.shape[0] != n:
                raise ValueError(f"incompatible level sizes {n} and {a.shape[0]}")
            n = a.shape[0]
    return n


def expand_to_children(arr: np.ndarray, arity: int) -> np.ndarray:
    """Repeat each parent row once per child; shared rows stay shared."""
    if arr.shape[0] == 1:
        return arr
    return np.repeat(arr, arity, axis=0)


def broadcast_level(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[0] == size:
        return arr
    return np.broadcast_to(arr, (size,) + arr.shape[1:])


def is_posdef(x: np.ndarray, tol: float = EIG_TOL) -> np.ndarray:
    """Per-matrix positive-definiteness of the symmetric part of ``x``.

    The eigenvalue threshold is relative to the matrix scale (floored at 1).
    """
    if not np.all(np.isfinite(x)):
        ok = np.zeros(x.shape[:-2], dtype=bool)
        good = np.all(np.isfinite(x), axis=(-1, -2))
        if np.any(good):
            ok[good] = is_posdef(x[good], tol)
        return ok
    ev = np.linalg.eigvalsh(sym(x))
    scale = np.maximum(1.0, np.max(np.abs(ev), axis=-1))
    return ev[..., 0] > tol * scale


def psd_sqrt(x: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix (stack)."""
    ev, vec = np.linalg.eigh(sym(x))
    ev = np.clip(ev, 0.0, None)
    return (vec * np.sqrt(ev)[..., None, :]) @ mT(vec)


def inertia(x: np.ndarray, tol: float = EIG_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Counts of clearly positive and clearly negative eigenvalues."""
    ev = np.linalg.eigvalsh(sym(x))
    scale = np.maximum(1.0, np.max(np.abs(ev), axis=-1, keepdims=True))
    thr = tol * scale
    return np.sum(ev > thr, axis=-1), np.sum(ev < -thr, axis=-1)


def uniform_or_array(mask: np.ndarray) -> bool | np.ndarray:
    """Collapse an all-equal boolean level mask to a plain bool."""
    if mask.size and (mask.all() or not mask.any()):
        return bool(mask[0])
    return mask


class LevelMap(Mapping):
    """Read-only ``NodeId -> ndarray`` view over per-level arrays.

    ``masks[k]`` (optional) marks which nodes of level ``k`` carry a value;
    unmarked nodes are absent from the mapping.
    """

    def __init__(
        self,
        topology: TreeTopology,
        levels: Sequence[np.ndarray],
        masks: Sequence[np.ndarray | None] | None = None,
        first_level: int = 0,
    ):
        self.topology = topology
        self.first_level = first_level
        self._levels = []
        for k, arr in enumerate(levels, start=first_level):
            arr = np.asarray(arr)
            if arr.shape[0] not in (1, topology.level_size(k)):
                raise ValueError(f"level {k}: leading axis {arr.shape[0]} != {topology.level_size(k)}")
            arr = arr.view()
            arr.flags.writeable = False
            self._levels.append(arr)
        if masks is None:
            masks = [None] * len(self._levels)
        if len(masks) != len(self._levels):
            raise ValueError("one mask per level required")
        self._masks = []
        for k, mk in enumerate(masks, start=first_level):
            if mk is not None:
                mk = np.asarray(mk, dtype=bool)
                if mk.shape != (topology.level_size(k),):
                    raise ValueError(f"level {k}: mask shape {mk.shape}")
                if mk.all():
                    mk = None
            self._masks.append(mk)

    @property
    def level_range(self) -> range:
        return range(self.first_level, self.first_level + len(self._levels))

    def level(self, k: int) -> np.ndarray:
        """Array of level ``k`` broadcast to one row per node."""
        return broadcast_level(self.raw_level(k), self.topology.level_size(k))

    def raw_level(self, k: int) -> np.ndarray:
        if k not in self.level_range:
            raise KeyError(f"level {k} not stored")
        return self._levels[k - self.first_level]

    def mask(self, k: int) -> np.ndarray:
        mk = self._masks[k - self.first_level] if k in self.level_range else None
        if mk is None:
            if k not in self.level_range:
                raise KeyError(f"level {k} not stored")
            return np.ones(self.topology.level_size(k), dtype=bool)
        return mk

    def __getitem__(self, node) -> np.ndarray:
        k, m = node
        if k not in self.level_range or not 1 <= m <= self.topology.level_size(k):
            raise KeyError(node)
        mk = self._masks[k - self.first_level]
        if mk is not None and not mk[m - 1]:
            raise KeyError(node)
        arr = self._levels[k - self.first_level]
        return arr[0] if arr.shape[0] == 1 else arr[m - 1]

    def __iter__(self) -> Iterator[NodeId]:
        for k in self.level_range:
            mk = self._masks[k - self.first_level]
            for m in range(1, self.topology.level_size(k) + 1):
                if mk is None or mk[m - 1]:
                    yield NodeId(k, m)

    def __len__(self) -> int:
        total = 0
        for k in self.level_range:
            mk = self._masks[k - self.first_level]
            total += self.topology.level_size(k) if mk is None else int(mk.sum())
        return total

    def __repr__(self) -> str:
        return f"LevelMap(levels={list(self.level_range)}, entries={len(self)})"
