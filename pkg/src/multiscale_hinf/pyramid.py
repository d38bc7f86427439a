"""Signals and images as multiscale trees.

Images map onto quadtrees through Morton (Z-order) indexing: the four
children of node ``(k, m)`` are the 2x2 pixel block under pixel ``m`` of
plane ``k``, ordered top-left, top-right, bottom-left, bottom-right.
1-D signals map onto dyadic trees in natural sample order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._levels import LevelMap, mv
from .model import MultiscaleModel, NoiseSpec, TreeSignal, gaussian_draws, implied_disturbances


def _power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """Square, power-of-two sided grayscale plane with samples in [0, 1]."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1] or not _power_of_two(s.shape[0]):
            raise ValueError(f"image must be square with power-of-two side, got shape {s.shape}")
        if s.size and (s.min() < -1e-12 or s.max() > 1 + 1e-12):
            raise ValueError("samples must lie in [0, 1]")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def level(self) -> int:
        return self.width.bit_length() - 1


@dataclass(frozen=True, eq=False)
class PyramidStack:
    """Coarse-to-fine planes; plane ``k`` has ``2**k`` samples per side."""

    planes: tuple[np.ndarray, ...]

    @property
    def ndim(self) -> int:
        return self.planes[0].ndim

    @property
    def depth(self) -> int:
        return len(self.planes) - 1

    @property
    def arity(self) -> int:
        return 2**self.ndim

    def __len__(self) -> int:
        return len(self.planes)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.planes[k]


def _block_mean(plane: np.ndarray) -> np.ndarray:
    if plane.ndim == 1:
        return plane.reshape(-1, 2).mean(axis=1)
    h, w = plane.shape
    return plane.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _stack_from_finest(finest: np.ndarray) -> PyramidStack:
    planes = [finest]
    while planes[-1].shape[0] > 1:
        planes.append(_block_mean(planes[-1]))
    planes = [p.copy() for p in reversed(planes)]
    for p in planes:
        p.flags.writeable = False
    return PyramidStack(tuple(planes))


def build_pyramid(finest: ImagePlane | np.ndarray) -> PyramidStack:
    """Recursive 2x2 averaging down to the 1x1 global mean."""
    if not isinstance(finest, ImagePlane):
        finest = ImagePlane(finest)
    return _stack_from_finest(finest.samples)


def build_pyramid_1d(finest: np.ndarray) -> PyramidStack:
    finest = np.array(finest, dtype=float)
    if finest.ndim != 1 or not _power_of_two(finest.size):
        raise ValueError(f"1-D signal needs a power-of-two length, got shape {finest.shape}")
    return _stack_from_finest(finest)


def step_signal(levels: int, breakpoints: Sequence[float], values: Sequence[float]) -> PyramidStack:
    """Dyadic pyramid of a piecewise-constant function on [0, 1].

    ``values[j]`` holds between ``breakpoints[j-1]`` and ``breakpoints[j]``;
    the finest level samples the function at ``2**levels`` cell centres.
    """
    bp = np.asarray(breakpoints, dtype=float)
    vals = np.asarray(values, dtype=float)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if vals.size != bp.size + 1:
        raise ValueError(f"{bp.size} breakpoints need {bp.size + 1} values, got {vals.size}")
    if np.any(np.diff(bp) < 0):
        raise ValueError("breakpoints must be sorted")
    if bp.size and (bp[0] < 0 or bp[-1] > 1):
        raise ValueError("breakpoints must lie in [0, 1]")
    n = 2**levels
    centres = (np.arange(n) + 0.5) / n
    return build_pyramid_1d(vals[np.searchsorted(bp, centres, side="right")])


def morton_encode(rows, cols) -> np.ndarray:
    """Z-order index (0-based) of pixel ``(row, col)``; column bits are the low bits."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.zeros(np.broadcast(rows, cols).shape, dtype=np.int64)
    for b in range(31):
        out |= ((rows >> b) & 1) << (2 * b + 1)
        out |= ((cols >> b) & 1) << (2 * b)
    return out


def morton_decode(index) -> tuple[np.ndarray, np.ndarray]:
    index = np.asarray(index, dtype=np.int64)
    rows = np.zeros_like(index)
    cols = np.zeros_like(index)
    for b in range(31):
        rows |= ((index >> (2 * b + 1)) & 1) << b
        cols |= ((index >> (2 * b)) & 1) << b
    return rows, cols


def plane_to_level(plane: np.ndarray) -> np.ndarray:
    """Plane samples in node order as an ``(N, 1)`` column."""
    plane = np.asarray(plane, dtype=float)
    if plane.ndim == 1:
        return plane[:, None].copy()
    side = plane.shape[0]
    r, c = morton_decode(np.arange(side * side))
    return plane[r, c][:, None]


def level_to_plane(values: np.ndarray, ndim: int = 2) -> np.ndarray:
    values = np.asarray(values, dtype=float).reshape(-1)
    if ndim == 1:
        return values.copy()
    side = int(round(np.sqrt(values.size)))
    if side * side != values.size:
        raise ValueError(f"{values.size} values do not form a square plane")
    plane = np.empty((side, side))
    r, c = morton_decode(np.arange(values.size))
    plane[r, c] = values
    return plane


def pyramid_to_observations(
    stack: PyramidStack,
    model: MultiscaleModel,
    noise: NoiseSpec,
    seed: int,
    missing_levels: Sequence[int] = (),
) -> TreeSignal:
    """Pyramid planes as latent states, observed through ``y = C x + v``."""
    topo = model.topology
    if topo.arity != stack.arity:
        raise ValueError(f"a {stack.ndim}-D pyramid needs arity {stack.arity}, model has {topo.arity}")
    if topo.depth != stack.depth:
        raise ValueError(f"pyramid depth {stack.depth} does not match tree depth {topo.depth}")
    n, p, _, _ = model.dims
    if n != 1:
        raise ValueError("pyramid signals use a scalar state per node")
    rng = np.random.default_rng(seed)
    rcov = noise.measurement_cov(p)
    x = [plane_to_level(stack[k]) for k in topo.levels]
    v = [gaussian_draws(rng, rcov, topo.level_size(k)) for k in topo.levels]
    y = [mv(model.level("C", k), x[k]) + v[k] for k in topo.levels]
    sig = TreeSignal.from_levels(model, x, implied_disturbances(model, x), v, y)
    if missing_levels:
        sig = sig.without_observations(levels=missing_levels)
    return sig


def _as_levelmap(source) -> LevelMap:
    if isinstance(source, LevelMap):
        return source
    return source.estimates.xhat


def level_values(source, level: int) -> np.ndarray:
    """First state component of every node at ``level``, in node order."""
    lm = _as_levelmap(source)
    if level not in lm.level_range:
        raise ValueError(f"level {level} out of range {list(lm.level_range)}")
    return lm.level(level)[:, 0]


def estimates_to_image(report, level: int) -> ImagePlane:
    """Estimated plane at ``level`` (quadtree reports), clamped to [0, 1]."""
    lm = _as_levelmap(report)
    if lm.topology.arity != 4:
        raise ValueError("estimates_to_image requires a quadtree report")
    return ImagePlane(np.clip(level_to_plane(level_values(lm, level)), 0.0, 1.0))


def estimates_to_signal(report, level: int) -> np.ndarray:
    lm = _as_levelmap(report)
    if lm.topology.arity != 2:
        raise ValueError("estimates_to_signal requires a dyadic report")
    return level_values(lm, level).copy()
