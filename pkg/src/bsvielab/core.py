"""Time grids, Brownian ensembles, discrete integrals and random-field storage.

Index conventions used everywhere in this package:

* a grid with ``n_steps`` steps has nodes ``t_0 = 0 < t_1 < ... < t_n = T``;
* step ``k`` is the half-open cell ``[t_k, t_{k+1})`` and carries the
  increment ``dW[:, k]``;
* one-parameter processes store node values, shape ``(n_paths, n_steps + 1)``;
* two-parameter fields store per-step values ``Z[path, i, j]`` where ``i``
  indexes the outer time node ``t_i`` and ``j`` the inner step cell
  ``[s_j, s_{j+1})``.  For triangular fields only cells ``j >= i`` (strictly
  to the right of the diagonal, up to cell width) are defined.

Both integrals use the left-point rule, which keeps Ito sums adapted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import pandas as pd

from .errors import InvalidArgument

__all__ = [
    "TimeGrid",
    "BrownianEnsemble",
    "PathProcess",
    "TriangleField",
    "SquareField",
    "make_grid",
    "simulate_brownian",
    "resample_after",
    "ito_integral",
    "lebesgue_integral",
    "martingale_moment_ratio",
    "MomentRatio",
    "ensemble_frame",
    "field_frame",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, horizon]`` into ``n_steps`` steps."""

    horizon: float
    n_steps: int
    nodes: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    def node_time(self, idx: int) -> float:
        return float(self.nodes[idx])

    def require_node(self, idx: int) -> int:
        idx = int(idx)
        if not 0 <= idx <= self.n_steps:
            raise InvalidArgument(f"node index {idx} outside [0, {self.n_steps}]")
        return idx

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TimeGrid)
            and self.n_steps == other.n_steps
            and self.horizon == other.horizon
        )

    def __hash__(self):
        return hash((self.horizon, self.n_steps))


def make_grid(horizon: float, n_steps: int) -> TimeGrid:
    """Build a uniform grid on ``[0, horizon]``.

    Requires ``horizon > 0`` and ``n_steps >= 2``.
    """
    if not np.isfinite(horizon) or horizon <= 0.0:
        raise InvalidArgument(f"horizon must be a positive real, got {horizon!r}")
    n_steps = int(n_steps)
    if n_steps < 2:
        raise InvalidArgument(f"n_steps must be >= 2, got {n_steps}")
    nodes = np.linspace(0.0, float(horizon), n_steps + 1)
    nodes.setflags(write=False)
    return TimeGrid(horizon=float(horizon), n_steps=n_steps, nodes=nodes)


@dataclass(frozen=True)
class BrownianEnsemble:
    """A family of simulated Brownian paths on a shared grid.

    ``increments[p, k]`` is the step-``k`` increment of path ``p`` and
    ``levels[p, j]`` the cumulative value ``W(t_j)``; ``levels[:, 0] == 0``.
    Arrays are locked after construction: every downstream operation is a
    pure read, so ensembles can be shared across workers freely.
    """

    grid: TimeGrid
    n_paths: int
    seed: int
    increments: np.ndarray = field(repr=False)
    levels: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.grid.dt

    def w_at(self, node: int) -> np.ndarray:
        return self.levels[:, self.grid.require_node(node)]


def _path_generator(seed: int, path: int, stream: int = 0) -> np.random.Generator:
    # Counter-based substream: one Philox key per (seed, path, stream), so the
    # draw for a given path never depends on how many paths or workers exist.
    key = np.array([np.uint64(seed), np.uint64((stream << 48) + path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_brownian(grid: TimeGrid, n_paths: int, seed: int) -> BrownianEnsemble:
    """Simulate ``n_paths`` Brownian paths on ``grid``, one RNG substream per path.

    Deterministic given ``(grid, n_paths, seed)``; increments are i.i.d.
    Gaussian with variance ``dt``.
    """
    n_paths = int(n_paths)
    if n_paths < 1:
        raise InvalidArgument(f"n_paths must be >= 1, got {n_paths}")
    seed = int(seed)
    if not 0 <= seed < 2**63:
        raise InvalidArgument(f"seed must be in [0, 2**63), got {seed}")
    scale = np.sqrt(grid.dt)
    increments = np.empty((n_paths, grid.n_steps))
    for p in range(n_paths):
        increments[p] = _path_generator(seed, p).standard_normal(grid.n_steps)
    increments *= scale
    levels = np.zeros((n_paths, grid.n_nodes))
    np.cumsum(increments, axis=1, out=levels[:, 1:])
    increments.setflags(write=False)
    levels.setflags(write=False)
    return BrownianEnsemble(
        grid=grid, n_paths=n_paths, seed=seed, increments=increments, levels=levels
    )


def coarsen_ensemble(ensemble: BrownianEnsemble, factor: int) -> BrownianEnsemble:
    """Same Brownian paths on a grid coarsened by an integer factor.

    Increments are aggregated over blocks of ``factor`` steps, so refinement
    studies can compare solutions pathwise: a run on the fine ensemble and a
    run on its coarsening are driven by the identical noise.
    """
    factor = int(factor)
    n = ensemble.grid.n_steps
    if factor < 1 or n % factor != 0:
        raise InvalidArgument(f"factor {factor} does not divide {n} steps")
    if factor == 1:
        return ensemble
    grid = make_grid(ensemble.grid.horizon, n // factor)
    increments = ensemble.increments.reshape(ensemble.n_paths, n // factor, factor).sum(
        axis=2
    )
    levels = ensemble.levels[:, ::factor].copy()
    increments.setflags(write=False)
    levels.setflags(write=False)
    return BrownianEnsemble(
        grid=grid,
        n_paths=ensemble.n_paths,
        seed=ensemble.seed,
        increments=increments,
        levels=levels,
    )


def resample_after(ensemble: BrownianEnsemble, step: int, seed: int) -> BrownianEnsemble:
    """Fresh ensemble sharing increments on steps ``< step`` and redrawing
    every increment at steps ``>= step``.

    Used by adaptedness probes: any quantity measurable at node ``step`` must
    be unchanged under this operation.
    """
    step = int(step)
    if not 0 <= step <= ensemble.grid.n_steps:
        raise InvalidArgument(f"step {step} outside grid")
    scale = np.sqrt(ensemble.dt)
    n_tail = ensemble.grid.n_steps - step
    increments = np.array(ensemble.increments)
    for p in range(ensemble.n_paths):
        increments[p, step:] = _path_generator(seed, p, stream=1).standard_normal(n_tail) * scale
    levels = np.zeros((ensemble.n_paths, ensemble.grid.n_nodes))
    np.cumsum(increments, axis=1, out=levels[:, 1:])
    increments.setflags(write=False)
    levels.setflags(write=False)
    return BrownianEnsemble(
        grid=ensemble.grid,
        n_paths=ensemble.n_paths,
        seed=int(seed),
        increments=increments,
        levels=levels,
    )


@dataclass
class PathProcess:
    """Node values of a one-parameter process, shape ``(n_paths, n_nodes)``.

    A trailing component axis is allowed for vector-valued states.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim < 2 or v.shape[1] != self.grid.n_nodes:
            raise InvalidArgument(
                f"values must be (n_paths, {self.grid.n_nodes}[, d]), got {v.shape}"
            )
        self.values = v

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def at(self, node: int) -> np.ndarray:
        return self.values[:, self.grid.require_node(node)]


class _BaseField:
    """Dense ``(n_paths, n_nodes, n_steps)`` storage for two-parameter fields."""

    def __init__(self, grid: TimeGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        expect = (grid.n_nodes, grid.n_steps)
        if values.ndim < 3 or values.shape[1:3] != expect:
            raise InvalidArgument(
                f"field values must be (n_paths, {expect[0]}, {expect[1]}[, d]),"
                f" got {values.shape}"
            )
        self.grid = grid
        self.values = values

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def _check_cell(self, i: int, j: int):
        if not (0 <= i <= self.grid.n_steps and 0 <= j < self.grid.n_steps):
            raise InvalidArgument(f"cell ({i}, {j}) outside the field")


class TriangleField(_BaseField):
    """Two-parameter field defined on cells ``j >= i`` (inner time after the
    outer node).  Accessing a cell left of the diagonal is an error."""

    def __init__(self, grid: TimeGrid, values: np.ndarray):
        super().__init__(grid, values)

    def cell(self, i: int, j: int) -> np.ndarray:
        self._check_cell(i, j)
        if j < i:
            raise InvalidArgument(
                f"triangle field has no cell ({i}, {j}): need j >= i"
            )
        return self.values[:, i, j]

    def slice_from(self, i: int) -> np.ndarray:
        """Per-step values of ``Z(t_i, .)`` on ``[t_i, T)``: columns ``i..n-1``."""
        if not 0 <= i <= self.grid.n_steps:
            raise InvalidArgument(f"row {i} outside the field")
        return self.values[:, i, i:]


class SquareField(_BaseField):
    """Two-parameter field defined on the full cell square.

    The defining extension fills cells ``j < i``; the solver-visible part
    lives on ``j >= i`` and restricts to a valid :class:`TriangleField`.
    Diagonal cells ``j == i`` are stored but never consumed by solvers.
    """

    def cell(self, i: int, j: int) -> np.ndarray:
        self._check_cell(i, j)
        return self.values[:, i, j]

    def slice_from(self, i: int) -> np.ndarray:
        if not 0 <= i <= self.grid.n_steps:
            raise InvalidArgument(f"row {i} outside the field")
        return self.values[:, i, i:]

    def slice_before(self, i: int) -> np.ndarray:
        """Per-step values of ``Z(t_i, .)`` on ``[0, t_i)``: columns ``0..i-1``."""
        if not 0 <= i <= self.grid.n_steps:
            raise InvalidArgument(f"row {i} outside the field")
        return self.values[:, i, :i]

    def triangle(self) -> TriangleField:
        return TriangleField(self.grid, self.values)

    @classmethod
    def adopt_triangle(cls, tri: TriangleField) -> "SquareField":
        """Wrap a triangle's storage without copying (cells ``j < i`` are
        about to be overwritten by the caller)."""
        return cls(tri.grid, tri.values)


_IntegrandLike = Union[PathProcess, np.ndarray]


def _per_step_values(integrand: _IntegrandLike, n_steps: int) -> np.ndarray:
    """Left-point per-step values: node processes contribute their first
    ``n_steps`` columns, raw arrays are taken as per-step already."""
    if isinstance(integrand, PathProcess):
        return integrand.values[:, :n_steps]
    arr = np.asarray(integrand, dtype=float)
    if arr.ndim < 2 or arr.shape[1] < n_steps:
        raise InvalidArgument(
            f"integrand needs >= {n_steps} step columns, got shape {arr.shape}"
        )
    return arr


def _check_window(start: int, stop: int, n_steps: int):
    if start > stop:
        raise InvalidArgument(f"integration window [{start}, {stop}) is reversed")
    if start < 0 or stop > n_steps:
        raise InvalidArgument(f"window [{start}, {stop}) outside [0, {n_steps}]")


def ito_integral(
    integrand: _IntegrandLike,
    ensemble: BrownianEnsemble,
    start: int = 0,
    stop: int | None = None,
) -> np.ndarray:
    """Left-point Ito sum ``sum_k z_k dW_k`` over steps ``start <= k < stop``."""
    n = ensemble.grid.n_steps
    stop = n if stop is None else int(stop)
    _check_window(int(start), stop, n)
    z = _per_step_values(integrand, n)
    dw = ensemble.increments[:, start:stop]
    if z.ndim > 2:
        dw = dw[..., None]
    return np.sum(z[:, start:stop] * dw, axis=1)


def lebesgue_integral(
    integrand: _IntegrandLike,
    grid: TimeGrid,
    start: int = 0,
    stop: int | None = None,
) -> np.ndarray:
    """Left-point Riemann sum ``sum_k z_k dt`` over steps ``start <= k < stop``."""
    n = grid.n_steps
    stop = n if stop is None else int(stop)
    _check_window(int(start), stop, n)
    z = _per_step_values(integrand, n)
    return np.sum(z[:, start:stop], axis=1) * grid.dt


@dataclass(frozen=True)
class MomentRatio:
    ratio: float
    degenerate: bool
    p: float


def martingale_moment_ratio(
    z: _IntegrandLike, ensemble: BrownianEnsemble, p: float
) -> MomentRatio:
    """Empirical ``E(int |z|^2 ds)^{p/2} / E|int z dW|^p`` for ``p > 1``.

    The ratio compares against the moment constant ``K_p`` (equality with
    ``K_2 = 1`` at ``p = 2``).  An identically-zero integrand is flagged
    degenerate and reported as ratio 1 by convention.
    """
    if p <= 1.0:
        raise InvalidArgument(f"p must exceed 1, got {p}")
    n = ensemble.grid.n_steps
    zv = _per_step_values(z, n)[:, :n]
    if zv.ndim > 2:
        zv = np.linalg.norm(zv, axis=-1)
    if not np.any(zv):
        return MomentRatio(ratio=1.0, degenerate=True, p=float(p))
    quad = np.sum(zv**2, axis=1) * ensemble.dt
    stoch = np.sum(zv * ensemble.increments, axis=1)
    num = float(np.mean(quad ** (p / 2.0)))
    den = float(np.mean(np.abs(stoch) ** p))
    return MomentRatio(ratio=num / den, degenerate=False, p=float(p))


def ensemble_frame(ensemble: BrownianEnsemble) -> pd.DataFrame:
    """Long-format view of the path levels: columns (path, node, W)."""
    n_paths, n_nodes = ensemble.levels.shape
    return pd.DataFrame(
        {
            "path": np.repeat(np.arange(n_paths), n_nodes),
            "node": np.tile(np.arange(n_nodes), n_paths),
            "W": ensemble.levels.ravel(),
        }
    )


def field_frame(fld: _BaseField, max_paths: int | None = None) -> pd.DataFrame:
    """Long-format view of a field: columns (path, i, j, component, value).

    Triangle fields emit only their valid cells.
    """
    n_paths = fld.n_paths if max_paths is None else min(fld.n_paths, int(max_paths))
    vals = fld.values[:n_paths]
    if vals.ndim == 3:
        vals = vals[..., None]
    n_rows, n_cols, dim = vals.shape[1:]
    ii, jj = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    keep = (jj >= ii) if isinstance(fld, TriangleField) else np.ones_like(ii, bool)
    ii, jj = ii[keep], jj[keep]
    n_cells = ii.size
    frames = []
    for d in range(dim):
        frames.append(
            pd.DataFrame(
                {
                    "path": np.repeat(np.arange(n_paths), n_cells),
                    "i": np.tile(ii, n_paths),
                    "j": np.tile(jj, n_paths),
                    "component": d,
                    "value": vals[:, :, :, d][:, keep].ravel(),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)
