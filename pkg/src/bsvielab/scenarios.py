"""Catalog of runnable benchmark scenarios, addressed by frozen string ids.

Ids: ``example-1.1`` (terminal-level driver, explicit solution),
``example-4.2`` (deferred-read path driver on horizon 2, explicit tail),
``linear-zhat`` (transposed-field coupling), ``fbsde-sin`` (bounded terminal
weight, linear drift), ``adapted-linear`` (value-linear adapted driver,
explicit solution) and the trivial ``zero``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .certification import LipschitzProfile
from .core import BrownianEnsemble, TimeGrid
from .errors import InvalidArgument
from .fbsde import FbsdeSpec, solve_fbsde_via_bsvie
from .generators import GeneratorSpec
from .path_dependent import PathGeneratorSpec, solve_path_dependent
from .solvers import SolverConfig, solve_type1, solve_type2

__all__ = ["Scenario", "get_scenario", "SCENARIO_IDS"]


@dataclass(frozen=True)
class Scenario:
    id: str
    kind: str  # type1 | type2 | path | fbsde
    horizon: float
    description: str
    generator: object
    psi_fn: callable  # ensemble -> (n_paths, n_nodes)
    explicit_y: callable | None = None  # ensemble -> (n_paths, n_nodes)
    explicit_z: callable | None = None  # grid -> (n_nodes, n_steps) cell values

    def psi(self, ensemble: BrownianEnsemble) -> np.ndarray:
        return self.psi_fn(ensemble)

    def solve(self, cfg: SolverConfig, ensemble: BrownianEnsemble):
        if abs(ensemble.grid.horizon - self.horizon) > 1e-12:
            raise InvalidArgument(
                f"scenario {self.id!r} runs on horizon {self.horizon},"
                f" got {ensemble.grid.horizon}"
            )
        if self.kind == "type1":
            return solve_type1(self.psi(ensemble), self.generator, cfg, ensemble)
        if self.kind == "type2":
            return solve_type2(self.psi(ensemble), self.generator, cfg, ensemble)
        if self.kind == "path":
            return solve_path_dependent(self.psi(ensemble), self.generator, cfg, ensemble)
        if self.kind == "fbsde":
            return solve_fbsde_via_bsvie(self.generator, cfg, ensemble)
        raise InvalidArgument(f"scenario kind {self.kind!r} is not runnable")

    def y_error(self, solution_y: np.ndarray, ensemble: BrownianEnsemble) -> float:
        if self.explicit_y is None:
            raise InvalidArgument(f"scenario {self.id!r} has no explicit solution")
        ref = self.explicit_y(ensemble)
        return float(np.sqrt(np.mean((solution_y - ref) ** 2)))

    def z_error(self, field_values: np.ndarray, grid: TimeGrid) -> float:
        if self.explicit_z is None:
            raise InvalidArgument(f"scenario {self.id!r} has no explicit field")
        ref = self.explicit_z(grid)
        n = grid.n_steps
        num, cells = 0.0, 0
        for i in range(n):
            diff = field_values[:, i, i:] - ref[i, i:][None, :]
            num += float(np.sum(np.mean(diff**2, axis=0)))
            cells += n - i
        return math.sqrt(num / cells)


def _example_11(horizon: float = 1.0) -> Scenario:
    def fn(ensemble, t_times, s_idx, y, z, zhat):
        wt = ensemble.levels[:, -1]
        return np.broadcast_to(wt[:, None], (ensemble.n_paths, t_times.size))

    def exact_g1(ensemble, t_times, s_idx, y, z, zhat):
        ws = ensemble.levels[:, s_idx]
        return np.broadcast_to(ws[:, None], (ensemble.n_paths, t_times.size))

    gen = GeneratorSpec(
        name="terminal-level",
        fn=fn,
        measurability="anticipating",
        profile=LipschitzProfile.from_constants(horizon=horizon),
        exact_g1=exact_g1,
    )

    def psi(ensemble):
        return np.zeros((ensemble.n_paths, ensemble.grid.n_nodes))

    def explicit_y(ensemble):
        tau = horizon - ensemble.grid.nodes
        return ensemble.levels * tau[None, :]

    def explicit_z(grid):
        return np.tile((horizon - grid.nodes)[:, None], (1, grid.n_steps))

    return Scenario(
        id="example-1.1",
        kind="type1",
        horizon=horizon,
        description="driver equal to the terminal Brownian level; explicit solution",
        generator=gen,
        psi_fn=psi,
        explicit_y=explicit_y,
        explicit_z=explicit_z,
    )


def _example_42() -> Scenario:
    horizon = 2.0

    def fn(ensemble, t_times, s_idx, segment, z):
        grid = ensemble.grid
        read = min(s_idx + int(round(1.0 / grid.dt)), grid.n_steps)
        vals = segment.at_node(read)
        return np.broadcast_to(vals[:, None], (ensemble.n_paths, t_times.size))

    gen = PathGeneratorSpec(
        name="deferred-read",
        fn=fn,
        lipschitz=1.0,
        modulus="linear",
        bound="integrable terminal level",
    )

    def psi(ensemble):
        wt = ensemble.levels[:, -1]
        return np.tile(wt[:, None], (1, ensemble.grid.n_nodes))

    def explicit_y(ensemble):
        # Valid on the tail block [1, 2] where the deferred read saturates.
        tau = 3.0 - ensemble.grid.nodes
        return ensemble.levels * tau[None, :]

    def explicit_z(grid):
        return np.tile((3.0 - grid.nodes)[:, None], (1, grid.n_steps))

    return Scenario(
        id="example-4.2",
        kind="path",
        horizon=horizon,
        description="driver reads the value path one unit ahead (capped at T)",
        generator=gen,
        psi_fn=psi,
        explicit_y=explicit_y,
        explicit_z=explicit_z,
    )


def _linear_zhat(kappa: float = 0.2, horizon: float = 1.0) -> Scenario:
    def fn(ensemble, t_times, s_idx, y, z, zhat):
        if zhat is None:
            return np.zeros((ensemble.n_paths, t_times.size))
        return kappa * zhat

    gen = GeneratorSpec(
        name="linear-zhat",
        fn=fn,
        uses_zhat=True,
        measurability="adapted",  # the transposed cell is measurable before the node
        profile=LipschitzProfile.from_constants(horizon=horizon, lzhat1=kappa),
        exact_g1=fn,
    )

    def psi(ensemble):
        wt = ensemble.levels[:, -1]
        return np.tile(wt[:, None], (1, ensemble.grid.n_nodes))

    return Scenario(
        id="linear-zhat",
        kind="type2",
        horizon=horizon,
        description=f"driver {kappa} times the transposed field value",
        generator=gen,
        psi_fn=psi,
    )


def _fbsde_sin(kappa: float = 0.1, horizon: float = 1.0) -> Scenario:
    spec = FbsdeSpec(
        name="fbsde-sin",
        xi_fn=lambda ens: np.sin(ens.levels[:, -1]),
        xi_bound=1.0,
        x_fn=lambda ens, i: np.ones(ens.n_paths),
        b_fn=lambda ens, r, z: kappa * z,
        b_lip_z=kappa,
    )

    def psi(ensemble):
        xi = np.sin(ensemble.levels[:, -1])
        return np.tile(xi[:, None], (1, ensemble.grid.n_nodes))

    return Scenario(
        id="fbsde-sin",
        kind="fbsde",
        horizon=horizon,
        description="bounded sinusoidal terminal weight, linear drift, zero driver",
        generator=spec,
        psi_fn=psi,
    )


def _adapted_linear(horizon: float = 1.0) -> Scenario:
    def fn(ensemble, t_times, s_idx, y, z, zhat):
        if y is None:
            return np.zeros((ensemble.n_paths, t_times.size))
        return np.broadcast_to(-y[:, None], (ensemble.n_paths, t_times.size))

    gen = GeneratorSpec(
        name="adapted-linear",
        fn=fn,
        uses_y=True,
        measurability="adapted",
        profile=LipschitzProfile.from_constants(horizon=horizon, ly1=1.0),
        exact_g1=fn,
    )

    def psi(ensemble):
        wt = ensemble.levels[:, -1]
        return np.tile(wt[:, None], (1, ensemble.grid.n_nodes))

    def explicit_y(ensemble):
        # Value-linear driver with terminal-level data: exponential damping.
        w = np.exp(ensemble.grid.nodes - horizon)
        return ensemble.levels * w[None, :]

    def explicit_z(grid):
        return np.tile(np.exp(grid.nodes[:-1] - horizon)[None, :], (grid.n_nodes, 1))

    return Scenario(
        id="adapted-linear",
        kind="type1",
        horizon=horizon,
        description="adapted value-linear driver; explicit exponential solution",
        generator=gen,
        psi_fn=psi,
        explicit_y=explicit_y,
        explicit_z=explicit_z,
    )


def _zero(horizon: float = 1.0) -> Scenario:
    gen = GeneratorSpec(
        name="zero",
        fn=lambda ens, t, s, y, z, zhat: np.zeros((ens.n_paths, np.atleast_1d(t).size)),
        measurability="adapted",
        profile=LipschitzProfile.from_constants(horizon=horizon),
        exact_g1=lambda ens, t, s, y, z, zhat: np.zeros(
            (ens.n_paths, np.atleast_1d(t).size)
        ),
    )
    return Scenario(
        id="zero",
        kind="type1",
        horizon=horizon,
        description="zero data, zero solution",
        generator=gen,
        psi_fn=lambda ens: np.zeros((ens.n_paths, ens.grid.n_nodes)),
        explicit_y=lambda ens: np.zeros((ens.n_paths, ens.grid.n_nodes)),
        explicit_z=lambda grid: np.zeros((grid.n_nodes, grid.n_steps)),
    )


_FACTORIES = {
    "example-1.1": _example_11,
    "example-4.2": _example_42,
    "linear-zhat": _linear_zhat,
    "fbsde-sin": _fbsde_sin,
    "adapted-linear": _adapted_linear,
    "zero": _zero,
}

SCENARIO_IDS = tuple(sorted(_FACTORIES))


def get_scenario(scenario_id: str, **kwargs) -> Scenario:
    try:
        factory = _FACTORIES[scenario_id]
    except KeyError:
        raise InvalidArgument(
            f"unknown scenario {scenario_id!r}; catalog: {', '.join(SCENARIO_IDS)}"
        ) from None
    return factory(**kwargs)
