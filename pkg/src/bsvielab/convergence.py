"""Refinement ladders: error decay against explicit solutions or finer runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import coarsen_ensemble, make_grid, simulate_brownian
from .errors import InvalidArgument
from .regression import BasisConfig
from .scenarios import get_scenario
from .solvers import SolverConfig

__all__ = [
    "ConvergenceTable",
    "convergence_study",
    "self_refinement_gaps",
    "degree_refinement_gap",
]


@dataclass
class ConvergenceTable:
    scenario_id: str
    axis: str  # which rung coordinate varies: steps | paths | degree
    rungs: pd.DataFrame = field(repr=False)
    fitted_order: float = float("nan")

    def errors(self) -> np.ndarray:
        return self.rungs["error_y"].to_numpy()


def _validate_ladder(ladder: list[tuple[int, int, int]]) -> str:
    if len(ladder) < 3:
        raise InvalidArgument(f"ladder needs at least 3 rungs, got {len(ladder)}")
    arr = np.asarray(ladder, dtype=float)
    if np.any(arr[1:] < arr[:-1]):
        raise InvalidArgument("ladder must refine: no coordinate may decrease")
    varying = [
        name
        for col, name in ((0, "steps"), (1, "paths"), (2, "degree"))
        if np.any(arr[1:, col] > arr[:-1, col])
    ]
    if not varying:
        raise InvalidArgument("ladder must strictly refine at least one coordinate")
    # The fitted order is reported against the fastest-refining coordinate.
    spans = {
        name: arr[-1, col] / arr[0, col]
        for col, name in ((0, "steps"), (1, "paths"), (2, "degree"))
        if name in varying
    }
    return max(spans, key=spans.get)


def convergence_study(
    scenario_id: str,
    ladder: list[tuple[int, int, int]],
    cfg: SolverConfig | None = None,
    seed: int = 20240613,
) -> ConvergenceTable:
    """Solve the scenario on every rung and tabulate the error vs its
    explicit solution; the decay order is fitted by log-log regression on
    the varying coordinate.

    Each rung gets its own pinned sub-seed, so the table is reproducible.
    """
    scen = get_scenario(scenario_id)
    if scen.explicit_y is None:
        raise InvalidArgument(
            f"scenario {scenario_id!r} has no explicit solution; use"
            " self_refinement_gaps for ladder-referenced errors"
        )
    axis = _validate_ladder(ladder)
    base = cfg or SolverConfig()
    rows = []
    for idx, (steps, paths, degree) in enumerate(ladder):
        grid = make_grid(scen.horizon, int(steps))
        ensemble = simulate_brownian(grid, int(paths), seed + 1000 * idx)
        rung_cfg = SolverConfig(
            beta=base.beta,
            max_picard=base.max_picard,
            tol=base.tol,
            delta_steps=base.delta_steps,
            basis=BasisConfig(degree=int(degree), ridge=base.basis.ridge),
            certification=base.certification,
            threads=base.threads,
            store_z=False,
            compute_residual=False,
        )
        sol = scen.solve(rung_cfg, ensemble)
        err = scen.y_error(sol.y.values, ensemble)
        rows.append((int(steps), int(paths), int(degree), err))
    frame = pd.DataFrame(rows, columns=["n_steps", "n_paths", "degree", "error_y"])
    coord = frame["n_steps" if axis == "steps" else f"n_{axis}" if axis == "paths" else "degree"]
    errs = frame["error_y"].to_numpy()
    order = float("nan")
    if np.all(errs > 0):
        order = float(np.polyfit(np.log(coord.to_numpy(float)), np.log(errs), 1)[0])
    return ConvergenceTable(
        scenario_id=scenario_id, axis=axis, rungs=frame, fitted_order=order
    )


def self_refinement_gaps(
    scenario_id: str,
    steps_base: int,
    n_paths: int,
    cfg: SolverConfig | None = None,
    seed: int = 20240613,
    levels: int = 3,
    factor: int = 2,
) -> dict:
    """Pathwise gaps between a run and its step-refined re-runs.

    All levels share the path count and seed, so values at common nodes are
    comparable path by path; the finest level is the reference.  Returns the
    per-level RMS gaps and the first-gap estimate (the distance between the
    two coarsest levels), which bounds the full gap up to the decay ratio.
    """
    if levels < 2:
        raise InvalidArgument("need at least two refinement levels")
    scen = get_scenario(scenario_id)
    base = cfg or SolverConfig()
    solutions = []
    steps_list = [steps_base * factor**lv for lv in range(levels)]
    # One simulation at the finest grid; coarser runs see the same paths
    # through increment aggregation, so gaps are pure method differences.
    finest = simulate_brownian(make_grid(scen.horizon, steps_list[-1]), n_paths, seed)
    for steps in steps_list:
        ensemble = coarsen_ensemble(finest, steps_list[-1] // steps)
        sol = scen.solve(base, ensemble)
        if hasattr(sol, "bsvie"):  # family solutions carry the equation part
            sol = sol.bsvie
        stride = steps // steps_base
        solutions.append(sol.y.values[:, ::stride])
    ref = solutions[-1]
    gaps = [float(np.sqrt(np.mean((s - ref) ** 2))) for s in solutions[:-1]]
    consecutive = [
        float(np.sqrt(np.mean((solutions[i] - solutions[i + 1]) ** 2)))
        for i in range(levels - 1)
    ]
    return {
        "steps": steps_list,
        "gap_to_finest": gaps,
        "consecutive_gaps": consecutive,
        "estimate": consecutive[0],
    }


def degree_refinement_gap(
    scenario_id: str,
    n_steps: int,
    n_paths: int,
    degrees: tuple[int, int] = (3, 5),
    cfg: SolverConfig | None = None,
    seed: int = 20240613,
) -> float:
    """Pathwise gap between runs that differ only in the basis size.

    Measures the sensitivity of the solution to the projection space: the
    honest error scale of anything the regression cannot represent exactly.
    """
    scen = get_scenario(scenario_id)
    base = cfg or SolverConfig()
    ensemble = simulate_brownian(make_grid(scen.horizon, n_steps), n_paths, seed)
    values = []
    for degree in degrees:
        run_cfg = SolverConfig(
            beta=base.beta,
            max_picard=base.max_picard,
            tol=base.tol,
            basis=BasisConfig(degree=degree, ridge=base.basis.ridge),
            certification=base.certification,
        )
        sol = scen.solve(run_cfg, ensemble)
        if hasattr(sol, "bsvie"):
            sol = sol.bsvie
        values.append(sol.y.values)
    return float(np.sqrt(np.mean((values[0] - values[1]) ** 2)))
