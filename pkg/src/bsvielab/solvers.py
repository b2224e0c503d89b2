"""Picard solvers for the two-parameter backward equations.

The workhorse is a backward conditional sweep over the whole family of
outer-time slices at once: at inner step ``k`` every active slice gets its
integrand column extracted from the product regression and its value column
advanced by one conditioning step.  Anticipating free terms enter as raw
terminal data of that sweep; anticipating generator remainders are folded
into the effective free term before each sweep, while the conditioned part
rides inside the recursion evaluated at the running integrand.

Memory layout: one dense ``(n_paths, n_nodes, n_steps)`` buffer per solve,
updated in place between Picard sweeps (the previous iterate is consumed
exactly where the new one is produced), with iterate differences accumulated
streamingly for the weighted-norm stopping rule.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from .certification import WellPosednessCertificate, certify
from .core import (
    BrownianEnsemble,
    PathProcess,
    SquareField,
    TimeGrid,
    TriangleField,
)
from .errors import (
    CertificateRejected,
    InvalidArgument,
    NonConvergence,
    SolverDivergence,
)
from .generators import DecomposedGenerator, GeneratorSpec, decompose
from .regression import BasisConfig, RegressionEngine

__all__ = [
    "SolverConfig",
    "BsvieSolution",
    "PicardHistory",
    "solve_parameterized_bsde",
    "solve_type1",
    "solve_type2",
    "m_extend",
    "solve_adapted_stepping",
    "weighted_norm",
    "residual",
    "verify_solution_adaptedness",
]


@dataclass(frozen=True)
class SolverConfig:
    """Knobs shared by every solver.

    ``tol`` is relative in the beta-weighted norm; ``beta`` is the starting
    weight and is escalated along ``beta_ladder`` multiples of ``1/T`` when
    successive iterate deltas fail to contract.  ``delta_steps`` sizes the
    windows of the stepping solver, in grid steps.
    """

    p: float = 2.0
    beta: float = 0.0
    max_picard: int = 50
    tol: float = 1e-4
    delta_steps: int = 1
    basis: BasisConfig = field(default_factory=BasisConfig)
    max_inner_passes: int = 5
    certification: str = "strict"  # strict | warn | off
    beta_ladder: tuple = (0.0, 1.0, 4.0)  # in units of 1/T, starting point included
    threads: int = 1
    store_z: bool = True
    compute_residual: bool = True

    def __post_init__(self):
        if self.p != 2.0:
            raise InvalidArgument(
                "solver norms are pinned to p = 2 (other p live in the certifier)"
            )
        if self.tol <= 0:
            raise InvalidArgument("tol must be positive")
        if self.delta_steps < 1:
            raise InvalidArgument("delta_steps must be >= 1")
        if self.certification not in ("strict", "warn", "off"):
            raise InvalidArgument(f"unknown certification mode {self.certification!r}")


@dataclass
class PicardRecord:
    dy2: np.ndarray
    dz2: np.ndarray
    y2: np.ndarray
    z2: np.ndarray


@dataclass
class PicardHistory:
    """Per-sweep second moments of iterate differences, by outer node.

    Stored so that the weighted norm of any sweep can be re-evaluated at any
    beta after the fact.
    """

    grid: TimeGrid
    beta: float
    records: list[PicardRecord] = field(default_factory=list)
    beta_events: list[tuple[int, float]] = field(default_factory=list)
    converged: bool = False

    def _norm(self, dy2: np.ndarray, dz2: np.ndarray, beta: float) -> float:
        # Left-point quadrature over the outer time, like every other dt-sum.
        n = self.grid.n_steps
        w = np.exp(2.0 * beta * self.grid.nodes[:n])
        return float(np.sqrt(np.sum(w * (dy2 + dz2)[:n]) * self.grid.dt))

    def delta(self, it: int, beta: float | None = None) -> float:
        r = self.records[it]
        return self._norm(r.dy2, r.dz2, self.beta if beta is None else beta)

    def scale(self, it: int, beta: float | None = None) -> float:
        r = self.records[it]
        return self._norm(r.y2, r.z2, self.beta if beta is None else beta)

    def deltas(self, beta: float | None = None) -> list[float]:
        return [self.delta(i, beta) for i in range(len(self.records))]

    def ratios(self, beta: float | None = None) -> list[float]:
        d = self.deltas(beta)
        return [d[i] / d[i - 1] if d[i - 1] > 0 else 0.0 for i in range(1, len(d))]

    @property
    def n_iterations(self) -> int:
        return len(self.records)


@dataclass
class ReplayPack:
    """Frozen regression coefficients that re-evaluate solver outputs as
    functions of the node state on any ensemble (adaptedness audits)."""

    basis: BasisConfig
    col_scale: np.ndarray  # (n_steps, n_basis)
    zeta_coeffs: np.ndarray  # (n_nodes, n_steps, n_basis), NaN where undefined
    y_coeffs: np.ndarray | None  # (n_nodes, n_basis), NaN where undefined
    y_addend: np.ndarray | None = None  # raw per-path additive part, if any

    def replay_z(self, i: int, k: int, ensemble: BrownianEnsemble) -> np.ndarray:
        coeffs = self.zeta_coeffs[i, k]
        if np.any(np.isnan(coeffs)):
            raise InvalidArgument(f"no replayable integrand at cell ({i}, {k})")
        eng = RegressionEngine(ensemble, self.basis)
        return (eng.design(k) / self.col_scale[k]) @ coeffs

    def replay_y(self, i: int, ensemble: BrownianEnsemble) -> np.ndarray:
        if self.y_coeffs is None or np.any(np.isnan(self.y_coeffs[i])):
            raise InvalidArgument(f"no replayable value at node {i}")
        eng = RegressionEngine(ensemble, self.basis)
        out = (eng.design(i) / self.col_scale[i]) @ self.y_coeffs[i]
        if self.y_addend is not None:
            out = out + self.y_addend[:, i]
        return out


@dataclass
class BsvieSolution:
    """Solution pair plus convergence and consistency diagnostics."""

    y: PathProcess
    z: TriangleField | SquareField | None
    history: PicardHistory
    certificate: WellPosednessCertificate | None = None
    replay: ReplayPack | None = None
    reconstruction: pd.DataFrame | None = None
    residual_stats: pd.DataFrame | None = None
    meta: dict = field(default_factory=dict)


def _ordered_map(fn: Callable, items: list, threads: int):
    """Map preserving order; result accumulation happens on the caller's
    thread in item order, so the float pipeline is identical for any pool
    size."""
    if threads <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending: deque = deque()
        idx = 0
        cap = 2 * threads
        while idx < len(items) or pending:
            while idx < len(items) and len(pending) < cap:
                pending.append(pool.submit(fn, items[idx]))
                idx += 1
            yield pending.popleft().result()


def _family_backward(
    engine: RegressionEngine,
    psi_eff: np.ndarray,
    stops: np.ndarray,
    s_hi: int,
    g1_eval=None,
    on_zeta=None,
    on_final=None,
    eta_sink=None,
):
    """Backward conditional sweep for a family of slices.

    ``psi_eff[:, j]`` is the terminal (node ``s_hi``) value of slice ``j``;
    slice ``j`` is advanced while the inner step ``k >= stops[j]`` and its
    value at node ``stops[j]`` is final.  ``stops`` must be nondecreasing so
    active slices always form a prefix.  Hooks:

    * ``g1_eval(k, act, zeta) -> (values, coeffs|None)`` adapted driver;
    * ``on_zeta(k, act, zeta, coeffs)`` freshly extracted integrand columns;
    * ``on_final(j0, j1, values, y_coeffs, k)`` slices finishing at ``k``;
    * ``eta_sink(k, act, block)`` value columns after the step-``k`` update.
    """
    ens = engine.ensemble
    dt = ens.dt
    eta = psi_eff.copy()
    m = eta.shape[1]
    if m == 0 or s_hi <= stops[0]:
        return eta
    if eta_sink is not None:
        eta_sink(s_hi, m, eta)
    for k in range(s_hi - 1, int(stops[0]) - 1, -1):
        act = int(np.searchsorted(stops, k, side="right"))
        if act == 0:
            break
        block = eta[:, :act]
        dw = ens.increments[:, k][:, None]
        fit = engine.fit(k, block, record=False)
        mean_part = fit.fitted if fit.fitted.ndim == 2 else fit.fitted[:, None]
        # Same estimand as fitting block * dw directly; the projected part is
        # node-measurable so it adds no conditional mean, only variance.
        zfit = engine.fit(k, (block - mean_part) * dw, record=False)
        zeta = (zfit.fitted if zfit.fitted.ndim == 2 else zfit.fitted[:, None]) / dt
        zeta_coeffs = (zfit.coeffs if zfit.coeffs.ndim == 2 else zfit.coeffs[:, None]) / dt
        if on_zeta is not None:
            on_zeta(k, act, zeta, zeta_coeffs)
        if g1_eval is not None:
            gvals, gcoeffs = g1_eval(k, act, zeta)
            eta[:, :act] = mean_part + gvals * dt
            ycoeffs = (
                fit.coeffs[:, :act] + dt * gcoeffs if gcoeffs is not None else None
            )
        else:
            eta[:, :act] = mean_part
            ycoeffs = fit.coeffs[:, :act]
        if eta_sink is not None:
            eta_sink(k, act, eta[:, :act])
        if on_final is not None:
            j0 = int(np.searchsorted(stops, k, side="left"))
            if j0 < act:
                on_final(
                    j0,
                    act,
                    eta[:, j0:act],
                    None if ycoeffs is None else ycoeffs[:, j0:act],
                    k,
                )
    return eta


def _data_backward_sweep(
    engine: RegressionEngine,
    data: np.ndarray,
    stops: np.ndarray,
    s_hi: int,
    g1_zero=None,
    g1_at=None,
    on_zeta=None,
    on_final=None,
    eta_sink=None,
):
    """Backward sweep that never chains projections of anticipating data.

    ``data[:, j]`` is the full anticipating bracket of slice ``j`` (free term
    plus the remainder integral at frozen arguments).  At every step the
    value/integrand estimates come from a single projection of

        ``T = data + FUT + B``

    where ``FUT`` accumulates the node-conditioned driver at zero integrand
    for steps not yet passed (those terms are raw, node-measurable data once
    the sweep moves left of them) and ``B`` is the recursion for the
    integrand-increment part ``g1(zeta) - g1(0)`` (whose iterated
    projections only ever see node-state functions, which the polynomial
    basis conditions faithfully).  Chaining projections of the raw bracket
    itself would smear its path-dependent terms: the node basis spans
    functions of the current state only, so a projection of a projection is
    not the projection of the conditional expectation.

    ``g1_zero(k, act) -> (values, coeffs)`` and
    ``g1_at(k, act, zeta) -> (values, coeffs)`` evaluate the conditioned
    driver; both may be None (pure data conditioning / no integrand
    feedback).  Hooks are as in the plain family sweep.
    """
    ens = engine.ensemble
    dt = ens.dt
    n_paths, m = data.shape
    if m == 0 or s_hi <= stops[0]:
        return
    if eta_sink is not None:
        eta_sink(s_hi, m, data)
    fut = np.zeros((n_paths, m)) if g1_zero is not None else None
    bpart = np.zeros((n_paths, m)) if g1_at is not None else None
    for k in range(s_hi - 1, int(stops[0]) - 1, -1):
        act = int(np.searchsorted(stops, k, side="right"))
        if act == 0:
            break
        bracket = data[:, :act]
        if fut is not None:
            bracket = bracket + fut[:, :act]
        if bpart is not None:
            bracket = bracket + bpart[:, :act]
        dw = ens.increments[:, k][:, None]
        groups = [bracket]
        if bpart is not None:
            groups.append(bpart[:, :act])
        fit = engine.fit(k, np.concatenate(groups, axis=1), record=False)
        mean_t = fit.fitted[:, :act]
        # Control variate: the node-projected bracket has zero conditional
        # covariance with the increment, so subtracting it before the product
        # regression changes nothing in mean and much in variance.
        zfit = engine.fit(k, (bracket - mean_t) * dw, record=False)
        zeta = zfit.fitted / dt
        zeta_coeffs = zfit.coeffs / dt
        if on_zeta is not None:
            on_zeta(k, act, zeta, zeta_coeffs)
        g10 = g10_coeffs = None
        if g1_zero is not None:
            g10, g10_coeffs = g1_zero(k, act)
        if g1_at is not None:
            g1z, g1z_coeffs = g1_at(k, act, zeta)
            mean_b = fit.fitted[:, act : 2 * act]
            bpart[:, :act] = mean_b + (g1z - g10) * dt
        else:
            g1z, g1z_coeffs = g10, g10_coeffs
        if g1z is not None:
            values = mean_t + g1z * dt
            ycoeffs = (
                fit.coeffs[:, :act] + dt * g1z_coeffs
                if g1z_coeffs is not None
                else None
            )
        else:
            values = mean_t
            ycoeffs = fit.coeffs[:, :act]
        if eta_sink is not None:
            eta_sink(k, act, values)
        if on_final is not None:
            j0 = int(np.searchsorted(stops, k, side="left"))
            if j0 < act:
                on_final(
                    j0,
                    act,
                    values[:, j0:act],
                    None if ycoeffs is None else ycoeffs[:, j0:act],
                    k,
                )
        if fut is not None:
            fut[:, :act] += g10 * dt


@dataclass
class ParameterizedBsdePath:
    """One slice of the family: value/integrand trajectories on ``[t, T]``."""

    t_node: int
    eta: np.ndarray  # (n_paths, n_nodes); columns < t_node are NaN
    zeta: np.ndarray  # (n_paths, n_steps); columns < t_node are NaN


def solve_parameterized_bsde(
    t_node: int,
    free_term: np.ndarray,
    g_slice: Callable[[int, np.ndarray], np.ndarray] | None,
    ensemble: BrownianEnsemble,
    basis: BasisConfig,
) -> ParameterizedBsdePath:
    """Single backward recursion from terminal data ``free_term``.

    ``free_term`` may be terminal-time measurable (the anticipating route);
    ``g_slice(s_idx, zeta)`` must return values that are measurable at the
    inner node.  The recursion is the one-slice case of the family sweep.
    """
    grid = ensemble.grid
    t_node = grid.require_node(t_node)
    free = np.asarray(free_term, dtype=float)
    if free.shape != (ensemble.n_paths,):
        raise InvalidArgument(f"free_term must be (n_paths,), got {free.shape}")
    engine = RegressionEngine(ensemble, basis)
    eta = np.full((ensemble.n_paths, grid.n_nodes), np.nan)
    zeta = np.full((ensemble.n_paths, grid.n_steps), np.nan)
    eta[:, grid.n_steps] = free

    def eta_sink(k, act, block):
        if k < grid.n_steps:
            eta[:, k] = block[:, 0]

    def on_zeta(k, act, z, coeffs):
        zeta[:, k] = z[:, 0]

    wrapped = None
    if g_slice is not None:

        def wrapped(k, act, z):
            return np.asarray(g_slice(k, z[:, 0]), dtype=float)[:, None], None

    _family_backward(
        engine,
        free[:, None],
        stops=np.array([t_node]),
        s_hi=grid.n_steps,
        g1_eval=wrapped,
        on_zeta=on_zeta,
        eta_sink=eta_sink,
    )
    return ParameterizedBsdePath(t_node=t_node, eta=eta, zeta=zeta)


def _as_values(psi, ensemble: BrownianEnsemble) -> np.ndarray:
    if isinstance(psi, PathProcess):
        if psi.grid != ensemble.grid:
            raise InvalidArgument("free term and ensemble grids differ")
        vals = psi.values
    else:
        vals = np.asarray(psi, dtype=float)
    if vals.shape != (ensemble.n_paths, ensemble.grid.n_nodes):
        raise InvalidArgument(
            f"free term must be (n_paths, n_nodes), got {vals.shape}"
        )
    return vals


def _check_certificate(
    generator: GeneratorSpec, cfg: SolverConfig
) -> WellPosednessCertificate | None:
    if cfg.certification == "off":
        return None
    if generator.profile is None:
        if cfg.certification == "strict":
            raise CertificateRejected(
                f"generator {generator.name!r} carries no Lipschitz profile;"
                " pass certification='warn' to solve anyway"
            )
        return None
    cert = certify(generator.profile)
    if not cert.accepted and cfg.certification == "strict":
        raise CertificateRejected(
            f"certificate rejected (margin {cert.margin:.4g})", certificate=cert
        )
    return cert


def _lipschitz_step_check(generator: GeneratorSpec, grid: TimeGrid):
    # The one-step update is contractive in the integrand only when
    # Lz * dt < 1; probe the declared adapted-part profile on the node mesh.
    prof = generator.profile
    if prof is None:
        return
    tt, ss = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
    keep = ss >= tt
    sup = float(np.max(prof.lz1(tt[keep], ss[keep]))) if keep.any() else 0.0
    if sup * grid.dt >= 1.0:
        raise SolverDivergence(
            f"integrand Lipschitz rate {sup:.3g} times dt {grid.dt:.3g} reaches 1;"
            " refine the grid"
        )


def _beta_ladder(cfg: SolverConfig, horizon: float) -> list[float]:
    ladder = sorted({cfg.beta} | {b / horizon for b in cfg.beta_ladder if b / horizon > cfg.beta})
    return ladder


class _PicardState:
    """Streaming accumulators for one Picard sweep."""

    def __init__(self, n_nodes, dt):
        self.dy2 = np.zeros(n_nodes)
        self.dz2 = np.zeros(n_nodes)
        self.y2 = np.zeros(n_nodes)
        self.z2 = np.zeros(n_nodes)
        self.dt = dt

    def take_z(self, old: np.ndarray, new: np.ndarray, rows: slice):
        self.dz2[rows] += np.mean((new - old) ** 2, axis=0) * self.dt
        self.z2[rows] += np.mean(new**2, axis=0) * self.dt

    def take_y(self, old: np.ndarray, new: np.ndarray, idx):
        self.dy2[idx] = np.mean((new - old) ** 2, axis=0)
        self.y2[idx] = np.mean(new**2, axis=0)

    def record(self) -> PicardRecord:
        return PicardRecord(dy2=self.dy2, dz2=self.dz2, y2=self.y2, z2=self.z2)


def _zhat_args(zbuf: np.ndarray | None, k: int, act: int) -> np.ndarray | None:
    """Transposed-field arguments ``Z(s_k, t_i)`` for slices ``i < act``.

    Reads the defining-extension cells of row ``k``; the diagonal cell is
    never consumed (zero is substituted on the measure-zero cell ``i = k``).
    """
    if zbuf is None:
        return None
    zh = zbuf[:, k, :act].copy()
    if act > k:
        zh[:, k] = 0.0
    return zh


def _assemble_free_term(
    dec: DecomposedGenerator,
    psi: np.ndarray,
    y_prev: np.ndarray,
    zbuf: np.ndarray | None,
    use_zhat: bool,
    cfg: SolverConfig,
) -> np.ndarray:
    """Fold the anticipating remainder at frozen iterate arguments into the
    free term: ``psi_eff(t_i) = psi(t_i) + sum_k g0(t_i, s_k, ...) dt``."""
    gen = dec.generator
    ens = dec.ensemble
    grid = ens.grid
    n = grid.n_steps
    psi_eff = psi.copy()
    nodes = grid.nodes

    def task(k):
        act = k + 1
        y_arg = y_prev[:, k] if gen.uses_y else None
        z_arg = zbuf[:, :act, k] if (gen.uses_z and zbuf is not None) else None
        zh_arg = _zhat_args(zbuf, k, act) if use_zhat else None
        _, g0, _ = dec.split(nodes[:act], k, y_arg, z_arg, zh_arg)
        return k, g0

    for k, g0 in _ordered_map(task, list(range(n)), cfg.threads):
        psi_eff[:, : k + 1] += g0 * grid.dt
    return psi_eff


def _m_extension_inplace(
    engine: RegressionEngine,
    y_values: np.ndarray,
    zbuf: np.ndarray,
):
    """Fill defining-extension cells ``Z(t_i, s_j), j < i`` from the values:
    the integrand representing ``Y(t_i) - E[Y(t_i)]`` over ``[0, t_i)``.

    All rows are conditioned down one shared backward chain (each step is a
    single multi-column fit), which keeps the per-step extraction noise local
    rather than proportional to the raw value spread.
    """
    ens = engine.ensemble
    n = ens.grid.n_steps
    dt = ens.dt
    eta = np.array(y_values[:, 1:])  # column r holds row r+1 conditioned so far
    for j in range(n - 1, -1, -1):
        block = eta[:, j:]
        projected = engine.fit(j, block, record=False).fitted
        targets = (block - projected) * ens.increments[:, j][:, None]
        zbuf[:, j + 1 :, j] = engine.fit(j, targets, record=False).fitted / dt
        eta[:, j:] = projected


def _reconstruction_frame(
    y_values: np.ndarray, zbuf: np.ndarray, ensemble: BrownianEnsemble
) -> pd.DataFrame:
    from .regression import reconstruction_error

    rows = []
    for i in range(1, ensemble.grid.n_nodes):
        err = reconstruction_error(y_values[:, i], zbuf[:, i, :i], ensemble)
        rows.append((i, err))
    return pd.DataFrame(rows, columns=["node", "reconstruction_error"])


def _run_picard(
    psi: np.ndarray,
    generator: GeneratorSpec,
    cfg: SolverConfig,
    ensemble: BrownianEnsemble,
    use_zhat: bool,
    exact_decomposition: bool,
) -> tuple[np.ndarray, np.ndarray | None, PicardHistory, ReplayPack | None]:
    grid = ensemble.grid
    n = grid.n_steps
    n_paths = ensemble.n_paths
    engine = RegressionEngine(ensemble, cfg.basis)
    dec = decompose(generator, ensemble, cfg.basis, exact=exact_decomposition)
    dec.engine = engine
    nodes = grid.nodes

    if not cfg.store_z and (generator.uses_z or use_zhat):
        raise InvalidArgument("store_z=False requires a generator without z/zhat use")
    zbuf = np.zeros((n_paths, n + 1, n)) if cfg.store_z else None
    y_prev = np.zeros((n_paths, n + 1))

    nb = cfg.basis.n_functions
    col_scale = np.empty((n, nb))
    zeta_coeffs = np.full((n + 1, n, nb), np.nan)
    y_coeffs = np.full((n + 1, nb), np.nan)
    capture_coeffs = not exact_decomposition

    ladder = _beta_ladder(cfg, grid.horizon)
    beta_idx = 0
    history = PicardHistory(grid=grid, beta=ladder[0])

    stops = np.arange(n)
    converged = False
    for it in range(cfg.max_picard):
        state = _PicardState(n + 1, grid.dt)
        psi_eff = _assemble_free_term(dec, psi, y_prev, zbuf, use_zhat, cfg)
        y_new = np.empty_like(y_prev)
        y_new[:, n] = psi_eff[:, n]
        state.take_y(y_prev[:, n], y_new[:, n], n)

        def g1_zero(k, act):
            y_arg = y_prev[:, k] if generator.uses_y else None
            z_arg = np.zeros((n_paths, act)) if generator.uses_z else None
            zh_arg = _zhat_args(zbuf, k, act) if use_zhat else None
            g1, _, fit = dec.split(nodes[:act], k, y_arg, z_arg, zh_arg)
            return g1, (fit.coeffs if fit is not None else None)

        g1_at = None
        if generator.uses_z:

            def g1_at(k, act, zeta):
                y_arg = y_prev[:, k] if generator.uses_y else None
                zh_arg = _zhat_args(zbuf, k, act) if use_zhat else None
                g1, _, fit = dec.split(nodes[:act], k, y_arg, zeta, zh_arg)
                return g1, (fit.coeffs if fit is not None else None)

        def on_zeta(k, act, zeta, coeffs):
            if zbuf is not None:
                state.take_z(zbuf[:, :act, k], zeta, slice(0, act))
                zbuf[:, :act, k] = zeta
            if capture_coeffs:
                col_scale[k] = engine._factorize(k)[1]
                zeta_coeffs[:act, k, :] = coeffs.T

        def on_final(j0, j1, vals, ycf, k):
            state.take_y(y_prev[:, j0:j1], vals, slice(j0, j1))
            y_new[:, j0:j1] = vals
            if capture_coeffs and ycf is not None:
                y_coeffs[j0:j1, :] = ycf.T

        _data_backward_sweep(
            engine,
            psi_eff[:, :n],
            stops,
            s_hi=n,
            g1_zero=g1_zero,
            g1_at=g1_at,
            on_zeta=on_zeta,
            on_final=on_final,
        )
        y_prev = y_new
        if use_zhat and zbuf is not None:
            _m_extension_inplace(engine, y_new, zbuf)
        history.records.append(state.record())

        beta = ladder[beta_idx]
        delta = history.delta(it, beta)
        scale = history.scale(it, beta)
        if delta <= cfg.tol * scale + 1e-15:
            converged = True
            break
        ratios = history.ratios(beta)
        if len(ratios) >= 2 and min(ratios[-2:]) >= 1.0 and beta_idx + 1 < len(ladder):
            beta_idx += 1
            history.beta_events.append((it, ladder[beta_idx]))
    history.beta = ladder[beta_idx]
    history.converged = converged
    if not converged:
        raise NonConvergence(
            f"no contraction to tol {cfg.tol} within {cfg.max_picard} sweeps",
            history=history,
        )

    replay = None
    if capture_coeffs:
        replay = ReplayPack(
            basis=cfg.basis,
            col_scale=col_scale,
            zeta_coeffs=zeta_coeffs,
            y_coeffs=y_coeffs,
        )
    return y_prev, zbuf, history, replay


def solve_type1(
    psi,
    generator: GeneratorSpec,
    cfg: SolverConfig,
    ensemble: BrownianEnsemble,
    exact_decomposition: bool = False,
) -> BsvieSolution:
    """Solve the one-sided equation (no transposed-field argument).

    Each Picard sweep folds the anticipating remainder of the generator,
    evaluated at the frozen iterate, into the free term and solves the
    resulting family of backward recursions; the iterate map stops when
    successive differences fall below ``tol`` in the weighted norm.
    """
    if generator.uses_zhat:
        raise InvalidArgument("generator consumes the transposed field: use solve_type2")
    psi_vals = _as_values(psi, ensemble)
    cert = _check_certificate(generator, cfg)
    _lipschitz_step_check(generator, ensemble.grid)
    y, zbuf, history, replay = _run_picard(
        psi_vals, generator, cfg, ensemble, use_zhat=False,
        exact_decomposition=exact_decomposition,
    )
    sol = BsvieSolution(
        y=PathProcess(ensemble.grid, y),
        z=TriangleField(ensemble.grid, zbuf) if zbuf is not None else None,
        history=history,
        certificate=cert,
        replay=replay,
        meta={"kind": "type1", "generator": generator.name},
    )
    if cfg.compute_residual and sol.z is not None:
        sol.residual_stats = residual(sol, psi_vals, generator, ensemble)
    return sol


def solve_type2(
    psi,
    generator: GeneratorSpec,
    cfg: SolverConfig,
    ensemble: BrownianEnsemble,
    exact_decomposition: bool = False,
) -> BsvieSolution:
    """Solve the two-sided equation; the output field is defined on the full
    square via the defining extension, refreshed after every sweep so the
    transposed values feed the next one."""
    psi_vals = _as_values(psi, ensemble)
    if not cfg.store_z:
        raise InvalidArgument("the two-sided solve must store its field")
    cert = _check_certificate(generator, cfg)
    _lipschitz_step_check(generator, ensemble.grid)
    y, zbuf, history, replay = _run_picard(
        psi_vals, generator, cfg, ensemble, use_zhat=True,
        exact_decomposition=exact_decomposition,
    )
    sol = BsvieSolution(
        y=PathProcess(ensemble.grid, y),
        z=SquareField(ensemble.grid, zbuf),
        history=history,
        certificate=cert,
        replay=replay,
        meta={"kind": "type2", "generator": generator.name},
    )
    sol.reconstruction = _reconstruction_frame(y, zbuf, ensemble)
    if cfg.compute_residual:
        sol.residual_stats = residual(sol, psi_vals, generator, ensemble)
    return sol


def m_extend(
    solution: BsvieSolution,
    basis: BasisConfig,
    ensemble: BrownianEnsemble,
    threads: int = 1,
) -> SquareField:
    """Extend a triangular solution field to the full square.

    Cells ``j < i`` get the representing integrand of ``Y(t_i)``; the
    triangle's storage is adopted in place (its valid cells are untouched).
    Per-node reconstruction errors are attached to the solution.
    """
    if solution.z is None:
        raise InvalidArgument("solution carries no field to extend")
    if isinstance(solution.z, SquareField):
        return solution.z
    engine = RegressionEngine(ensemble, basis)
    square = SquareField.adopt_triangle(solution.z)
    _m_extension_inplace(engine, solution.y.values, square.values)
    solution.reconstruction = _reconstruction_frame(
        solution.y.values, square.values, ensemble
    )
    solution.z = square
    return square


def weighted_norm(dy, dz, beta: float, p: float, grid: TimeGrid | None = None) -> float:
    """Exponentially weighted norm of a (value, field) pair.

    ``{ E[ sum_i e^{beta p t_i} |Y_i|^p dt
         + sum_i e^{beta p t_i} (sum_{k>=i} Z_ik^2 dt)^{p/2} dt ] }^{1/p}``.
    """
    if p <= 1:
        raise InvalidArgument(f"p must exceed 1, got {p}")
    if isinstance(dy, PathProcess):
        grid = dy.grid
        yv = dy.values
    else:
        if grid is None:
            raise InvalidArgument("grid required for raw arrays")
        yv = np.asarray(dy, dtype=float)
    n = grid.n_steps
    w = np.exp(beta * p * grid.nodes[:n])  # left-point rule in the outer time
    total = np.mean(np.abs(yv[:, :n]) ** p @ w) * grid.dt
    if dz is not None:
        zv = dz.values if isinstance(dz, (TriangleField, SquareField)) else np.asarray(dz)
        quad = np.zeros((zv.shape[0], n))
        for i in range(n):
            quad[:, i] = np.sum(zv[:, i, i:] ** 2, axis=1) * grid.dt
        total += np.mean(quad ** (p / 2.0) @ w) * grid.dt
    return float(total ** (1.0 / p))


def solve_adapted_stepping(
    psi,
    generator: GeneratorSpec,
    cfg: SolverConfig,
    ensemble: BrownianEnsemble,
) -> BsvieSolution:
    """Window-stepping reference solver for adapted generators.

    Solves on ``[T - delta, T]`` by a local fixed point, then converts the
    determined tail into a boundary-measurable free term for the remaining
    horizon by one auxiliary backward pass per window (which also fills the
    field columns under the tail), and recurses leftward.  Anticipating
    generators are refused: the tail conversion would not make the shortened
    equation's data measurable at the window boundary.
    """
    if generator.measurability != "adapted":
        raise InvalidArgument(
            "the stepping solver needs an adapted generator: with a"
            " terminal-measurable driver the converted free term stays"
            " terminal-measurable and the shortened equation is ill-posed;"
            " use the decomposition route instead"
        )
    if generator.uses_zhat:
        raise InvalidArgument("stepping solver covers one-sided equations only")
    psi_vals = _as_values(psi, ensemble)
    cert = _check_certificate(generator, cfg)
    _lipschitz_step_check(generator, ensemble.grid)
    grid = ensemble.grid
    n = grid.n_steps
    n_paths = ensemble.n_paths
    nodes = grid.nodes
    engine = RegressionEngine(ensemble, cfg.basis)
    delta = min(cfg.delta_steps, n)

    zbuf = np.zeros((n_paths, n + 1, n))
    y_out = np.zeros((n_paths, n + 1))
    psi_cur = psi_vals.copy()
    y_out[:, n] = psi_vals[:, n]
    history = PicardHistory(grid=grid, beta=cfg.beta)

    b = n
    while b > 0:
        a = max(0, b - delta)
        y_win = np.zeros((n_paths, n + 1))
        y_win[:, b:] = y_out[:, b:]
        win_deltas = []
        for inner in range(cfg.max_picard):
            state = _PicardState(n + 1, grid.dt)

            def g1_eval(k, act, zeta, base=a):
                y_arg = y_win[:, k] if generator.uses_y else None
                z_arg = zeta if generator.uses_z else None
                vals = generator.evaluate(
                    ensemble, nodes[base : base + act], k, y_arg, z_arg, None
                )
                return vals, None

            def on_zeta(k, act, zeta, coeffs, base=a):
                state.take_z(zbuf[:, base : base + act, k], zeta, slice(base, base + act))
                zbuf[:, base : base + act, k] = zeta

            new_win = np.empty((n_paths, b - a))

            def on_final(j0, j1, vals, ycf, k, base=a):
                state.take_y(y_win[:, base + j0 : base + j1], vals, slice(base + j0, base + j1))
                new_win[:, j0:j1] = vals

            _family_backward(
                engine,
                psi_cur[:, a:b],
                stops=np.arange(a, b),
                s_hi=b,
                g1_eval=g1_eval,
                on_zeta=on_zeta,
                on_final=on_final,
            )
            dseg = float(np.sqrt(np.sum(state.dy2[a:b] + state.dz2[a:b]) * grid.dt))
            sseg = float(np.sqrt(np.sum(state.y2[a:b] + state.z2[a:b]) * grid.dt))
            y_win[:, a:b] = new_win
            win_deltas.append(dseg)
            history.records.append(state.record())
            if dseg <= cfg.tol * sseg + 1e-15:
                break
            if len(win_deltas) >= 3 and win_deltas[-1] > win_deltas[-2] > win_deltas[-3]:
                raise SolverDivergence(
                    f"window [{a}, {b}) fixed point is not contracting;"
                    " try smaller delta_steps"
                )
        else:
            raise NonConvergence(
                f"window [{a}, {b}) exhausted {cfg.max_picard} passes", history=history
            )
        y_out[:, a:b] = y_win[:, a:b]

        if a > 0:
            # Auxiliary pass: convert the determined tail into boundary data
            # for every remaining slice, filling their field columns under it.
            def g1_tail(k, act, zeta):
                y_arg = y_out[:, k] if generator.uses_y else None
                z_arg = zeta if generator.uses_z else None
                vals = generator.evaluate(ensemble, nodes[:act], k, y_arg, z_arg, None)
                return vals, None

            def on_zeta_tail(k, act, zeta, coeffs):
                zbuf[:, :act, k] = zeta

            eta_at_a = _family_backward(
                engine,
                psi_cur[:, :a],
                stops=np.full(a, a),
                s_hi=b,
                g1_eval=g1_tail,
                on_zeta=on_zeta_tail,
            )
            psi_cur[:, :a] = eta_at_a
        b = a

    history.converged = True
    sol = BsvieSolution(
        y=PathProcess(grid, y_out),
        z=TriangleField(grid, zbuf),
        history=history,
        certificate=cert,
        meta={"kind": "stepping", "generator": generator.name, "delta_steps": delta},
    )
    if cfg.compute_residual:
        sol.residual_stats = residual(sol, psi_vals, generator, ensemble)
    return sol


def residual(
    solution: BsvieSolution,
    psi,
    generator: GeneratorSpec,
    ensemble: BrownianEnsemble,
) -> pd.DataFrame:
    """Pathwise equation defect per outer node.

    ``r(t_i) = Y(t_i) - psi(t_i) - sum_k g(...) dt + sum_k Z(t_i, s_k) dW_k``
    over ``k >= i``; reports the cross-path RMS per node plus the value scale.
    """
    if solution.z is None:
        raise InvalidArgument("residual needs a stored field")
    psi_vals = _as_values(psi, ensemble)
    grid = ensemble.grid
    n = grid.n_steps
    zv = solution.z.values
    yv = solution.y.values
    is_square = isinstance(solution.z, SquareField)
    r = yv - psi_vals
    for k in range(n):
        act = k + 1
        y_arg = yv[:, k] if generator.uses_y else None
        z_arg = zv[:, :act, k] if generator.uses_z else None
        zh_arg = _zhat_args(zv, k, act) if (generator.uses_zhat and is_square) else None
        g = generator.evaluate(ensemble, grid.nodes[:act], k, y_arg, z_arg, zh_arg)
        r[:, :act] += zv[:, :act, k] * ensemble.increments[:, k][:, None] - g * grid.dt
    rms = np.sqrt(np.mean(r**2, axis=0))
    scale = np.sqrt(np.mean(yv**2, axis=0))
    return pd.DataFrame(
        {"node": np.arange(n + 1), "rms_residual": rms, "y_scale": scale}
    )


def verify_solution_adaptedness(
    solution: BsvieSolution,
    ensemble: BrownianEnsemble,
    seed: int = 24680,
    max_cells: int = 64,
) -> float:
    """Largest deviation of replayed output cells under future resampling.

    Each stored integrand cell ``Z(t_i, s_k)`` is re-evaluated, through its
    frozen fit, on an ensemble whose increments after ``s_k`` are redrawn;
    node values likewise after their own node.  Nonzero deviation means some
    output consumed information from beyond its node.
    """
    if solution.replay is None:
        raise InvalidArgument("solution carries no replayable fits")
    grid = ensemble.grid
    n = grid.n_steps
    rng = np.random.Generator(np.random.Philox(key=seed))
    cells = [(i, k) for i in range(n) for k in range(i, n)]
    if len(cells) > max_cells:
        sel = rng.choice(len(cells), size=max_cells, replace=False)
        cells = [cells[int(s)] for s in sel]
    worst = 0.0
    from .core import resample_after

    for i, k in cells:
        base = solution.replay.replay_z(i, k, ensemble)
        probe = solution.replay.replay_z(i, k, resample_after(ensemble, k, seed))
        worst = max(worst, float(np.max(np.abs(base - probe))))
    if solution.replay.y_coeffs is not None:
        for i in range(0, n, max(1, n // 8)):
            if np.any(np.isnan(solution.replay.y_coeffs[i])):
                continue
            base = solution.replay.replay_y(i, ensemble)
            probe = solution.replay.replay_y(i, resample_after(ensemble, i, seed))
            worst = max(worst, float(np.max(np.abs(base - probe))))
    return worst
