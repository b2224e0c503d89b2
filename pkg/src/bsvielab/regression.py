"""Empirical conditional expectations by least-squares projection.

The conditioning information at node ``s`` is summarised by the Markovian
statistic ``(s, W(s))``; the basis is the polynomial family ``1, W(s), ...,
W(s)^degree`` with a small ridge term.  At a fixed node the time coordinate
is constant, so it only enters through the node index.

This is the single place where the abstract operator ``E_s`` becomes
numerical; its bias is reported, not hidden (see ``diagnostics_frame``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import BrownianEnsemble
from .errors import InvalidArgument, NumericalFailure

__all__ = [
    "BasisConfig",
    "RegressionEngine",
    "NodeFit",
    "conditional_expectation",
    "martingale_representation",
    "reconstruction_error",
    "ConditionalOracle",
    "EXACT_CONDITIONAL_CASES",
]

_COND_LIMIT = 1e14


@dataclass(frozen=True)
class BasisConfig:
    """Polynomial regression basis in ``(W(s), s)``.

    ``degree`` counts powers of ``W(s)`` (the time coordinate is fixed per
    node); ``ridge`` is added to the unit-scaled Gram matrix.
    """

    degree: int = 3
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0:
            raise InvalidArgument(f"degree must be >= 0, got {self.degree}")
        if self.ridge < 0:
            raise InvalidArgument(f"ridge must be >= 0, got {self.ridge}")

    @property
    def n_functions(self) -> int:
        return self.degree + 1


@dataclass
class NodeFit:
    """Result of one least-squares projection at a grid node."""

    node: int
    fitted: np.ndarray
    coeffs: np.ndarray
    col_scale: np.ndarray
    condition_number: float
    residual_norm: float


class RegressionEngine:
    """Per-node projection machinery bound to one ensemble and basis.

    Gram factorizations are cached per node; design matrices are rebuilt on
    demand (cheap powers of ``W``) to keep memory flat at large path counts.
    All fits at a node share one factorization, so multi-column targets are
    handled as a single matrix solve.
    """

    def __init__(self, ensemble: BrownianEnsemble, basis: BasisConfig):
        self.ensemble = ensemble
        self.basis = basis
        self._factor: dict[int, tuple[np.ndarray, np.ndarray, float]] = {}
        self.diagnostics: list[tuple[int, float, float]] = []

    def design(self, node: int, levels: np.ndarray | None = None) -> np.ndarray:
        w = (self.ensemble.levels if levels is None else levels)[:, node]
        cols = [np.ones_like(w)]
        for _ in range(self.basis.degree):
            cols.append(cols[-1] * w)
        return np.stack(cols, axis=1)

    def _factorize(self, node: int):
        cached = self._factor.get(node)
        if cached is not None:
            return cached
        x = self.design(node)
        n = x.shape[0]
        scale = np.sqrt(np.mean(x * x, axis=0))
        scale[scale == 0.0] = 1.0
        xs = x / scale
        gram = xs.T @ xs / n + self.basis.ridge * np.eye(self.basis.n_functions)
        eigs = np.linalg.eigvalsh(gram)
        cond = float(eigs[-1] / eigs[0]) if eigs[0] > 0 else np.inf
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise NumericalFailure(
                f"regression design at node {node} is rank deficient after ridge"
                f" (condition number {cond:.3e})",
                condition_number=cond,
            )
        chol = np.linalg.cholesky(gram)
        self._factor[node] = (chol, scale, cond)
        return self._factor[node]

    def fit(self, node: int, targets: np.ndarray, record: bool = True) -> NodeFit:
        """Project ``targets`` (one column per target) on the node basis."""
        node = self.ensemble.grid.require_node(node)
        chol, scale, cond = self._factorize(node)
        y = np.asarray(targets, dtype=float)
        squeeze = y.ndim == 1
        if squeeze:
            y = y[:, None]
        if y.shape[0] != self.ensemble.n_paths:
            raise InvalidArgument(
                f"targets have {y.shape[0]} rows, ensemble has {self.ensemble.n_paths}"
            )
        xs = self.design(node) / scale
        rhs = xs.T @ y / xs.shape[0]
        beta = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        fitted = xs @ beta
        resid = float(np.sqrt(np.mean((y - fitted) ** 2)))
        if record:
            self.diagnostics.append((node, cond, resid))
        if squeeze:
            fitted = fitted[:, 0]
            beta = beta[:, 0]
        return NodeFit(
            node=node,
            fitted=fitted,
            coeffs=beta,
            col_scale=scale,
            condition_number=cond,
            residual_norm=resid,
        )

    def fitted(self, node: int, targets: np.ndarray) -> np.ndarray:
        return self.fit(node, targets, record=False).fitted

    def replay(self, fit: NodeFit, ensemble: BrownianEnsemble) -> np.ndarray:
        """Re-evaluate a frozen fit on another ensemble's node states.

        The coefficients and column scales are fixed, so the output is the
        same deterministic function of ``W(s)`` applied to new paths.
        """
        xs = self.design(fit.node, levels=ensemble.levels) / fit.col_scale
        return xs @ fit.coeffs

    def diagnostics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.diagnostics, columns=["node", "condition_number", "residual_norm"]
        )


def conditional_expectation(
    samples: np.ndarray,
    node: int,
    basis: BasisConfig,
    ensemble: BrownianEnsemble,
) -> np.ndarray:
    """Fitted values of the regression of ``samples`` on the node basis.

    The output is a deterministic function of ``(s, W(s))`` per path; at the
    initial node it collapses to the sample mean.
    """
    return RegressionEngine(ensemble, basis).fitted(node, samples)


def martingale_representation(
    y_at_t: np.ndarray,
    t_node: int,
    basis: BasisConfig,
    ensemble: BrownianEnsemble,
    engine: RegressionEngine | None = None,
) -> np.ndarray:
    """Integrand ``Z(t, s_j)`` on ``[0, t)`` representing an F_t-measurable sample.

    Computed stepwise as ``Z(t, s_j) = E_{s_j}[y dW_j] / dt``; together with
    the mean, ``E[y] + sum_j Z dW_j`` reconstructs ``y_at_t``.  ``t_node = 0``
    returns an empty slice (nothing to represent).
    """
    t_node = ensemble.grid.require_node(t_node)
    eng = engine or RegressionEngine(ensemble, basis)
    y = np.asarray(y_at_t, dtype=float)
    z = np.empty((ensemble.n_paths, t_node))
    dt = ensemble.dt
    # Backward conditioning chain: the integrand at step j is extracted from
    # the value already conditioned to node j+1, which keeps the per-step
    # noise local (the polynomial basis is closed under one-step Gaussian
    # conditioning).  Centering by the node projection strips the variance of
    # the product target without moving its conditional mean.
    eta = y
    for j in range(t_node - 1, -1, -1):
        projected = eng.fitted(j, eta)
        z[:, j] = eng.fitted(j, (eta - projected) * ensemble.increments[:, j]) / dt
        eta = projected
    return z


def reconstruction_error(
    y_at_t: np.ndarray,
    z_slice: np.ndarray,
    ensemble: BrownianEnsemble,
) -> float:
    """Relative L2 error of ``y - E[y] - sum_j z dW_j`` across paths.

    The mean is the free constant of the representation, so the defect is
    measured after centering (otherwise the empirical mean of the stochastic
    sum would pollute an exact discrete identity).
    """
    y = np.asarray(y_at_t, dtype=float)
    z = np.asarray(z_slice, dtype=float)
    t_node = z.shape[1]
    resid = y - np.sum(z * ensemble.increments[:, :t_node], axis=1)
    scale = float(np.sqrt(np.mean(y**2)))
    err = float(np.std(resid))
    if scale == 0.0:
        return 0.0 if err == 0.0 else np.inf
    return err / scale


def _exact_terminal_level(ensemble, node, horizon):
    return ensemble.levels[:, node].copy()


def _exact_terminal_level_squared(ensemble, node, horizon):
    w = ensemble.levels[:, node]
    return w * w + (horizon - ensemble.grid.node_time(node))


def _exact_sin_terminal_level(ensemble, node, horizon):
    tau = horizon - ensemble.grid.node_time(node)
    return np.sin(ensemble.levels[:, node]) * np.exp(-tau / 2.0)


def _exact_cos_terminal_level(ensemble, node, horizon):
    tau = horizon - ensemble.grid.node_time(node)
    return np.cos(ensemble.levels[:, node]) * np.exp(-tau / 2.0)


#: Catalogued Gaussian closed forms for E_s of terminal-time functionals.
EXACT_CONDITIONAL_CASES = {
    "terminal-level": _exact_terminal_level,
    "terminal-level-squared": _exact_terminal_level_squared,
    "sin-terminal-level": _exact_sin_terminal_level,
    "cos-terminal-level": _exact_cos_terminal_level,
}


@dataclass(frozen=True)
class ConditionalOracle:
    """Conditional-expectation evaluator, either regression-based or an exact
    Gaussian closed form for catalogued test functionals."""

    mode: str = "regression"
    case: str | None = None
    basis: BasisConfig = field(default_factory=BasisConfig)

    def __post_init__(self):
        if self.mode not in ("regression", "exact-gaussian"):
            raise InvalidArgument(f"unknown oracle mode {self.mode!r}")
        if self.mode == "exact-gaussian" and self.case not in EXACT_CONDITIONAL_CASES:
            raise InvalidArgument(
                f"exact mode needs a catalogued case, got {self.case!r};"
                f" known: {sorted(EXACT_CONDITIONAL_CASES)}"
            )

    def evaluate(
        self,
        samples: np.ndarray | None,
        node: int,
        ensemble: BrownianEnsemble,
    ) -> np.ndarray:
        if self.mode == "regression":
            if samples is None:
                raise InvalidArgument("regression mode needs samples")
            return conditional_expectation(samples, node, self.basis, ensemble)
        fn = EXACT_CONDITIONAL_CASES[self.case]
        return fn(ensemble, node, ensemble.grid.horizon)
