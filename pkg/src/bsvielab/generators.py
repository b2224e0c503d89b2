"""Generator representation, adapted/anticipating decomposition, measurability probes.

A generator is evaluated slice-wise: for a fixed inner node ``s_k`` the
solver hands it the vector of outer times, the shared state ``y(s_k)`` and
per-slice ``z`` / ``zhat`` matrices, and receives one value column per outer
time.  Evaluators may read the whole Brownian path (that is the anticipating
case); the decomposition splits such a generator into its node-conditioned
part and the remainder, pathwise at frozen numerical arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .certification import LipschitzProfile
from .core import BrownianEnsemble, resample_after
from .errors import InvalidArgument
from .regression import BasisConfig, RegressionEngine

__all__ = [
    "GeneratorSpec",
    "DecomposedGenerator",
    "decompose",
    "verify_adaptedness",
    "AdaptednessReport",
]


@dataclass(frozen=True)
class GeneratorSpec:
    """Evaluator plus metadata for a driver ``g(t, s, y, z, zhat)``.

    ``fn(ensemble, t_times, s_idx, y, z, zhat)`` receives the outer times as
    a vector of length m and must return a ``(n_paths, m)`` array; ``y`` is
    the per-path state at node ``s_idx``; ``z`` and ``zhat`` are
    ``(n_paths, m)`` or None when the corresponding flag is off.  Evaluators
    must be pure: results may be requested concurrently and are never cached.
    """

    name: str
    fn: callable
    uses_y: bool = False
    uses_z: bool = False
    uses_zhat: bool = False
    measurability: str = "anticipating"  # or "adapted"
    profile: LipschitzProfile | None = None
    exact_g1: callable | None = None

    def __post_init__(self):
        if self.measurability not in ("adapted", "anticipating"):
            raise InvalidArgument(f"unknown measurability {self.measurability!r}")

    def evaluate(
        self,
        ensemble: BrownianEnsemble,
        t_times: np.ndarray,
        s_idx: int,
        y: np.ndarray | None = None,
        z: np.ndarray | None = None,
        zhat: np.ndarray | None = None,
    ) -> np.ndarray:
        t_times = np.atleast_1d(np.asarray(t_times, dtype=float))
        out = self.fn(ensemble, t_times, s_idx, y, z, zhat)
        out = np.asarray(out, dtype=float)
        expect = (ensemble.n_paths, t_times.size)
        if out.shape != expect:
            out = np.broadcast_to(out, expect).copy()
        return out


class DecomposedGenerator:
    """Split ``g = g0 + g1`` with ``g1`` the node-conditioned part.

    ``g1`` is the regression estimate of the conditional expectation of the
    raw values at the inner node (or the catalogued Gaussian closed form when
    ``exact=True``); ``g0`` is the pathwise remainder, so the two parts add
    back to the raw values exactly at every sample point.
    """

    def __init__(
        self,
        generator: GeneratorSpec,
        ensemble: BrownianEnsemble,
        basis: BasisConfig,
        exact: bool = False,
        engine: RegressionEngine | None = None,
    ):
        if exact and generator.exact_g1 is None:
            raise InvalidArgument(
                f"generator {generator.name!r} has no catalogued exact decomposition"
            )
        self.generator = generator
        self.ensemble = ensemble
        self.basis = basis
        self.exact = exact
        self.engine = engine or RegressionEngine(ensemble, basis)

    def split(self, t_times, s_idx, y=None, z=None, zhat=None):
        """Return ``(g1, g0, fit_coeffs)`` at the given arguments.

        ``fit_coeffs`` is None in exact mode; in regression mode it carries
        the per-column projection coefficients of ``g1`` (used by solvers to
        keep their outputs replayable functions of the node state).
        """
        raw = self.generator.evaluate(self.ensemble, t_times, s_idx, y, z, zhat)
        if self.exact:
            g1 = np.asarray(
                self.generator.exact_g1(self.ensemble, np.atleast_1d(t_times), s_idx, y, z, zhat),
                dtype=float,
            )
            g1 = np.broadcast_to(g1, raw.shape).copy()
            return g1, raw - g1, None
        fit = self.engine.fit(s_idx, raw, record=False)
        g1 = fit.fitted if fit.fitted.ndim == 2 else fit.fitted[:, None]
        return g1, raw - g1, fit

    def g1_values(self, t_times, s_idx, y=None, z=None, zhat=None):
        return self.split(t_times, s_idx, y, z, zhat)[0]

    def g0_values(self, t_times, s_idx, y=None, z=None, zhat=None):
        return self.split(t_times, s_idx, y, z, zhat)[1]

    def as_adapted_generator(self) -> GeneratorSpec:
        """The conditioned part repackaged as a stand-alone adapted generator.

        The fit is always taken on the home ensemble; on any other ensemble
        the frozen fitted function of the node state is replayed, which is
        what makes the future-resampling probe meaningful.
        """

        def fn(ensemble, t_times, s_idx, y, z, zhat):
            if self.exact:
                return self.generator.exact_g1(ensemble, t_times, s_idx, y, z, zhat)
            raw = self.generator.evaluate(self.ensemble, t_times, s_idx, y, z, zhat)
            fit = self.engine.fit(s_idx, raw, record=False)
            if ensemble is self.ensemble:
                return fit.fitted
            return self.engine.replay(fit, ensemble)

        return GeneratorSpec(
            name=f"{self.generator.name}#conditioned",
            fn=fn,
            uses_y=self.generator.uses_y,
            uses_z=self.generator.uses_z,
            uses_zhat=self.generator.uses_zhat,
            measurability="adapted",
            profile=self.generator.profile,
        )


def decompose(
    generator: GeneratorSpec,
    ensemble: BrownianEnsemble,
    basis: BasisConfig,
    exact: bool = False,
) -> DecomposedGenerator:
    return DecomposedGenerator(generator, ensemble, basis, exact=exact)


@dataclass(frozen=True)
class AdaptednessReport:
    s_idx: int
    max_deviation: float
    adapted_claimed: bool

    @property
    def consistent(self) -> bool:
        # Claims of adaptedness must survive the future-resampling probe.
        return (not self.adapted_claimed) or self.max_deviation <= 1e-12


_PROBE_TOL = 1e-12


def verify_adaptedness(
    generator: GeneratorSpec,
    ensemble: BrownianEnsemble,
    s_idx: int,
    seed: int = 987654321,
    t_times: np.ndarray | None = None,
) -> AdaptednessReport:
    """Probe measurability: re-evaluate after redrawing all increments
    strictly after ``s`` and report the largest pathwise deviation.

    Evaluation is at zero ``(y, z, zhat)`` arguments; an adapted generator
    must come back unchanged (deviation 0 up to float noise).
    """
    s_idx = ensemble.grid.require_node(s_idx)
    if t_times is None:
        t_times = ensemble.grid.nodes[: s_idx + 1]
        if t_times.size == 0:
            t_times = np.array([0.0])
    m = np.atleast_1d(t_times).size
    zeros_y = np.zeros(ensemble.n_paths) if generator.uses_y else None
    zeros_m = np.zeros((ensemble.n_paths, m))
    z = zeros_m if generator.uses_z else None
    zhat = zeros_m if generator.uses_zhat else None
    base = generator.evaluate(ensemble, t_times, s_idx, zeros_y, z, zhat)
    shuffled = resample_after(ensemble, s_idx, seed)
    probe = generator.evaluate(shuffled, t_times, s_idx, zeros_y, z, zhat)
    dev = float(np.max(np.abs(base - probe))) if base.size else 0.0
    return AdaptednessReport(
        s_idx=s_idx,
        max_deviation=dev,
        adapted_claimed=generator.measurability == "adapted",
    )
