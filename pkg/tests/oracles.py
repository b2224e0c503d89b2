"""Independent reference solvers used only by the test suite.

Deliberately plain implementations (per-parameter loops, direct normal
equations) so they share no machinery with the package's solvers.
"""

import numpy as np


def _lstsq_fit(w_state, targets, degree=3):
    x = np.vander(w_state, N=degree + 1, increasing=True)
    coeffs, *_ = np.linalg.lstsq(x, targets, rcond=None)
    return x @ coeffs


def coupled_picard_fbsde(spec, ensemble, degree=3, sweeps=12, tol=1e-9):
    """Alternating forward-Euler / backward-regression solve of the coupled
    family, one independent fixed point per outer parameter.

    Returns the diagonal values ``Y^t(t)`` as an ``(n_paths, n_nodes)``
    array.
    """
    grid = ensemble.grid
    n = grid.n_steps
    dt = grid.dt
    xi = np.asarray(spec.xi_fn(ensemble), dtype=float)
    diag = np.empty((ensemble.n_paths, n + 1))
    for i in range(n + 1):
        x0 = np.broadcast_to(
            np.asarray(spec.x_fn(ensemble, i), dtype=float), (ensemble.n_paths,)
        )
        z_fam = np.zeros((ensemble.n_paths, n))
        y_at_i = None
        for _ in range(sweeps):
            # forward state from the current integrand
            x_term = x0.copy()
            for j in range(i, n):
                x_term = x_term + spec.b_fn(ensemble, j, z_fam[:, j]) * dt
            # backward value/integrand by plain regression
            eta = xi * x_term
            z_new = np.zeros_like(z_fam)
            for j in range(n - 1, i - 1, -1):
                w = ensemble.levels[:, j]
                cond = _lstsq_fit(w, eta, degree)
                z_new[:, j] = (
                    _lstsq_fit(w, (eta - cond) * ensemble.increments[:, j], degree)
                    / dt
                )
                drift = (
                    spec.g_fn(ensemble, j, z_new[:, j]) if spec.g_fn is not None else 0.0
                )
                eta = cond + drift * dt
            move = float(np.sqrt(np.mean((z_new - z_fam) ** 2)))
            z_fam = z_new
            y_at_i = eta
            if move <= tol:
                break
        diag[:, i] = y_at_i
    return diag
