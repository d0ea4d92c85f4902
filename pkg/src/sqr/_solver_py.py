"""Pure-numpy kernel for the penalized check-loss IRLS solver.

Reference backend; the compiled backend in ``_solver_cy`` mirrors this
per-iteration pass (residuals -> floored weights -> weighted gram and
right-hand side -> exact loss) and must stay numerically interchangeable.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def irls_pass(X, y, beta, tau, h):
    """One IRLS pass over the data.

    The check loss rho_tau(u) = |u|/2 + (tau - 1/2) u is majorized via
    |u| <= u^2/(2e) + e/2 with e = max(|u_prev|, h), so the update solves
    (X'WX + lam*P) beta = X'W y + (tau - 1/2) X'1 with W = diag(1/(2e)).
    Returns (G, rhs, loss, smoothed) where G = X'WX, rhs is the full
    right-hand side, loss is the exact check loss at the incoming beta and
    smoothed is its h-floored surrogate sum r^2/(4e) + e/4 + (tau - 1/2) r,
    which decreases monotonically under the update and so drives the
    convergence test.
    """
    r = y - X @ beta
    loss = float(np.sum(r * (tau - (r < 0.0))))
    e = np.abs(r)
    np.maximum(e, h, out=e)
    smoothed = float(np.sum(r * r / (4.0 * e) + 0.25 * e + (tau - 0.5) * r))
    w = 0.5 / e
    Xw = X * w[:, None]
    G = Xw.T @ X
    rhs = Xw.T @ y + (tau - 0.5) * X.sum(axis=0)
    return G, rhs, loss, smoothed
