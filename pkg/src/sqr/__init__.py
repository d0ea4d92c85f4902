"""Stock-conditioned crop price/yield distributions via penalized B-spline
quantile regression, with revenue-insurance premium rating on top.

Subpackages follow the pipeline: :mod:`sqr.bspline` (bases and penalties),
:mod:`sqr.quantile_fit` (penalized check-loss solver and GACV),
:mod:`sqr.trend` (detrending, trend draws, stock normalization),
:mod:`sqr.joint_sampler` (conditional joint model and inverse-transform
draws), :mod:`sqr.stats` (correlations, jackknife, AR-1),
:mod:`sqr.premium` (indemnities, two-/three-channel rating, rating game),
:mod:`sqr.simstudy` (synthetic validation harness), :mod:`sqr.cli`.

The quantile-regression inner loop runs on a compiled core when available;
``sqr.solver.BACKEND`` reports which backend was selected at import.
"""

from .solver import BACKEND as solver_backend

__version__ = "0.1.0"

__all__ = ["solver_backend", "__version__"]
