"""Representative-volume-element homogenization of random nonlinear laminates.

Library layout:

* `energy` : stored-energy densities (Saint Venant-Kirchhoff, neo-Hookean)
  with exact derivatives and batched per-cell kernels.
* `fields` : compactly supported covariances, periodization, stationary
  Gaussian field synthesis (circulant spectral method, Philox streams).
* `cell`   : periodic cell problems for laminates via flux constancy:
  nonlinear corrector, linearized correctors, assembly of the effective
  energy, stress and tangent moduli.
* `oracle` : independent direct nodal minimization / linear solves used to
  cross-check the cell solvers.
* `stats`  : Monte Carlo ensembles, fluctuation and bias estimators,
  log-log rate fits with bootstrap confidence intervals.
* `cli`    : deterministic experiment driver (`laminhom` entry point).
"""

__version__ = "0.1.0"
