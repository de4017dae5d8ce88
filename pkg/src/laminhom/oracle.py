"""Direct nodal minimization of the discrete cell energy.

Independent verification route for the flux-constancy solver in `cell`: keep
the potential phi as the unknown instead of the cell gradients.  phi is
piecewise linear and periodic on the n-cell grid with phi_0 pinned (constant
gauge), cell i carries p_i = (phi_{i+1} - phi_i)/h, and mean-zero of p holds
automatically by telescoping.  Newton on the (n-1)*d nodal values with a
dense tridiagonal-block Hessian and an Armijo line search on the energy.
O((n d)^3) per step; meant for cross-checks at modest n, not production.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import ConvergenceError, SolverOptions, _deform, _gram_deviation
from .energy import DomainError, dist_to_rotations

__all__ = [
    "DiscreteEnergyProblem",
    "OracleSolution",
    "minimize_direct",
    "linear_solve_direct",
]


@dataclass
class OracleSolution:
    phi: np.ndarray        # (n, d) nodal values, phi[0] = 0
    p: np.ndarray          # (n, d) per-cell gradients
    energy: float
    gradient_norm: float
    iterations: int


class DiscreteEnergyProblem:
    """Nodal energy, gradient and Hessian of one sample at deformation F.

    The unknown vector stacks phi_1 .. phi_{n-1} row-wise; node 0 is pinned
    at zero.  Gradient entries are traction jumps across nodes, the Hessian
    is block tridiagonal in the acoustic tensors (the pinned node removes the
    periodic corner blocks).
    """

    def __init__(self, w, sample, F):
        if not getattr(sample, "periodic", True):
            raise ValueError("cell problems need a periodic sample")
        self.w = w
        self.omega = np.asarray(sample.values, dtype=float)
        self.F = np.asarray(F, dtype=float)
        self.n = len(self.omega)
        self.d = w.dim
        self.h = sample.period / self.n
        if self.n < 2:
            raise ValueError("need at least two cells")

    def phi_from(self, u):
        phi = np.zeros((self.n, self.d))
        phi[1:] = np.asarray(u, dtype=float).reshape(self.n - 1, self.d)
        return phi

    def cell_gradients(self, phi):
        return (np.roll(phi, -1, axis=0) - phi) / self.h

    def deformations(self, u):
        return _deform(self.F, self.cell_gradients(self.phi_from(u)))

    def energy(self, u):
        return float(self.w.energy_cells(self.omega, self.deformations(u)).mean())

    def tractions(self, u):
        dd = self.d - 1
        return self.w.stress_cells(self.omega, self.deformations(u))[:, :, dd]

    def gradient(self, u):
        t = self.tractions(u)
        # node j sits between cells j-1 and j
        g = (np.roll(t, 1, axis=0) - t) / (self.n * self.h)
        return g[1:].ravel()

    def hessian(self, u):
        n, d = self.n, self.d
        M = self.w.acoustic_cells(self.omega, self.deformations(u))
        scale = 1.0 / (n * self.h * self.h)
        K = np.zeros((n, d, n, d))
        idx = np.arange(n)
        nxt = (idx + 1) % n
        for i in range(n):
            Mi = scale * M[i]
            K[i, :, i, :] += Mi
            K[nxt[i], :, nxt[i], :] += Mi
            K[i, :, nxt[i], :] -= Mi
            K[nxt[i], :, i, :] -= Mi
        K = K.reshape(n * d, n * d)
        return K[d:, d:]

    def admissible(self, u):
        Fc = self.deformations(u)
        gram_cap = 3.0  # generous: line-search guard only
        return bool(self.w.admissible_cells(Fc).all()
                    and (_gram_deviation(Fc) <= gram_cap).all())


def minimize_direct(w, sample, F, opts=None):
    """Minimize the nodal energy by damped Newton.  Returns OracleSolution."""
    opts = opts or SolverOptions()
    prob = DiscreteEnergyProblem(w, sample, F)
    dist_F = dist_to_rotations(prob.F)
    if not dist_F < opts.delta_bar:
        raise DomainError(
            f"dist(F, SO(d)) = {dist_F:.4f} not below delta_bar = {opts.delta_bar}")
    u = np.zeros((prob.n - 1) * prob.d)
    t0 = prob.tractions(u)
    tol = 2.0 * opts.tol_inner * (1.0 + float(np.abs(t0).max())) / (prob.n * prob.h)
    e = prob.energy(u)
    iterations = 0
    for _ in range(opts.max_outer * 4):
        g = prob.gradient(u)
        gnorm = float(np.abs(g).max()) if g.size else 0.0
        if gnorm <= tol:
            break
        iterations += 1
        K = prob.hessian(u)
        try:
            du = -np.linalg.solve(K, g)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"nodal Hessian singular: {exc}") from exc
        slope = float(g @ du)
        if slope >= 0.0:
            du = -g
            slope = -float(g @ g)
        step = 1.0
        noise = 1e-14 * max(1.0, abs(e))
        for _bt in range(opts.max_backtracks + 1):
            cand = u + step * du
            if prob.admissible(cand):
                ec = prob.energy(cand)
                accept = ec <= e + 1e-4 * step * slope
                if not accept and 1e-4 * step * abs(slope) <= noise:
                    # the required decrease is below the energy's roundoff
                    # floor; finish the endgame on gradient contraction
                    accept = float(np.abs(prob.gradient(cand)).max()) <= 0.9 * gnorm
                if accept:
                    u, e = cand, ec
                    break
            step *= opts.backtrack_factor
        else:
            raise ConvergenceError("nodal line search exhausted")
    else:
        raise ConvergenceError(
            f"nodal Newton not converged (|grad| = {gnorm:.3e}, tol = {tol:.1e})")
    phi = prob.phi_from(u)
    p = prob.cell_gradients(phi)
    p = p - p.mean(axis=0)
    g = prob.gradient(u)
    return OracleSolution(phi=phi, p=p, energy=prob.energy(u),
                          gradient_norm=float(np.abs(g).max()) if g.size else 0.0,
                          iterations=iterations)


def linear_solve_direct(w, sample, F, p, G):
    """Linearized corrector in direction G by the direct nodal route.

    Solves the stationarity system of the quadratic form
    (1/n) sum_i  D2W_i[G + q_i x e_d, G + q_i x e_d] / 2  over nodal psi
    and returns the per-cell gradients q (mean zero by telescoping).
    """
    prob = DiscreteEnergyProblem(w, sample, F)
    dd = prob.d - 1
    p = np.asarray(p, dtype=float)
    Fc = _deform(prob.F, p)
    M = w.acoustic_cells(prob.omega, Fc)
    scale = 1.0 / (prob.n * prob.h * prob.h)
    n, d = prob.n, prob.d
    K = np.zeros((n, d, n, d))
    nxt = (np.arange(n) + 1) % n
    for i in range(n):
        Mi = scale * M[i]
        K[i, :, i, :] += Mi
        K[nxt[i], :, nxt[i], :] += Mi
        K[i, :, nxt[i], :] -= Mi
        K[nxt[i], :, i, :] -= Mi
    K = K.reshape(n * d, n * d)[d:, d:]
    b = w.tangent_apply_cells(prob.omega, Fc, np.asarray(G, dtype=float))[:, :, dd]
    g = (np.roll(b, 1, axis=0) - b) / (prob.n * prob.h)
    psi_tail = np.linalg.solve(K, -g[1:].ravel())
    psi = np.zeros((n, d))
    psi[1:] = psi_tail.reshape(n - 1, d)
    q = prob.cell_gradients(psi)
    return q - q.mean(axis=0)
