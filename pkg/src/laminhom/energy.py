"""Stored-energy densities for randomly modulated hyperelastic laminates.

Two material families, both frame indifferent with a stress-free natural
state at the identity:

* Saint Venant-Kirchhoff:  W0(F) = lam/2 tr(E)^2 + mu tr(E^2),
  E = (F^T F - Id)/2.  A quartic polynomial in F, so every derivative below
  is exact (no series truncation anywhere).
* Compressible neo-Hookean:  W0(F) = mu/2 (|F|^2 - d) - mu ln J
  + lam/2 (ln J)^2,  J = det F > 0.

The local material parameter omega enters through a bounded positive
modulation of the density,

    W(omega, F) = m(omega) * W0(F),      m(omega) = 1 + a*tanh(omega),

with amplitude a in [0, 1), so W inherits all structural properties of W0
uniformly in omega.  Derivatives in F up to third order are implemented in
closed form; `omega_derivative` gives the partial in omega.

Besides the scalar-point API (`evaluate`, `derivative`, `omega_derivative`)
the class exposes batched kernels operating on per-cell arrays of deformation
gradients, shape (n, d, d).  The cell-problem solvers are built entirely on
those kernels, so a full corrector solve is a handful of vectorized numpy
calls per Newton iteration rather than a Python loop over cells.

Conventions: matrices are numpy arrays of shape (d, d); the colon product
A:B is sum_ij A_ij B_ij; D2W[A] denotes the matrix (D2W[A])_jk =
D2W[A, e_j x e_k], similarly D3W[A,B]; the laminate axis is the last
coordinate e_d.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DomainError",
    "EnergyDensity",
    "SAINT_VENANT_KIRCHHOFF",
    "NEO_HOOKEAN",
    "dist_to_rotations",
    "rotation_from_angle",
    "random_rotation",
    "random_near_identity",
]

SAINT_VENANT_KIRCHHOFF = "saint-venant-kirchhoff"
NEO_HOOKEAN = "neo-hookean"

_FAMILY_ALIASES = {
    "svk": SAINT_VENANT_KIRCHHOFF,
    "saint-venant-kirchhoff": SAINT_VENANT_KIRCHHOFF,
    "saint_venant_kirchhoff": SAINT_VENANT_KIRCHHOFF,
    "saintvenantkirchhoff": SAINT_VENANT_KIRCHHOFF,
    "neo-hookean": NEO_HOOKEAN,
    "neo_hookean": NEO_HOOKEAN,
    "neohookean": NEO_HOOKEAN,
    "compressible-neo-hookean": NEO_HOOKEAN,
    "compressible_neo_hookean": NEO_HOOKEAN,
    "compressibleneohookean": NEO_HOOKEAN,
}


class DomainError(ValueError):
    """Deformation gradient outside the admissible domain of the family."""


# =====================================================================
# small tensor helpers
# =====================================================================


def _as_cells(A, n, d):
    """Broadcast a single (d,d) matrix or pass through an (n,d,d) stack."""
    A = np.asarray(A, dtype=float)
    if A.shape == (d, d):
        return np.broadcast_to(A, (n, d, d))
    if A.shape == (n, d, d):
        return A
    raise ValueError(f"expected shape {(d, d)} or {(n, d, d)}, got {A.shape}")


def _dot(A, B):
    """Per-cell colon product A:B, shapes (n,d,d) -> (n,)."""
    return np.einsum("nij,nij->n", A, B)


def _tAB(A, B):
    """Per-cell A^T B, shapes (n,d,d)."""
    return np.einsum("nji,njk->nik", A, B)


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def dist_to_rotations(F):
    """Frobenius distance of a matrix to SO(d).

    With singular values s_i, dist^2 = sum (s_i - 1)^2 when det F > 0;
    for det F <= 0 the nearest rotation flips the smallest singular value,
    adding 4*s_min to dist^2.
    """
    F = np.asarray(F, dtype=float)
    s = np.linalg.svd(F, compute_uv=False)
    dist2 = np.sum((s - 1.0) ** 2)
    if np.linalg.det(F) <= 0.0:
        dist2 += 4.0 * np.min(s)
    return float(np.sqrt(dist2))


def rotation_from_angle(angle, dim):
    """Rotation by `angle` in the (e1, e2) plane; identity elsewhere."""
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    R[0, 0] = c
    R[0, 1] = -s
    R[1, 0] = s
    R[1, 1] = c
    return R


def random_rotation(rng, dim):
    """Haar-ish random rotation via QR with sign fix (det = +1)."""
    A = rng.standard_normal((dim, dim))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0.0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_near_identity(rng, dim, dist):
    """Random F = R(Id + dist*S), |S|_F = 1 symmetric: dist(F,SO(d)) ~ dist."""
    S = rng.standard_normal((dim, dim))
    S = _sym(S[None])[0]
    S /= np.linalg.norm(S)
    return random_rotation(rng, dim) @ (np.eye(dim) + dist * S)


# =====================================================================
# energy density
# =====================================================================


class EnergyDensity:
    """Stored-energy density W(omega, F) of one material family.

    Parameters
    ----------
    family : str
        'saint-venant-kirchhoff' (alias 'svk') or 'neo-hookean'
        (alias 'compressible-neo-hookean').
    lame : (float, float)
        Base Lame constants (lam0, mu0), both > 0.
    modulation : float
        Amplitude a in [0, 1) of m(omega) = 1 + a*tanh(omega).
    dim : int
        Spatial dimension, 2 or 3.
    alpha : float, optional
        Declared quadratic-growth constant near SO(d): on the sampled
        neighborhood (dist(F, SO(d)) <= alpha/2) the density satisfies
        W(omega, F) >= alpha*dist^2(F, SO(d)).  The default
        min(1/2, mu0*(1-a)/2) is justified by the expansion
        W >= (1-a)*mu0*(1 - dist/2)^2 * dist^2 near SO(d), valid for both
        families (checked by sampled property tests, not proved globally).
    growth_p : float, optional
        Declared growth exponent, >= dim.  Saint Venant-Kirchhoff is
        genuinely quartic from below (default 4).  Compressible neo-Hookean
        has quadratic coercivity; the default max(2, dim) records the class
        floor p >= d at dim 3 even though the family only realizes p = 2 at
        infinity: all solves live in a bounded neighborhood of SO(d) where
        the distinction is immaterial.
    """

    def __init__(self, family, lame, modulation=0.0, dim=2, alpha=None,
                 growth_p=None):
        key = str(family).strip().lower()
        if key not in _FAMILY_ALIASES:
            raise ValueError(f"unknown material family {family!r}")
        self.family = _FAMILY_ALIASES[key]
        self.lam, self.mu = float(lame[0]), float(lame[1])
        if self.lam <= 0.0 or self.mu <= 0.0:
            raise ValueError(f"Lame constants must be positive, got {lame!r}")
        self.modulation = float(modulation)
        if not 0.0 <= self.modulation < 1.0:
            raise ValueError(f"modulation amplitude must be in [0,1), got {modulation!r}")
        self.dim = int(dim)
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {dim!r}")
        if alpha is None:
            alpha = min(0.5, 0.5 * self.mu * (1.0 - self.modulation))
        self.alpha = float(alpha)
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if growth_p is None:
            growth_p = 4.0 if self.family == SAINT_VENANT_KIRCHHOFF else float(max(2, self.dim))
        self.growth_p = float(growth_p)
        if self.growth_p < self.dim:
            raise ValueError(f"growth exponent {growth_p!r} below dimension {self.dim}")

    # -- modulation ----------------------------------------------------

    def factor(self, omega):
        """m(omega) = 1 + a*tanh(omega), elementwise."""
        return 1.0 + self.modulation * np.tanh(np.asarray(omega, dtype=float))

    def factor_derivative(self, omega):
        """m'(omega) = a*(1 - tanh(omega)^2), elementwise."""
        t = np.tanh(np.asarray(omega, dtype=float))
        return self.modulation * (1.0 - t * t)

    # -- scalar-point API ----------------------------------------------

    def evaluate(self, omega, F):
        """W(omega, F) at a single deformation gradient."""
        W = self.energy_cells(np.atleast_1d(float(omega)),
                              np.asarray(F, dtype=float)[None])
        return float(W[0])

    def derivative(self, omega, F, order=1):
        """Full derivative tensor of W in F at a single point.

        order 1 -> (d,d); order 2 -> (d,d,d,d); order 3 -> (d,d,d,d,d,d).
        Entries are D^kW contracted with elementary matrices e_j x e_k, so
        e.g. derivative(...,2)[j,k,l,m] = D2W[e_j x e_k, e_l x e_m].
        """
        d = self.dim
        om = np.atleast_1d(float(omega))
        Fc = np.asarray(F, dtype=float)[None]
        if order == 1:
            return self.stress_cells(om, Fc)[0]
        if order == 2:
            T = np.empty((d, d, d, d))
            for l in range(d):
                for m in range(d):
                    E = np.zeros((d, d))
                    E[l, m] = 1.0
                    T[:, :, l, m] = self.tangent_apply_cells(om, Fc, E)[0]
            return T
        if order == 3:
            T = np.empty((d, d, d, d, d, d))
            for l in range(d):
                for m in range(d):
                    A = np.zeros((d, d))
                    A[l, m] = 1.0
                    for u in range(d):
                        for v in range(d):
                            B = np.zeros((d, d))
                            B[u, v] = 1.0
                            T[:, :, l, m, u, v] = self.third_apply_cells(om, Fc, A, B)[0]
            return T
        raise ValueError(f"derivative order must be 1, 2 or 3, got {order!r}")

    def omega_derivative(self, omega, F):
        """dW/domega = m'(omega) * W0(F) = (m'/m)(omega) * W(omega, F)."""
        base = self._energy_base(np.asarray(F, dtype=float)[None])[0]
        return float(self.factor_derivative(omega) * base)

    # -- batched kernels (per-cell arrays) -------------------------------

    def admissible_cells(self, Fcells):
        """Per-cell admissibility of the deformation gradients."""
        Fcells = np.asarray(Fcells, dtype=float)
        if self.family == NEO_HOOKEAN:
            return np.linalg.det(Fcells) > 0.0
        return np.ones(Fcells.shape[0], dtype=bool)

    def energy_cells(self, omega, Fcells):
        """W(omega_i, F_i) over cells: (n,), (n,d,d) -> (n,)."""
        return self.factor(omega) * self._energy_base(np.asarray(Fcells, dtype=float))

    def stress_cells(self, omega, Fcells):
        """DW(omega_i, F_i) over cells: -> (n,d,d)."""
        return self.factor(omega)[:, None, None] * self._stress_base(np.asarray(Fcells, dtype=float))

    def tangent_apply_cells(self, omega, Fcells, A):
        """Matrix D2W(omega_i, F_i)[A_i] over cells; A is (d,d) or (n,d,d)."""
        Fcells = np.asarray(Fcells, dtype=float)
        A = _as_cells(A, Fcells.shape[0], self.dim)
        return self.factor(omega)[:, None, None] * self._tangent_base(Fcells, A)

    def third_apply_cells(self, omega, Fcells, A, B):
        """Matrix D3W(omega_i, F_i)[A_i, B_i] over cells (symmetric in A, B)."""
        Fcells = np.asarray(Fcells, dtype=float)
        n = Fcells.shape[0]
        A = _as_cells(A, n, self.dim)
        B = _as_cells(B, n, self.dim)
        return self.factor(omega)[:, None, None] * self._third_base(Fcells, A, B)

    def acoustic_cells(self, omega, Fcells):
        """Acoustic tensors M_i with (M_i)_jk = D2W(omega_i,F_i)[e_j x e_d, e_k x e_d]."""
        Fcells = np.asarray(Fcells, dtype=float)
        n, d = Fcells.shape[0], self.dim
        M = np.empty((n, d, d))
        for k in range(d):
            E = np.zeros((d, d))
            E[k, d - 1] = 1.0
            M[:, :, k] = self.tangent_apply_cells(omega, Fcells, E)[:, :, d - 1]
        return M

    # -- family-specific base density (unmodulated) ----------------------

    def _energy_base(self, Fc):
        d = self.dim
        if self.family == SAINT_VENANT_KIRCHHOFF:
            Et = 0.5 * (_tAB(Fc, Fc) - np.eye(d))
            tr = np.trace(Et, axis1=1, axis2=2)
            return 0.5 * self.lam * tr * tr + self.mu * _dot(Et, Et)
        J = np.linalg.det(Fc)
        if np.any(J <= 0.0):
            raise DomainError("neo-Hookean density needs det F > 0")
        lnJ = np.log(J)
        frob2 = np.einsum("nij,nij->n", Fc, Fc)
        return 0.5 * self.mu * (frob2 - d) - self.mu * lnJ + 0.5 * self.lam * lnJ * lnJ

    def _stress_base(self, Fc):
        d = self.dim
        if self.family == SAINT_VENANT_KIRCHHOFF:
            Et = 0.5 * (_tAB(Fc, Fc) - np.eye(d))
            tr = np.trace(Et, axis1=1, axis2=2)
            return self.lam * tr[:, None, None] * Fc + 2.0 * self.mu * np.einsum("nij,njk->nik", Fc, Et)
        X, lnJ = self._inv_log(Fc)
        beta = self.lam * lnJ - self.mu
        return self.mu * Fc + beta[:, None, None] * np.swapaxes(X, 1, 2)

    def _tangent_base(self, Fc, A):
        if self.family == SAINT_VENANT_KIRCHHOFF:
            d = self.dim
            Et = 0.5 * (_tAB(Fc, Fc) - np.eye(d))
            tr = np.trace(Et, axis1=1, axis2=2)
            FA = _dot(Fc, A)
            symFA = _sym(_tAB(Fc, A))
            return (self.lam * FA[:, None, None] * Fc
                    + self.lam * tr[:, None, None] * A
                    + 2.0 * self.mu * np.einsum("nij,njk->nik", Fc, symFA)
                    + 2.0 * self.mu * np.einsum("nij,njk->nik", A, Et))
        X, lnJ = self._inv_log(Fc)
        beta = self.lam * lnJ - self.mu
        thA = np.einsum("nij,nji->n", X, A)
        XAX = np.einsum("nij,njk,nkl->nil", X, A, X)
        return (self.mu * A
                + self.lam * thA[:, None, None] * np.swapaxes(X, 1, 2)
                - beta[:, None, None] * np.swapaxes(XAX, 1, 2))

    def _third_base(self, Fc, A, B):
        if self.family == SAINT_VENANT_KIRCHHOFF:
            FA = _dot(Fc, A)
            FB = _dot(Fc, B)
            AB = _dot(A, B)
            symFA = _sym(_tAB(Fc, A))
            symFB = _sym(_tAB(Fc, B))
            symAB = _sym(_tAB(A, B))
            return (self.lam * (A * FB[:, None, None] + B * FA[:, None, None] + Fc * AB[:, None, None])
                    + 2.0 * self.mu * (np.einsum("nij,njk->nik", A, symFB)
                                       + np.einsum("nij,njk->nik", B, symFA)
                                       + np.einsum("nij,njk->nik", Fc, symAB)))
        X, lnJ = self._inv_log(Fc)
        beta = self.lam * lnJ - self.mu
        XT = np.swapaxes(X, 1, 2)
        thA = np.einsum("nij,nji->n", X, A)
        thB = np.einsum("nij,nji->n", X, B)
        XAX = np.einsum("nij,njk,nkl->nil", X, A, X)
        XBX = np.einsum("nij,njk,nkl->nil", X, B, X)
        trAB = np.einsum("nij,nji->n", XAX, B)
        XAXBX = np.einsum("nij,njk->nik", XAX, np.einsum("nij,njk->nik", B, X))
        XBXAX = np.einsum("nij,njk->nik", XBX, np.einsum("nij,njk->nik", A, X))
        return (-self.lam * (thB[:, None, None] * np.swapaxes(XAX, 1, 2)
                             + thA[:, None, None] * np.swapaxes(XBX, 1, 2)
                             + trAB[:, None, None] * XT)
                + beta[:, None, None] * (np.swapaxes(XAXBX, 1, 2) + np.swapaxes(XBXAX, 1, 2)))

    def _inv_log(self, Fc):
        J = np.linalg.det(Fc)
        if np.any(J <= 0.0):
            raise DomainError("neo-Hookean density needs det F > 0")
        return np.linalg.inv(Fc), np.log(J)

    def __repr__(self):
        return (f"EnergyDensity({self.family!r}, lame=({self.lam}, {self.mu}), "
                f"modulation={self.modulation}, dim={self.dim})")
