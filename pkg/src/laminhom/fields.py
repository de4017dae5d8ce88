"""Stationary Gaussian material fields on 1D periodic grids.

The laminate's material parameter omega(x) is a zero-mean stationary
Gaussian process with a compactly supported covariance C, evaluated on a
uniform grid and held piecewise constant per cell.  Two covariance kinds:

* triangle:     C(s) = var * (1 - |s|/r)_+            (autocorrelation of an
                indicator pulse, hence positive semidefinite by construction)
* cosine-bump:  C(s) = var * [(1-u) cos(pi u) + sin(pi u)/pi],  u = |s|/r
                (normalized autocorrelation of a half-period cosine pulse;
                the naive raised cosine is NOT positive semidefinite, its
                Fourier transform has negative lobes)

with support radius r = correlation_length / 2, so C vanishes for
|s| >= correlation_length / 2.

Periodic fields of period L are obtained by periodizing the covariance,
C_L(s) = C(wrap(s)) with wrap(s) in [-L/2, L/2), which requires L >= 4 *
correlation_length; the periodized covariance then agrees with C for all
|s| <= L/2, so the field restricted to any window of that width has exactly
the unperiodized distribution.  Sampling uses the circulant spectral method:
the DFT of the covariance entries is the (nonnegative) circulant spectrum,
and shaping complex white noise with its square root yields an exact sample.

Streams are counter-based (numpy Philox keyed through SeedSequence by
(seed, fixed-point L, index)), so every sample is a pure function of
(seed, L, index): bit-reproducible, order-independent, parallel-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PeriodizationError",
    "SpectrumError",
    "CovarianceSpec",
    "PeriodizedCovariance",
    "MaterialSample",
    "periodize_covariance",
    "sample_periodic_field",
    "sample_window_restriction",
    "PRNG_NAME",
]

PRNG_NAME = "philox4x64(numpy)"

# negative spectral values within this fraction of the variance are clamped
# to zero (DFT roundoff); anything below is a genuine positivity violation
SPECTRUM_CLAMP = 1e-10

TRIANGLE = "triangle"
COSINE_BUMP = "cosine-bump"

_KIND_ALIASES = {
    "triangle": TRIANGLE,
    "cosine-bump": COSINE_BUMP,
    "cosine_bump": COSINE_BUMP,
    "cosinebump": COSINE_BUMP,
    "truncated-cosine-bump": COSINE_BUMP,
    "truncated_cosine_bump": COSINE_BUMP,
    "truncatedcosinebump": COSINE_BUMP,
}


class PeriodizationError(ValueError):
    """Period or resolution incompatible with the covariance support."""


class SpectrumError(ValueError):
    """Covariance spectrum negative beyond roundoff: not positive semidefinite."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Compactly supported covariance C(s) with C(0) = variance.

    support_radius = correlation_length / 2; C(s) = 0 for |s| >= support_radius.
    """

    kind: str
    variance: float
    correlation_length: float

    def __post_init__(self):
        key = str(self.kind).strip().lower()
        if key not in _KIND_ALIASES:
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        object.__setattr__(self, "kind", _KIND_ALIASES[key])
        # variance 0 is allowed: degenerate deterministic field
        if not self.variance >= 0.0:
            raise ValueError(f"variance must be nonnegative, got {self.variance!r}")
        if not self.correlation_length > 0.0:
            raise ValueError(f"correlation length must be positive, got {self.correlation_length!r}")

    @property
    def support_radius(self):
        return 0.5 * self.correlation_length

    def __call__(self, s):
        s = np.abs(np.asarray(s, dtype=float))
        u = s / self.support_radius
        if self.kind == TRIANGLE:
            return self.variance * np.clip(1.0 - u, 0.0, None)
        vals = (1.0 - u) * np.cos(np.pi * u) + np.sin(np.pi * u) / np.pi
        return self.variance * np.where(u < 1.0, vals, 0.0)


@dataclass(frozen=True)
class PeriodizedCovariance:
    """Covariance of one period-L grid: circulant entries and their spectrum."""

    entries: np.ndarray      # (n,) C_L(j*h)
    spectrum: np.ndarray     # (n,) DFT of entries, clamped to >= 0
    period: float
    n: int

    @property
    def spacing(self):
        return self.period / self.n


@dataclass(frozen=True)
class MaterialSample:
    """One realization of the material field on a uniform grid.

    values[i] is omega at x_i = i*spacing, held constant on the cell
    [x_i, x_{i+1}); the field continues period-L periodically when
    `periodic` is set (the default).  seed/index identify the stream that
    generated the sample (PRNG recorded in `prng`).
    """

    values: np.ndarray
    period: float
    seed: int
    index: int
    prng: str = PRNG_NAME
    periodic: bool = True

    @property
    def n(self):
        return len(self.values)

    @property
    def spacing(self):
        return self.period / self.n

    def grid(self):
        return np.arange(self.n) * self.spacing


# =====================================================================
# periodization
# =====================================================================


def periodize_covariance(cov, period, n):
    """Wrap a compactly supported covariance onto a period-L grid.

    Entry j is C(wrap(j*h)) with wrap into [-L/2, L/2) and h = L/n.  The
    spectrum is the DFT of the entries (the circulant eigenvalues); it is
    nonnegative up to roundoff because the periodization of a positive
    semidefinite C supported inside [-L/2, L/2] has nonnegative Fourier
    coefficients and discrete sampling only aliases them together.

    Raises PeriodizationError when period < 4*correlation_length (the
    matching-window guarantee needs slack around the support) or when the
    grid has fewer than two cells per correlation length; SpectrumError when
    a spectral value is more negative than -SPECTRUM_CLAMP*variance.
    """
    period = float(period)
    n = int(n)
    if period < 4.0 * cov.correlation_length:
        raise PeriodizationError(
            f"period {period} < 4*correlation_length = {4.0 * cov.correlation_length}")
    h = period / n
    if h > 0.5 * cov.correlation_length:
        raise PeriodizationError(
            f"spacing {h} too coarse: need at least two cells per correlation length "
            f"{cov.correlation_length}")
    x = np.arange(n) * h
    x = np.where(x >= 0.5 * period, x - period, x)
    entries = cov(x)
    spectrum = np.fft.fft(entries)
    # entries are even around 0 so the spectrum is real
    spectrum = spectrum.real
    floor = -SPECTRUM_CLAMP * cov.variance
    smin = float(spectrum.min())
    if smin < floor:
        raise SpectrumError(
            f"covariance spectrum has value {smin:.3e} below {floor:.3e}: "
            "not positive semidefinite")
    spectrum = np.where(spectrum < 0.0, 0.0, spectrum)
    return PeriodizedCovariance(entries=entries, spectrum=spectrum, period=period, n=n)


# =====================================================================
# sampling
# =====================================================================


def _length_key(length):
    # fixed-point encoding at 1/4096 so the stream key is integral
    return int(round(float(length) * 4096.0))


def _stream(seed, *keys):
    seq = np.random.SeedSequence([int(seed), *map(int, keys)])
    return np.random.Generator(np.random.Philox(seed=seq))


def sample_periodic_field(cov, period, n, seed, index):
    """Draw one periodic field sample; pure function of (seed, period, index).

    Circulant spectral synthesis: with spectrum lambda and complex standard
    normals z, sqrt(n) * Re ifft(sqrt(lambda) * z) has covariance matrix
    circulant(entries) exactly.
    """
    per = periodize_covariance(cov, period, n)
    rng = _stream(seed, _length_key(period), index)
    z = rng.standard_normal(2 * per.n)
    noise = z[: per.n] + 1j * z[per.n:]
    values = np.sqrt(per.n) * np.fft.ifft(np.sqrt(per.spectrum) * noise).real
    return MaterialSample(values=values, period=per.period, seed=int(seed), index=int(index))


def sample_window_restriction(cov, length, n, seed, index):
    """Draw the unperiodized field restricted to a window of given length.

    Dense-covariance route (Toeplitz matrix + symmetric eigenfactorization),
    deliberately independent of the circulant path; used for systematic-error
    diagnostics.  Tiny negative eigenvalues from the dense factorization are
    clamped like the spectral clamp (scaled by n for dense-eig roundoff).
    """
    length = float(length)
    n = int(n)
    h = length / n
    if h > 0.5 * cov.correlation_length:
        raise PeriodizationError(
            f"spacing {h} too coarse: need at least two cells per correlation length "
            f"{cov.correlation_length}")
    grid = np.arange(n) * h
    K = cov(np.abs(grid[:, None] - grid[None, :]))
    evals, evecs = np.linalg.eigh(K)
    floor = -SPECTRUM_CLAMP * cov.variance * max(1, n)
    if float(evals.min()) < floor:
        raise SpectrumError(
            f"window covariance eigenvalue {evals.min():.3e} below {floor:.3e}")
    evals = np.where(evals < 0.0, 0.0, evals)
    rng = _stream(seed, _length_key(length), index, 1)
    values = evecs @ (np.sqrt(evals) * rng.standard_normal(n))
    return MaterialSample(values=values, period=length, seed=int(seed),
                          index=int(index), periodic=False)


def constant_sample(value, period, n):
    """Degenerate deterministic sample (used for sigma^2 = 0 style configs)."""
    return MaterialSample(values=np.full(int(n), float(value)), period=float(period),
                          seed=0, index=0, prng="constant")
