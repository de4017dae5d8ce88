"""Monte Carlo ensembles of cell problems and empirical error rates.

The estimation targets are the two error components of the periodic
representative-volume approximation: random fluctuations of the per-sample
effective quantities about their mean (expected to decay like L^{-1/2} in
the period L) and the systematic deviation of that mean from the infinite-
volume limit (expected to decay like ln L / L), plus the combined Monte
Carlo error of an N-sample average, whose natural envelope is
1/sqrt(N L) + ln(L)/L with the balanced choice N ~ L / ln^2 L.

`run_ensemble` is the orchestration entry point: embarrassingly parallel
over (L, sample index), deterministic regardless of worker count because
every sample is a pure function of (seed, L, index) and reductions run in
fixed index order.  The estimators (`fluctuation_estimate`,
`systematic_estimate`, `mc_total_error`, `fit_rate`) are plain
deterministic reductions with seeded bootstrap confidence intervals.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cell import ConvergenceError, SingularityError, SolverOptions, assemble
from .fields import periodize_covariance, sample_periodic_field

__all__ = [
    "EnsembleError",
    "StatisticsError",
    "DegenerateFitError",
    "EnsemblePlan",
    "EnsembleRun",
    "FluctuationEstimate",
    "SystematicEstimate",
    "McRow",
    "RateFit",
    "run_ensemble",
    "fluctuation_estimate",
    "systematic_estimate",
    "mc_total_error",
    "fit_envelope_scale",
    "balanced_count",
    "fit_rate",
    "decompose_error",
    "tail_fraction",
    "cells_for",
]

FAILURE_BUDGET = 0.01
BOOTSTRAP_RESAMPLES = 1000


class EnsembleError(RuntimeError):
    """Too many per-sample solver failures (rate >= 1%)."""


class StatisticsError(RuntimeError):
    """Estimator preconditions violated (too few samples, missing order...)."""


class DegenerateFitError(ValueError):
    """Rate fit impossible: nonpositive values or too few distinct points."""


@dataclass(frozen=True)
class EnsemblePlan:
    """What to run: material, covariance, deformation, grid, sample counts."""

    material: object
    covariance: object
    F: np.ndarray
    spacing: float
    lengths: tuple
    counts: dict               # L -> number of samples
    seed: int
    order: int = 2
    options: SolverOptions = field(default_factory=SolverOptions)
    workers: int = 1


@dataclass
class EnsembleRun:
    """Solved ensemble: per-sample effective quantities keyed by period L.

    samples[L] lists HomogenizedQuantities in sample-index order (the index
    is recorded in each metadata dict), so any sample is reproducible from
    (seed, L, index) alone.  timing[L] is wall seconds from run start until
    that L completed; it never enters data files.
    """

    lengths: tuple
    counts: dict
    F: np.ndarray
    order: int
    seed: int
    samples: dict
    failures: dict
    timing: dict

    def count(self, L):
        return len(self.samples[L])

    def values(self, L, order):
        """Per-sample quantities of one derivative order, flattened: (N, k)."""
        if order > self.order:
            raise StatisticsError(
                f"run holds derivatives up to order {self.order}, asked for {order}")
        qs = self.samples[L]
        if not qs:
            raise StatisticsError(f"no successful samples at L = {L}")
        if order == 0:
            return np.array([[q.energy] for q in qs])
        if order == 1:
            return np.stack([q.stress.reshape(-1) for q in qs])
        return np.stack([q.tangent.reshape(-1) for q in qs])

    def mean(self, L, order):
        return self.values(L, order).mean(axis=0)


@dataclass
class FluctuationEstimate:
    sd: float
    ci_low: float
    ci_high: float
    count: int


@dataclass
class SystematicEstimate:
    order: int
    strategy: str
    reference: np.ndarray
    biases: dict               # L -> |mean_L - reference|
    ses: dict                  # L -> propagated standard error of the bias
    underpowered: dict         # L -> bias < 3 * SE
    excluded: tuple            # lengths that served as reference (skip in fits)


@dataclass
class McRow:
    L: int
    N: int
    groups: int
    total: float               # sqrt(mean_j |group_mean_j - reference|^2)
    scatter: float             # fluctuation part
    bias: float                # |overall mean - reference|
    envelope: float            # 1/sqrt(NL) + ln(L)/L, unscaled


@dataclass
class RateFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    count: int
    residuals: np.ndarray

    @property
    def half_width(self):
        return 0.5 * (self.ci_high - self.ci_low)


# =====================================================================
# ensemble orchestration
# =====================================================================


def cells_for(length, spacing):
    """Cell count L / h, requiring the spacing to divide the period."""
    ratio = float(length) / float(spacing)
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"spacing {spacing} does not divide period {length}")
    return n


def _solve_batch(args):
    plan, L, n, indices = args
    out = []
    for idx in indices:
        sample = sample_periodic_field(plan.covariance, L, n, plan.seed, idx)
        try:
            q = assemble(plan.material, sample, plan.F, order=plan.order,
                         opts=plan.options)
        except (ConvergenceError, SingularityError) as exc:
            out.append((idx, f"{type(exc).__name__}: {exc}", None))
        else:
            q.metadata["index"] = idx
            q.metadata["seed"] = plan.seed
            out.append((idx, None, q))
    return L, out


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def run_ensemble(plan):
    """Solve counts[L] independent samples per L; returns an EnsembleRun.

    Per-sample convergence failures are recorded and tolerated up to a 1%
    rate; beyond that the run aborts with EnsembleError.  Results and all
    downstream reductions are ordered by sample index, so the output is
    independent of the worker count.
    """
    lengths = tuple(plan.lengths)
    counts = {L: int(plan.counts[L]) for L in lengths}
    grids = {}
    for L in lengths:
        if counts[L] < 1:
            raise ValueError(f"need at least one sample at L = {L}")
        n = cells_for(L, plan.spacing)
        periodize_covariance(plan.covariance, L, n)  # fail fast on bad geometry
        grids[L] = n

    total_planned = sum(counts.values())
    budget = FAILURE_BUDGET * total_planned
    samples = {L: [] for L in lengths}
    failures = {L: [] for L in lengths}
    timing = {}
    n_failed = 0

    jobs = []
    for L in lengths:
        indices = list(range(counts[L]))
        if plan.workers > 1:
            for chunk in _chunks(indices, max(1, len(indices) // (4 * plan.workers) + 1)):
                jobs.append((plan, L, grids[L], chunk))
        else:
            jobs.append((plan, L, grids[L], indices))

    started = time.perf_counter()

    def absorb(L, results):
        nonlocal n_failed
        for idx, err, q in results:
            if err is None:
                samples[L].append((idx, q))
            else:
                failures[L].append((idx, err))
                n_failed += 1
        if len(samples[L]) + len(failures[L]) == counts[L]:
            timing[L] = time.perf_counter() - started

    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            for L, results in pool.map(_solve_batch, jobs):
                absorb(L, results)
                if n_failed > budget:
                    break
    else:
        for job in jobs:
            L, results = _solve_batch(job)
            absorb(L, results)
            if n_failed > budget:
                break
    for L in lengths:
        samples[L].sort(key=lambda pair: pair[0])
        samples[L] = [q for _, q in samples[L]]
        failures[L].sort(key=lambda pair: pair[0])
        timing.setdefault(L, time.perf_counter() - started)

    if n_failed > 0 and n_failed >= FAILURE_BUDGET * total_planned:
        first = next(msg for L in lengths for _, msg in failures[L])
        raise EnsembleError(
            f"{n_failed}/{total_planned} samples failed (budget {FAILURE_BUDGET:.0%}); "
            f"first failure: {first}")
    return EnsembleRun(lengths=lengths, counts=counts, F=np.asarray(plan.F, float),
                       order=plan.order, seed=plan.seed, samples=samples,
                       failures=failures, timing=timing)


# =====================================================================
# estimators
# =====================================================================


def _sd(values):
    """Unbiased sample SD with Frobenius norm over components: (N, k) -> float."""
    N = len(values)
    dev = values - values.mean(axis=0)
    return float(np.sqrt((dev * dev).sum() / (N - 1)))


def _bootstrap_sds(values, rng, resamples=BOOTSTRAP_RESAMPLES):
    N = len(values)
    out = np.empty(resamples)
    block = max(1, min(resamples, int(2e6 // max(1, values.size))))
    done = 0
    while done < resamples:
        b = min(block, resamples - done)
        idx = rng.integers(0, N, size=(b, N))
        x = values[idx]
        dev = x - x.mean(axis=1, keepdims=True)
        out[done:done + b] = np.sqrt((dev * dev).sum(axis=(1, 2)) / (N - 1))
        done += b
    return out


def fluctuation_estimate(run, order):
    """Per-L sample SD of the order-th derivative with bootstrap CI.

    Needs at least 8 samples per L.  Returns {L: FluctuationEstimate}.
    """
    out = {}
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 101, order]))
    for L in run.lengths:
        vals = run.values(L, order)
        N = len(vals)
        if N < 8:
            raise StatisticsError(f"need >= 8 samples for a fluctuation estimate, got {N}")
        sds = _bootstrap_sds(vals, rng)
        lo, hi = np.percentile(sds, [2.5, 97.5])
        out[L] = FluctuationEstimate(sd=_sd(vals), ci_low=float(lo), ci_high=float(hi),
                                     count=N)
    return out


def _reference(run, order, strategy, reference_run):
    """Reference vector, its standard error, and lengths to exclude from fits."""
    if reference_run is not None:
        Lref = max(reference_run.lengths)
        vals = reference_run.values(Lref, order)
        ref = vals.mean(axis=0)
        se = _sd(vals) / np.sqrt(len(vals))
        return ref, se, (), "external"
    ordered = sorted(run.lengths)
    if strategy == "largest_L_mean":
        Lmax = ordered[-1]
        vals = run.values(Lmax, order)
        ref = vals.mean(axis=0)
        se = _sd(vals) / np.sqrt(len(vals))
        return ref, se, (Lmax,), strategy
    if strategy == "extrapolated":
        if len(ordered) < 2 or ordered[-1] != 2 * ordered[-2]:
            raise StatisticsError(
                "extrapolated reference needs the two largest lengths in ratio 2")
        v1 = run.values(ordered[-1], order)
        v2 = run.values(ordered[-2], order)
        # Richardson step assuming first-order bias decay
        ref = 2.0 * v1.mean(axis=0) - v2.mean(axis=0)
        se = float(np.sqrt(4.0 * _sd(v1) ** 2 / len(v1) + _sd(v2) ** 2 / len(v2)))
        return ref, se, (ordered[-1], ordered[-2]), strategy
    raise ValueError(f"unknown reference strategy {strategy!r}")


def systematic_estimate(run, order=0, strategy="largest_L_mean", reference_run=None):
    """Per-L bias |mean_L - reference| with propagated MC standard errors.

    The reference is the mean at the largest L (excluded from fits), a
    Richardson extrapolation from the two largest (both excluded), or the
    largest-L mean of a separate reference run.  An L is flagged
    underpowered when its bias does not exceed 3 standard errors.
    """
    ref, se_ref, excluded, name = _reference(run, order, strategy, reference_run)
    biases, ses, weak = {}, {}, {}
    for L in run.lengths:
        vals = run.values(L, order)
        bias = float(np.linalg.norm(vals.mean(axis=0) - ref))
        se = float(np.sqrt(_sd(vals) ** 2 / len(vals) + se_ref ** 2))
        biases[L] = bias
        ses[L] = se
        weak[L] = bias < 3.0 * se
    return SystematicEstimate(order=order, strategy=name, reference=ref,
                              biases=biases, ses=ses, underpowered=weak,
                              excluded=excluded)


def decompose_error(values, reference):
    """(mse, variance, bias_sq) of samples about a reference.

    mse = variance + bias_sq holds as an exact algebraic identity
    (variance here is the biased 1/N version).
    """
    values = np.asarray(values, dtype=float)
    ref = np.asarray(reference, dtype=float).reshape(-1)
    dev_ref = values - ref
    mse = float((dev_ref * dev_ref).sum() / len(values))
    mean = values.mean(axis=0)
    dev = values - mean
    variance = float((dev * dev).sum() / len(values))
    bias_sq = float(((mean - ref) ** 2).sum())
    return mse, variance, bias_sq


def balanced_count(L, scale=1.0):
    """Sample count N ~ L / ln^2 L balancing the two error components."""
    if L <= 1:
        raise ValueError("balanced count needs L > 1")
    return max(1, int(round(scale * L / np.log(L) ** 2)))


def envelope(L, N):
    """Predicted total-error shape 1/sqrt(NL) + ln(L)/L (unscaled)."""
    return 1.0 / np.sqrt(N * L) + np.log(L) / L


def mc_total_error(run, schedule, reference, order=0):
    """Empirical total error of N-sample averages along an (L, N) schedule.

    Splits the run's samples at L into consecutive groups of N, measures the
    root mean squared deviation of the group means from the reference, and
    tabulates it against the unscaled envelope.  total^2 = scatter^2 + bias^2
    exactly per row.
    """
    ref = np.asarray(reference, dtype=float).reshape(-1)
    rows = []
    for L, N in schedule:
        vals = run.values(L, order)
        groups = len(vals) // int(N)
        if groups < 2:
            raise StatisticsError(
                f"schedule entry (L={L}, N={N}) needs >= 2N samples, have {len(vals)}")
        means = vals[:groups * N].reshape(groups, N, -1).mean(axis=1)
        mse, scatter_sq, bias_sq = decompose_error(means, ref)
        rows.append(McRow(L=int(L), N=int(N), groups=groups,
                          total=float(np.sqrt(mse)), scatter=float(np.sqrt(scatter_sq)),
                          bias=float(np.sqrt(bias_sq)), envelope=float(envelope(L, N))))
    return rows


def fit_envelope_scale(rows):
    """Least-squares scale c minimizing sum (total - c * envelope)^2."""
    t = np.array([r.total for r in rows])
    e = np.array([r.envelope for r in rows])
    denom = float(e @ e)
    if denom == 0.0:
        raise StatisticsError("degenerate envelope")
    return float(t @ e) / denom


def tail_fraction(values, z=3.0):
    """Fraction of standardized scalar samples beyond z SDs (tail proxy)."""
    values = np.asarray(values, dtype=float).reshape(-1)
    sd = values.std(ddof=1)
    if sd == 0.0:
        return 0.0
    score = np.abs(values - values.mean()) / sd
    return float((score > z).mean())


def fit_rate(xs, ys, resamples=BOOTSTRAP_RESAMPLES, seed=0):
    """Ordinary least squares in log-log with residual-bootstrap slope CI.

    Needs >= 4 distinct abscissae and strictly positive ordinates; raises
    DegenerateFitError otherwise.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be equal-length 1-d arrays")
    if len(np.unique(xs)) < 4:
        raise DegenerateFitError("need at least 4 distinct abscissae")
    if np.any(ys <= 0.0) or np.any(xs <= 0.0):
        raise DegenerateFitError("rate fits need positive data")
    lx = np.log(xs)
    ly = np.log(ys)
    xc = lx - lx.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (ly - ly.mean())) / sxx
    intercept = float(ly.mean() - slope * lx.mean())
    fitted = intercept + slope * lx
    residuals = ly - fitted
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 202]))
    idx = rng.integers(0, len(xs), size=(resamples, len(xs)))
    Y = fitted[None, :] + residuals[idx]
    Yc = Y - Y.mean(axis=1, keepdims=True)
    slopes = (Yc @ xc) / sxx
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    return RateFit(slope=slope, intercept=intercept, ci_low=float(lo), ci_high=float(hi),
                   count=len(xs), residuals=residuals)
