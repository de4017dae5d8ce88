"""Experiment driver.

Subcommands
-----------
single      solve one sample, write quantities.csv / corrector.csv / checks.csv
rates       Monte Carlo fluctuation + systematic tables and log-log rate fits,
            write fluctuations.csv / systematic.csv / rates.csv
mc          total-error table along the balanced schedule N ~ L/ln^2 L,
            write mc.csv
validate    run the built-in cross-checks (oracle routes, invariants, golden
            headers) on small instances; exit 0/1
dump-field  write one sampled material field as field.csv

Config files are flat INI text (sections in brackets, key = value):

    [material]        family, lambda, mu, modulation, dimension
    [covariance]      kind, variance, correlation_length
    [discretization]  spacing
    [deformation]     mode = matrix  -> matrix = "1 0.05 ; 0 1"  (rows by ';')
                      mode = identity_plus -> angle, strain, magnitude,
                      meaning F = R(angle) (Id + magnitude * strain)
    [run]             lengths, samples, seed, and optionally order, tol_inner,
                      tol_outer, delta_bar, workers, reference_strategy,
                      reference_length, reference_samples, mc_groups, mc_scale

Outputs are plain CSV ('.' decimal, '%.17g' floats) preceded by '#key=value'
metadata lines (version, PRNG, effective seed, config hash, resolved config)
sufficient to reproduce the file exactly; no timestamps, so identical
config+seed reruns are byte-identical regardless of worker count.

Exit codes: 0 ok, 1 invariant failure, 2 solver failure, 3 config error.
Errors print one machine-readable line on stderr:
    laminhom-error code=<n> kind=<config|solver|invariant> message="..."
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import hashlib
import io
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .cell import (
    ConvergenceError,
    SingularityError,
    SolverOptions,
    assemble,
    det_identity_residual,
    fd_derivative_errors,
    rank_one_minimum,
    solve_corrector,
)
from .energy import DomainError, EnergyDensity, dist_to_rotations, rotation_from_angle
from .fields import (
    PRNG_NAME,
    CovarianceSpec,
    PeriodizationError,
    SpectrumError,
    periodize_covariance,
    sample_periodic_field,
)
from .oracle import minimize_direct
from .stats import (
    DegenerateFitError,
    EnsembleError,
    EnsemblePlan,
    StatisticsError,
    balanced_count,
    cells_for,
    fit_envelope_scale,
    fit_rate,
    fluctuation_estimate,
    mc_total_error,
    run_ensemble,
    systematic_estimate,
)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_SOLVER = 2
EXIT_CONFIG = 3

SCHEMA_VERSION = "1"

GOLDEN_HEADERS = {
    "quantities": "quantity,component,value",
    "corrector": "cell,x,omega,component,value",
    "checks": "check,value,threshold,status",
    "field": "cell,x,omega",
    "fluctuations": "order,L,count,sd,ci_low,ci_high",
    "systematic": "order,L,count,bias,se,underpowered,excluded",
    "rates": "series,order,slope,intercept,ci_low,ci_high,points",
    "mc": "L,N,groups,total_error,fluctuation_part,bias_part,envelope,scaled_envelope,ratio",
}

# checks.csv thresholds (also used by validate)
FD_STRESS_TOL = 1e-5
FD_TANGENT_TOL = 1e-4
FRAME_TOL = 1e-10
MEAN_RESIDUAL_TOL = 1e-13


class ConfigError(ValueError):
    """Bad or missing configuration."""


# =====================================================================
# configuration
# =====================================================================

_SCHEMA = {
    "material": {"family", "lambda", "mu", "modulation", "dimension"},
    "covariance": {"kind", "variance", "correlation_length"},
    "discretization": {"spacing"},
    "deformation": {"mode", "matrix", "angle", "strain", "magnitude"},
    "run": {"lengths", "samples", "seed", "order", "tol_inner", "tol_outer",
            "delta_bar", "workers", "reference_strategy", "reference_length",
            "reference_samples", "mc_groups", "mc_scale"},
}


def fmt(x):
    """Stable text form: %.17g floats, plain ints, 0/1 booleans."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def _parse_matrix(text, dim, what):
    rows = [r.strip() for r in text.split(";") if r.strip()]
    if len(rows) != dim:
        raise ConfigError(f"{what} needs {dim} rows separated by ';', got {len(rows)}")
    out = []
    for r in rows:
        entries = r.replace(",", " ").split()
        if len(entries) != dim:
            raise ConfigError(f"{what} row {r!r} needs {dim} entries")
        try:
            out.append([float(e) for e in entries])
        except ValueError as exc:
            raise ConfigError(f"{what}: {exc}") from exc
    return np.array(out)


@dataclass
class ExperimentConfig:
    """Resolved, validated experiment description (see module docstring)."""

    family: str
    lame: tuple
    modulation: float
    dimension: int
    cov_kind: str
    variance: float
    correlation_length: float
    spacing: float
    F: np.ndarray
    lengths: tuple
    samples: int
    seed: int
    order: int = 2
    tol_inner: float = 1e-12
    tol_outer: float = 1e-10
    delta_bar: float = 0.2
    workers: int = 1
    reference_strategy: str = "largest_L_mean"
    reference_length: float | None = None
    reference_samples: int | None = None
    mc_groups: int = 8
    mc_scale: float = 1.0

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=float)
        self.lengths = tuple(float(L) for L in self.lengths)
        if self.dimension not in (2, 3):
            raise ConfigError(f"dimension must be 2 or 3, got {self.dimension}")
        if self.F.shape != (self.dimension, self.dimension):
            raise ConfigError(f"deformation must be {self.dimension}x{self.dimension}")
        try:
            self.material()
            self.covariance()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.spacing > 0.0:
            raise ConfigError("spacing must be positive")
        if self.spacing > 0.5 * self.correlation_length:
            raise ConfigError(
                f"spacing {fmt(self.spacing)} too coarse: need at least two cells "
                f"per correlation length {fmt(self.correlation_length)}")
        if not self.lengths:
            raise ConfigError("need at least one length")
        for L in self.lengths + ((self.reference_length,) if self.reference_length else ()):
            if L < 4.0 * self.correlation_length:
                raise ConfigError(
                    f"period {fmt(L)} below 4 correlation lengths "
                    f"({fmt(4 * self.correlation_length)})")
            try:
                cells_for(L, self.spacing)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in a u64")
        if self.order not in (0, 1, 2):
            raise ConfigError(f"order must be 0, 1 or 2, got {self.order}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.reference_strategy not in ("largest_L_mean", "extrapolated"):
            raise ConfigError(f"unknown reference_strategy {self.reference_strategy!r}")
        if self.reference_samples is None:
            self.reference_samples = self.samples
        if self.mc_groups < 2:
            raise ConfigError("mc_groups must be >= 2")
        if not self.mc_scale > 0.0:
            raise ConfigError("mc_scale must be positive")
        dist = dist_to_rotations(self.F)
        if not dist < self.delta_bar:
            raise ConfigError(
                f"deformation too far from rotations: dist = {fmt(dist)} "
                f">= delta_bar = {fmt(self.delta_bar)}")

    def material(self):
        return EnergyDensity(self.family, lame=self.lame, modulation=self.modulation,
                             dim=self.dimension)

    def covariance(self):
        return CovarianceSpec(self.cov_kind, self.variance, self.correlation_length)

    def solver_options(self):
        return SolverOptions(tol_inner=self.tol_inner, tol_outer=self.tol_outer,
                             delta_bar=self.delta_bar)

    def plan(self, lengths=None, counts=None, order=None):
        lengths = tuple(lengths if lengths is not None else self.lengths)
        if counts is None:
            counts = {L: self.samples for L in lengths}
        elif isinstance(counts, int):
            counts = {L: counts for L in lengths}
        return EnsemblePlan(material=self.material(), covariance=self.covariance(),
                            F=self.F, spacing=self.spacing, lengths=lengths,
                            counts=counts, seed=self.seed,
                            order=self.order if order is None else order,
                            options=self.solver_options(), workers=self.workers)

    def canonical_items(self):
        """Resolved config as ordered (key, value) text pairs, for metadata
        and hashing.  Worker count is deliberately excluded: outputs do not
        depend on it."""
        lam, mu = self.lame
        return [
            ("material.family", self.family),
            ("material.lambda", fmt(lam)),
            ("material.mu", fmt(mu)),
            ("material.modulation", fmt(self.modulation)),
            ("material.dimension", fmt(self.dimension)),
            ("covariance.kind", self.cov_kind),
            ("covariance.variance", fmt(self.variance)),
            ("covariance.correlation_length", fmt(self.correlation_length)),
            ("discretization.spacing", fmt(self.spacing)),
            ("deformation.F", " ".join(fmt(v) for v in self.F.reshape(-1))),
            ("run.lengths", " ".join(fmt(L) for L in self.lengths)),
            ("run.samples", fmt(self.samples)),
            ("run.seed", fmt(self.seed)),
            ("run.order", fmt(self.order)),
            ("run.tol_inner", fmt(self.tol_inner)),
            ("run.tol_outer", fmt(self.tol_outer)),
            ("run.delta_bar", fmt(self.delta_bar)),
            ("run.reference_strategy", self.reference_strategy),
            ("run.reference_length",
             fmt(self.reference_length) if self.reference_length else "none"),
            ("run.reference_samples", fmt(self.reference_samples)),
            ("run.mc_groups", fmt(self.mc_groups)),
            ("run.mc_scale", fmt(self.mc_scale)),
        ]

    def sha256(self):
        text = "\n".join(f"{k}={v}" for k, v in self.canonical_items())
        return hashlib.sha256(text.encode()).hexdigest()


def _section(cp, name):
    if not cp.has_section(name):
        raise ConfigError(f"missing [{name}] section")
    unknown = set(cp.options(name)) - _SCHEMA[name]
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    return dict(cp.items(name))


def _need(sec, secname, key):
    if key not in sec:
        raise ConfigError(f"missing {secname}.{key}")
    return sec[key]


def _as_float(secname, key, text):
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{secname}.{key}: {exc}") from exc


def _as_int(secname, key, text):
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"{secname}.{key}: {exc}") from exc


def load_config(path):
    """Parse and validate a config file into an ExperimentConfig."""
    # ';' separates matrix rows, so only '#' may start an inline comment
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                   interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")

    mat = _section(cp, "material")
    cov = _section(cp, "covariance")
    disc = _section(cp, "discretization")
    defo = _section(cp, "deformation")
    run = _section(cp, "run")

    dim = _as_int("material", "dimension", _need(mat, "material", "dimension"))
    if dim not in (2, 3):
        raise ConfigError(f"dimension must be 2 or 3, got {dim}")
    mode = _need(defo, "deformation", "mode").strip().lower()
    if mode == "matrix":
        if "angle" in defo or "strain" in defo or "magnitude" in defo:
            raise ConfigError("matrix mode takes only the matrix key")
        F = _parse_matrix(_need(defo, "deformation", "matrix"), dim, "deformation.matrix")
    elif mode == "identity_plus":
        if "matrix" in defo:
            raise ConfigError("identity_plus mode does not take a matrix key")
        angle = _as_float("deformation", "angle", defo.get("angle", "0"))
        strain = _parse_matrix(_need(defo, "deformation", "strain"), dim,
                               "deformation.strain")
        magnitude = _as_float("deformation", "magnitude",
                              _need(defo, "deformation", "magnitude"))
        F = rotation_from_angle(angle, dim) @ (np.eye(dim) + magnitude * strain)
    else:
        raise ConfigError(f"deformation.mode must be matrix or identity_plus, got {mode!r}")

    lengths = _need(run, "run", "lengths").replace(",", " ").split()
    if not lengths:
        raise ConfigError("run.lengths is empty")
    ref_len = run.get("reference_length")

    kwargs = dict(
        family=_need(mat, "material", "family").strip(),
        lame=(_as_float("material", "lambda", _need(mat, "material", "lambda")),
              _as_float("material", "mu", _need(mat, "material", "mu"))),
        modulation=_as_float("material", "modulation", _need(mat, "material", "modulation")),
        dimension=dim,
        cov_kind=_need(cov, "covariance", "kind").strip(),
        variance=_as_float("covariance", "variance", _need(cov, "covariance", "variance")),
        correlation_length=_as_float("covariance", "correlation_length",
                                     _need(cov, "covariance", "correlation_length")),
        spacing=_as_float("discretization", "spacing", _need(disc, "discretization", "spacing")),
        F=F,
        lengths=[_as_float("run", "lengths", L) for L in lengths],
        samples=_as_int("run", "samples", _need(run, "run", "samples")),
        seed=_as_int("run", "seed", _need(run, "run", "seed")),
    )
    optional = {
        "order": ("order", _as_int),
        "tol_inner": ("tol_inner", _as_float),
        "tol_outer": ("tol_outer", _as_float),
        "delta_bar": ("delta_bar", _as_float),
        "workers": ("workers", _as_int),
        "reference_samples": ("reference_samples", _as_int),
        "mc_groups": ("mc_groups", _as_int),
        "mc_scale": ("mc_scale", _as_float),
    }
    for key, (kw, conv) in optional.items():
        if key in run:
            kwargs[kw] = conv("run", key, run[key])
    if "reference_strategy" in run:
        kwargs["reference_strategy"] = run["reference_strategy"].strip()
    if ref_len is not None:
        kwargs["reference_length"] = _as_float("run", "reference_length", ref_len)
    return ExperimentConfig(**kwargs)


# =====================================================================
# output
# =====================================================================


def base_metadata(config, command, extra=()):
    items = [("schema_version", SCHEMA_VERSION),
             ("tool", "laminhom"),
             ("version", __version__),
             ("command", command),
             ("prng", PRNG_NAME),
             ("config_sha256", config.sha256())]
    items.extend(("config." + k, v) for k, v in config.canonical_items())
    items.extend(extra)
    return items


def write_csv(out_dir, name, schema, rows, metadata):
    path = Path(out_dir) / name
    lines = [f"#{k}={v}" for k, v in metadata]
    lines.append(GOLDEN_HEADERS[schema])
    lines.extend(",".join(fmt(c) for c in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return path


def _error_line(code, kind, message):
    message = str(message).replace('"', "'").replace("\n", " ")
    print(f'laminhom-error code={code} kind={kind} message="{message}"', file=sys.stderr)


def _component_label(index_tuple):
    return "".join(str(i + 1) for i in index_tuple)


# =====================================================================
# single
# =====================================================================


def _single_checks(w, sample, F, opts, sol, quantities, seed):
    """Named (check, value, threshold, passed) rows for checks.csv."""
    d = w.dim
    report = fd_derivative_errors(w, sample, F, opts=opts, step=1e-4)
    det_dev = det_identity_residual(sol.p, F)
    det_thr = 1e-12 * sample.n * abs(np.linalg.det(F))
    R = rotation_from_angle(0.7, d)
    rotated = assemble(w, sample, R @ F, order=0, opts=opts)
    frame_dev = abs(rotated.energy - quantities.energy)
    rho = rank_one_minimum(quantities.tangent,
                           np.random.default_rng(np.random.SeedSequence([seed, 303])))
    sigma = quantities.metadata["sigma"]
    flux_thr = 10.0 * opts.tol_inner * (1.0 + float(np.linalg.norm(sigma)))
    mean_thr = MEAN_RESIDUAL_TOL * (1.0 + float(np.abs(sol.p).max()))
    rows = [
        ("fd_stress", report["stress_rel_error"], FD_STRESS_TOL,
         report["stress_rel_error"] <= FD_STRESS_TOL),
        ("fd_tangent", report["tangent_rel_error"], FD_TANGENT_TOL,
         report["tangent_rel_error"] <= FD_TANGENT_TOL),
        ("det_identity", det_dev, det_thr, det_dev <= det_thr),
        ("frame_indifference", frame_dev, FRAME_TOL, frame_dev <= FRAME_TOL),
        ("rank_one_min", rho, 0.0, rho > 0.0),
        ("flux_residual", sol.stats["flux_residual"], flux_thr,
         sol.stats["flux_residual"] <= flux_thr),
        ("mean_residual", sol.stats["mean_residual"], mean_thr,
         sol.stats["mean_residual"] <= mean_thr),
    ]
    return [(name, val, thr, "pass" if ok else "fail") for name, val, thr, ok in rows]


def cmd_single(config, out_dir):
    w = config.material()
    opts = config.solver_options()
    L = config.lengths[0]
    n = cells_for(L, config.spacing)
    sample = sample_periodic_field(config.covariance(), L, n, config.seed, 0)
    sol = solve_corrector(w, sample, config.F, opts)
    quantities = assemble(w, sample, config.F, base=sol, order=2, opts=opts)

    d = config.dimension
    qrows = [("W", "", quantities.energy)]
    for j in range(d):
        for k in range(d):
            qrows.append(("DW", _component_label((j, k)), quantities.stress[j, k]))
    for idx in np.ndindex(d, d, d, d):
        qrows.append(("D2W", _component_label(idx), quantities.tangent[idx]))

    sigma = quantities.metadata["sigma"]
    meta_extra = [("L", fmt(L)), ("cells", fmt(n))]
    meta_extra += [(f"sigma_{k + 1}", fmt(sigma[k])) for k in range(d)]
    write_csv(out_dir, "quantities.csv", "quantities", qrows,
              base_metadata(config, "single", meta_extra))

    grid = sample.grid()
    crows = []
    for i in range(n):
        for k in range(d):
            crows.append((i, grid[i], sample.values[i], f"p{k + 1}", sol.p[i, k]))
    write_csv(out_dir, "corrector.csv", "corrector", crows,
              base_metadata(config, "single", meta_extra))

    checks = _single_checks(w, sample, config.F, opts, sol, quantities, config.seed)
    write_csv(out_dir, "checks.csv", "checks", checks,
              base_metadata(config, "single", meta_extra))
    failed = [c[0] for c in checks if c[3] == "fail"]
    if failed:
        _error_line(EXIT_INVARIANT, "invariant", f"checks failed: {', '.join(failed)}")
        return EXIT_INVARIANT
    return EXIT_OK


# =====================================================================
# rates
# =====================================================================


def _parse_synthetic(text):
    kind, _, arg = text.partition(":")
    if kind.strip().lower() != "powerlaw":
        raise ConfigError(f"unknown synthetic form {text!r} (expected powerlaw:EXP)")
    try:
        return float(arg)
    except ValueError as exc:
        raise ConfigError(f"bad synthetic exponent {arg!r}") from exc


def _synthetic_rates(config, out_dir, exponent):
    """Exact power-law data driven through the real table + fit pipeline."""
    orders = range(config.order + 1)
    lengths = sorted(config.lengths)
    meta = base_metadata(config, "rates", [("synthetic", f"powerlaw:{fmt(exponent)}")])
    fl_rows, sy_rows, rate_rows = [], [], []
    for order in orders:
        values = {L: float(L) ** exponent for L in lengths}
        for L in lengths:
            v = values[L]
            fl_rows.append((order, L, config.samples, v, v, v))
            sy_rows.append((order, L, config.samples, v, 0.0, 0, 0))
        fit = fit_rate(np.array(lengths), np.array([values[L] for L in lengths]),
                       seed=config.seed)
        rate_rows.append(("fluctuation", order, fit.slope, fit.intercept,
                          fit.ci_low, fit.ci_high, fit.count))
        rate_rows.append(("systematic", order, fit.slope, fit.intercept,
                          fit.ci_low, fit.ci_high, fit.count))
    write_csv(out_dir, "fluctuations.csv", "fluctuations", fl_rows, meta)
    write_csv(out_dir, "systematic.csv", "systematic", sy_rows, meta)
    write_csv(out_dir, "rates.csv", "rates", rate_rows, meta)
    return EXIT_OK


def _run_lengths_incrementally(config, lengths, counts, order):
    """Per-L ensembles merged into one run; returns (run, interrupted)."""
    lengths = tuple(lengths)
    merged = None
    done = []
    interrupted = False
    try:
        for L in lengths:
            part = run_ensemble(config.plan(lengths=(L,), counts={L: counts[L]},
                                            order=order))
            done.append(L)
            if merged is None:
                merged = part
            else:
                merged.samples.update(part.samples)
                merged.failures.update(part.failures)
                merged.timing.update(part.timing)
                merged.counts.update(part.counts)
    except KeyboardInterrupt:
        interrupted = True
    if merged is None:
        raise KeyboardInterrupt
    merged.lengths = tuple(done)
    return merged, interrupted


def cmd_rates(config, out_dir, synthetic=None):
    if synthetic is not None:
        return _synthetic_rates(config, out_dir, _parse_synthetic(synthetic))

    counts = {L: config.samples for L in config.lengths}
    run, interrupted = _run_lengths_incrementally(config, sorted(config.lengths),
                                                  counts, config.order)
    reference_run = None
    if config.reference_length is not None and not interrupted:
        Lr = config.reference_length
        reference_run, ref_interrupted = _run_lengths_incrementally(
            config, (Lr,), {Lr: config.reference_samples}, config.order)
        interrupted = interrupted or ref_interrupted
        if ref_interrupted:
            reference_run = None

    meta_tail = [("interrupted", "1")] if interrupted else []
    meta = base_metadata(config, "rates", meta_tail)
    orders = range(config.order + 1)

    fl_rows, sy_rows, rate_rows = [], [], []
    fluct = {}
    syst = {}
    for order in orders:
        try:
            fluct[order] = fluctuation_estimate(run, order)
        except StatisticsError as exc:
            print(f"warning: fluctuation order {order}: {exc}", file=sys.stderr)
            continue
        for L in run.lengths:
            e = fluct[order][L]
            fl_rows.append((order, L, e.count, e.sd, e.ci_low, e.ci_high))
    for order in orders:
        try:
            syst[order] = systematic_estimate(run, order=order,
                                              strategy=config.reference_strategy,
                                              reference_run=reference_run)
        except StatisticsError as exc:
            print(f"warning: systematic order {order}: {exc}", file=sys.stderr)
            continue
        est = syst[order]
        for L in run.lengths:
            if est.underpowered[L] and L not in est.excluded:
                print(f"warning: systematic order {order} underpowered at L={fmt(L)} "
                      f"(bias below 3 SE)", file=sys.stderr)
            sy_rows.append((order, L, run.count(L), est.biases[L], est.ses[L],
                            est.underpowered[L], L in est.excluded))

    for order, per_l in fluct.items():
        xs = np.array(list(run.lengths), dtype=float)
        ys = np.array([per_l[L].sd for L in run.lengths])
        try:
            fit = fit_rate(xs, ys, seed=config.seed)
        except DegenerateFitError as exc:
            print(f"warning: fluctuation fit order {order}: {exc}", file=sys.stderr)
        else:
            rate_rows.append(("fluctuation", order, fit.slope, fit.intercept,
                              fit.ci_low, fit.ci_high, fit.count))
    for order, est in syst.items():
        kept = [L for L in run.lengths if L not in est.excluded]
        try:
            fit = fit_rate(np.array(kept, dtype=float),
                           np.array([est.biases[L] for L in kept]), seed=config.seed)
        except DegenerateFitError as exc:
            print(f"warning: systematic fit order {order}: {exc}", file=sys.stderr)
        else:
            rate_rows.append(("systematic", order, fit.slope, fit.intercept,
                              fit.ci_low, fit.ci_high, fit.count))

    write_csv(out_dir, "fluctuations.csv", "fluctuations", fl_rows, meta)
    write_csv(out_dir, "systematic.csv", "systematic", sy_rows, meta)
    write_csv(out_dir, "rates.csv", "rates", rate_rows, meta)
    return 130 if interrupted else EXIT_OK


# =====================================================================
# mc
# =====================================================================


def cmd_mc(config, out_dir):
    lengths = sorted(config.lengths)
    schedule = [(L, balanced_count(L, config.mc_scale)) for L in lengths]
    counts = {L: config.mc_groups * N for L, N in schedule}
    run, interrupted = _run_lengths_incrementally(config, lengths, counts, order=0)
    if interrupted:
        print("warning: interrupted, writing partial mc table", file=sys.stderr)
        schedule = [(L, N) for L, N in schedule if L in run.lengths]

    reference_run = None
    if config.reference_length is not None:
        Lr = config.reference_length
        reference_run, ref_interrupted = _run_lengths_incrementally(
            config, (Lr,), {Lr: config.reference_samples}, 0)
        if ref_interrupted:
            reference_run = None
    est = systematic_estimate(run, order=0, strategy=config.reference_strategy,
                              reference_run=reference_run)
    rows = mc_total_error(run, schedule, est.reference, order=0)
    scale = fit_envelope_scale(rows)
    out_rows = [(r.L, r.N, r.groups, r.total, r.scatter, r.bias, r.envelope,
                 scale * r.envelope, r.total / (scale * r.envelope)) for r in rows]
    meta_tail = [("envelope_scale", fmt(scale))]
    if interrupted:
        meta_tail.append(("interrupted", "1"))
    write_csv(out_dir, "mc.csv", "mc", out_rows, base_metadata(config, "mc", meta_tail))
    return 130 if interrupted else EXIT_OK


# =====================================================================
# dump-field
# =====================================================================


def cmd_dump_field(config, out_dir):
    L = config.lengths[0]
    n = cells_for(L, config.spacing)
    sample = sample_periodic_field(config.covariance(), L, n, config.seed, 0)
    grid = sample.grid()
    rows = [(i, grid[i], sample.values[i]) for i in range(n)]
    write_csv(out_dir, "field.csv", "field", rows,
              base_metadata(config, "dump-field", [("L", fmt(L)), ("cells", fmt(n))]))
    return EXIT_OK


# =====================================================================
# validate
# =====================================================================


def _builtin_config(dim=2, family="saint-venant-kirchhoff", lengths=(8.0,), samples=2,
                    seed=20240901, **overrides):
    F = np.eye(dim)
    F[0, 1] += 0.05
    F[1, 0] += 0.05
    kwargs = dict(family=family, lame=(1.2, 0.8), modulation=0.3, dimension=dim,
                  cov_kind="triangle", variance=1.0, correlation_length=1.0,
                  spacing=0.25, F=F, lengths=lengths, samples=samples, seed=seed)
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def _check_oracle(dim, family):
    config = _builtin_config(dim=dim, family=family)
    w = config.material()
    n = cells_for(config.lengths[0], config.spacing)
    sample = sample_periodic_field(config.covariance(), config.lengths[0], n,
                                   config.seed, 0)
    sol = solve_corrector(w, sample, config.F, config.solver_options())
    energy = assemble(w, sample, config.F, base=sol, order=0).energy
    direct = minimize_direct(w, sample, config.F, config.solver_options())
    gap_w = abs(energy - direct.energy)
    gap_p = float(np.abs(sol.p - direct.p).max())
    return gap_w <= 1e-8 and gap_p <= 1e-7, f"|dW|={gap_w:.2e} |dp|={gap_p:.2e}"


def _check_single_invariants():
    config = _builtin_config()
    w = config.material()
    opts = config.solver_options()
    n = cells_for(config.lengths[0], config.spacing)
    sample = sample_periodic_field(config.covariance(), config.lengths[0], n,
                                   config.seed, 1)
    sol = solve_corrector(w, sample, config.F, opts)
    quantities = assemble(w, sample, config.F, base=sol, order=2, opts=opts)
    rows = _single_checks(w, sample, config.F, opts, sol, quantities, config.seed)
    bad = [r[0] for r in rows if r[3] == "fail"]
    return not bad, ("all pass" if not bad else "failed: " + ", ".join(bad))


def _check_spectra():
    for kind in ("triangle", "cosine-bump"):
        cov = CovarianceSpec(kind, 1.7, 1.0)
        for L, n in ((8.0, 64), (16.0, 96)):
            per = periodize_covariance(cov, L, n)
            if float(per.spectrum.min()) < 0.0:
                return False, f"negative spectrum for {kind} at L={L}"
    return True, "spectra nonnegative"


def _check_determinism():
    cov = CovarianceSpec("cosine-bump", 1.0, 1.0)
    a = sample_periodic_field(cov, 8.0, 32, 7, 3)
    b = sample_periodic_field(cov, 8.0, 32, 7, 3)
    if not np.array_equal(a.values, b.values):
        return False, "field draw not reproducible"
    config = _builtin_config()
    w = config.material()
    qa = assemble(w, a, config.F, order=1)
    qb = assemble(w, b, config.F, order=1)
    ok = qa.energy == qb.energy and np.array_equal(qa.stress, qb.stress)
    return ok, "bitwise reproducible"


def _check_negative_control():
    # a deliberately miscalibrated solve must trip the flux-constancy check
    config = _builtin_config()
    w = config.material()
    n = cells_for(config.lengths[0], config.spacing)
    sample = sample_periodic_field(config.covariance(), config.lengths[0], n,
                                   config.seed, 2)
    loose = SolverOptions(tol_outer=1.0, max_outer=1)
    sol = solve_corrector(w, sample, config.F, loose)
    sigma = sol.sigma
    threshold = 10.0 * SolverOptions().tol_inner * (1.0 + float(np.linalg.norm(sigma)))
    tripped = sol.stats["flux_residual"] > threshold
    return tripped, f"flux residual {sol.stats['flux_residual']:.2e} vs {threshold:.2e}"


def _check_golden_headers():
    config = _builtin_config(lengths=(8.0, 16.0, 32.0, 48.0), samples=2)
    mc_config = _builtin_config(lengths=(8.0, 16.0), samples=2)
    with tempfile.TemporaryDirectory() as tmp:
        with contextlib.redirect_stdout(io.StringIO()):
            cmd_single(config, tmp)
            cmd_dump_field(config, tmp)
            cmd_rates(config, tmp, synthetic="powerlaw:-0.5")
            cmd_mc(mc_config, tmp)
        expect = {"quantities.csv": "quantities", "corrector.csv": "corrector",
                  "checks.csv": "checks", "field.csv": "field",
                  "fluctuations.csv": "fluctuations", "systematic.csv": "systematic",
                  "rates.csv": "rates", "mc.csv": "mc"}
        for name, schema in expect.items():
            lines = (Path(tmp) / name).read_text().splitlines()
            header = next(line for line in lines if not line.startswith("#"))
            if header != GOLDEN_HEADERS[schema]:
                return False, f"{name} header drifted: {header!r}"
    return True, f"{len(expect)} headers match"


def cmd_validate():
    checks = [
        ("oracle_equivalence_d2", lambda: _check_oracle(2, "saint-venant-kirchhoff")),
        ("oracle_equivalence_d3", lambda: _check_oracle(3, "neo-hookean")),
        ("single_invariants", _check_single_invariants),
        ("covariance_spectra", _check_spectra),
        ("determinism", _check_determinism),
        ("negative_control_loose_tolerance", _check_negative_control),
        ("golden_headers", _check_golden_headers),
    ]
    failures = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report, do not crash the gate
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        print(f"{name}: {'pass' if ok else 'FAIL'} ({detail})")
        if not ok:
            failures.append(name)
    if failures:
        _error_line(EXIT_INVARIANT, "invariant", f"validate failed: {', '.join(failures)}")
        return EXIT_INVARIANT
    print(f"validate: {len(checks)} checks passed")
    return EXIT_OK


# =====================================================================
# argument plumbing
# =====================================================================


def _resolve_workers(args, config):
    if args.workers is not None:
        return args.workers
    env = os.environ.get("LAMINHOM_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"LAMINHOM_WORKERS={env!r} is not an integer") from exc
    return config.workers


def _prepare(args):
    config = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must fit in a u64")
        config.seed = args.seed
    config.workers = max(1, _resolve_workers(args, config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return config, out


def _add_common(sub, out_required=True):
    sub.add_argument("--config", required=True, help="experiment config file")
    sub.add_argument("--seed", type=int, default=None, help="override run.seed")
    sub.add_argument("--workers", type=int, default=None,
                     help="worker processes (default: LAMINHOM_WORKERS or config)")
    sub.add_argument("--out", required=out_required, default=".",
                     help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="laminhom",
                                     description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("single", help="solve one sample and write quantities")
    _add_common(s)
    s.set_defaults(func=lambda a: cmd_single(*_prepare(a)))

    s = subs.add_parser("rates", help="fluctuation and systematic rate tables")
    _add_common(s)
    s.add_argument("--synthetic", default=None, metavar="SPEC",
                   help="bypass solves with exact synthetic data (powerlaw:EXP)")
    s.set_defaults(func=lambda a: cmd_rates(*_prepare(a), synthetic=a.synthetic))

    s = subs.add_parser("mc", help="Monte Carlo total-error table")
    _add_common(s)
    s.set_defaults(func=lambda a: cmd_mc(*_prepare(a)))

    s = subs.add_parser("dump-field", help="write one sampled material field")
    _add_common(s)
    s.set_defaults(func=lambda a: cmd_dump_field(*_prepare(a)))

    s = subs.add_parser("validate", help="run built-in cross-checks")
    s.set_defaults(func=lambda a: cmd_validate())
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _error_line(EXIT_CONFIG, "config", exc)
        return EXIT_CONFIG
    except (PeriodizationError, SpectrumError, StatisticsError, DegenerateFitError,
            DomainError) as exc:
        _error_line(EXIT_CONFIG, "config", exc)
        return EXIT_CONFIG
    except (ConvergenceError, SingularityError, EnsembleError) as exc:
        _error_line(EXIT_SOLVER, "solver", exc)
        return EXIT_SOLVER
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
