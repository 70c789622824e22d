"""Monte Carlo sweeps over realizations and scales, moment estimation and
log-log scaling fits.

A sweep runs in two passes.  The first pass synthesizes every realization,
solves its correctors (and, when requested, the heterogeneous problems at
each scale) and stores per-sample reductions.  Every functional is affine in
the homogenized matrix ``abar`` and in the centering fields, so once the
first pass has fixed the ensemble ``abar`` and the ensemble-mean centering,
those reductions finish ``J0``, ``J1``, ``J2``, ``I1``, ``I2`` without further
work.  Only the last term of ``E`` involves the homogenized gradient, which
depends on ``abar`` nonlinearly; the second pass reloads the persisted
correctors, regenerates the coefficient field from its seed and evaluates
that term without any further solve.  That term is centred by its own
ensemble mean, so the centering noise of the commutator (of order
``n^(-1/2)`` times the spread of ``I2``) cancels against it in ``E``.
"""

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import hgfd
from .corrector import solve_corrector
from .errors import (
    DegenerateFitError,
    InsufficientSamplesError,
    NumericalError,
    SweepAbortedError,
    ValidationError,
)
from .functionals import FunctionalSample, matvec, mu_star, pi_star, quadrature_weight
from .gaussian import CovarianceSpec, Link, embedding_spectrum, sample_coefficient
from .grid import TorusGrid
from .operators import grad, solve_constant, solve_divergence_form
from .testfunctions import check_resolution, tensor_bump, vector_bump

log = logging.getLogger("homlab.ensemble")

FAILURE_LIMIT = 0.01


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


def _parse_floats(text):
    return tuple(float(eval_fraction(part)) for part in text.split(",") if part.strip())


def eval_fraction(text):
    """``"1/8"`` or ``"0.125"`` as a float."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


@dataclass
class EnsembleConfig:
    """Everything a sweep depends on; a sweep is a pure function of this record.

    The test functions are smooth bumps of slow radius ``radius``:
    ``f = g = bump * e_1`` and ``F = bump * e_1 (x) e_1``.
    """

    master_seed: int = 0
    n_samples: int = 8
    dim: int = 2
    n: int = 64
    extent: float = 32.0
    beta: float = 4.0
    c0: float = 1.0
    link: str = "scalar-sigmoid"
    lam: float = 0.2
    kappa: float = 0.0
    eps_list: tuple = (0.5, 0.25, 0.125)
    radius: float = 1.0
    test_kind: str = "smooth-bump"
    tol: float = 1e-8
    functionals: str = "all"
    clip_tolerance: float = 1e-3
    persist_fields: bool = True

    KEYS = {
        "seed": ("master_seed", int),
        "samples": ("n_samples", int),
        "dim": ("dim", int),
        "n": ("n", int),
        "extent": ("extent", float),
        "beta": ("beta", float),
        "c0": ("c0", float),
        "link": ("link", str),
        "lambda": ("lam", float),
        "kappa": ("kappa", float),
        "eps": ("eps_list", _parse_floats),
        "radius": ("radius", float),
        "test_kind": ("test_kind", str),
        "tol": ("tol", float),
        "functionals": ("functionals", str),
        "clip_tolerance": ("clip_tolerance", float),
        "persist_fields": ("persist_fields", _parse_bool),
    }

    def __post_init__(self):
        self.eps_list = tuple(float(e) for e in self.eps_list)

    @property
    def grid(self):
        return TorusGrid(self.dim, self.n, self.extent)

    @property
    def cov(self):
        return CovarianceSpec(self.beta, self.c0, self.dim, Link(self.link, self.lam, self.kappa))

    @property
    def tests(self):
        f = vector_bump(self.dim, self.radius, 0, kind=self.test_kind)
        F = tensor_bump(self.dim, self.radius, np.outer(np.eye(self.dim)[0], np.eye(self.dim)[0]),
                        kind=self.test_kind)
        return {"f": f, "g": f, "F": F}

    @property
    def with_solutions(self):
        return self.functionals == "all"

    def validate(self):
        """Check the invariants and return ``self``; raises :class:`ValidationError`."""
        if self.n_samples < 1:
            raise ValidationError("samples must be positive")
        if self.functionals not in ("all", "j0"):
            raise ValidationError(f"functionals must be 'all' or 'j0', got {self.functionals!r}")
        if not 1e-14 < self.tol < 1:
            raise ValidationError(f"tol must lie in (1e-14, 1), got {self.tol}")
        grid, _ = self.grid, self.cov
        eps = self.eps_list
        if not eps:
            raise ValidationError("eps list is empty")
        for e in eps:
            if not 0 < e <= 1 or abs(math.log2(e) - round(math.log2(e))) > 1e-12:
                raise ValidationError(f"eps values must be dyadic in (0, 1], got {e}")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValidationError("eps list must be strictly decreasing")
        for test in self.tests.values():
            for e in eps:
                check_resolution(test, grid, e)
        return self

    def to_text(self):
        lines = []
        for key, (attr, _) in self.KEYS.items():
            value = getattr(self, attr)
            if attr == "eps_list":
                value = ", ".join(repr(e) for e in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, **overrides):
        values = {}
        for number, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"config line {number}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in cls.KEYS:
                raise ValidationError(f"config line {number}: unknown key {key!r}")
            attr, parse = cls.KEYS[key]
            try:
                values[attr] = parse(value)
            except ValueError as exc:
                raise ValidationError(f"config line {number}: bad value for {key!r}: {exc}") from None
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides):
        if not os.path.isfile(path):
            raise ValidationError(f"config file {path!r} does not exist")
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)


# --------------------------------------------------------------------- sweep


@dataclass
class SampleRecord:
    """First-pass reductions of one realization (see the module docstring)."""

    index: int
    abar: np.ndarray
    jq: list = field(default_factory=list)
    jm: list = field(default_factory=list)
    j1: list = field(default_factory=list)
    i1: list = field(default_factory=list)
    i2: list = field(default_factory=list)
    gm: list = field(default_factory=list)


@dataclass
class SweepResult:
    config: EnsembleConfig
    samples: list
    abar: np.ndarray
    failures: list
    reports: list

    def csv_text(self):
        rows = [FunctionalSample.CSV_HEADER] + [s.csv_row() for s in self.samples]
        return "\n".join(rows) + "\n"


def _fsum_mean(values):
    values = list(values)
    return math.fsum(values) / len(values)


def _mean_matrix(mats):
    mats = np.asarray(mats, dtype=float)
    out = np.empty(mats.shape[1:])
    for idx in np.ndindex(*out.shape):
        out[idx] = _fsum_mean(mats[(slice(None),) + idx])
    return out


def field_path(run_dir, name, sample, k=None):
    suffix = "" if k is None else f"_e{k}"
    return os.path.join(run_dir, "fields", f"{name}_{sample:05d}{suffix}.hgfd")


def _cross(u, v, d):
    """``sum_cells u_j v_k``."""
    return np.einsum("jc,kc->jk", u.reshape(d, -1), v.reshape(d, -1))


def _first_pass(config, index, spectrum, run_dir):
    grid = config.grid
    d = grid.dim
    tests = config.tests
    a = sample_coefficient(config.cov, grid, config.master_seed, index, config.clip_tolerance, spectrum)
    phi, reports = solve_corrector(a, tol=config.tol)
    hgfd.write(field_path(run_dir, "phi", index), phi, d)
    gphi = np.stack([grad(p, grid) for p in phi])
    harmonic = gphi.copy()
    for i in range(d):
        harmonic[i, i] += 1.0
    q = np.stack([a.apply(h) for h in harmonic])
    abar_s = q.reshape(d, d, -1).mean(axis=2).T
    record = SampleRecord(index, abar_s)
    for k, eps in enumerate(config.eps_list):
        w = quadrature_weight(grid, eps)
        Fw = w * tests["F"].sample(grid, eps)
        record.jq.append(float(np.sum(Fw * q)))
        record.jm.append(np.einsum("ijc,ikc->jk", Fw.reshape(d, d, -1), harmonic.reshape(d, d, -1)))
        record.j1.append(float(np.sum(Fw * gphi)))
        if not config.with_solutions:
            continue
        f_eps = tests["f"].sample(grid, eps)
        # warm start from the sample's own two-scale expansion
        vbar = solve_constant(abar_s, f_eps, grid)
        guess = vbar + np.einsum("i...,i...->...", phi, grad(vbar, grid))
        v, report = solve_divergence_form(a, f_eps, tol=config.tol, x0=guess)
        reports.append(report)
        if config.persist_fields:
            hgfd.write(field_path(run_dir, "v", index, k), v, d)
        gw = w * tests["g"].sample(grid, eps)
        gv = grad(v, grid)
        record.i1.append(float(np.sum(gw * gv)))
        record.i2.append(float(np.sum(gw * a.apply(gv))))
        record.gm.append(_cross(gw, gv, d))
    return record, reports


def homogenized_gradients(config, abar):
    """``grad vbar`` at every scale for the ensemble ``abar``."""
    grid = config.grid
    return [grad(solve_constant(abar, config.tests["f"].sample(grid, eps), grid), grid)
            for eps in config.eps_list]


def expansion_term(config, index, abar, U_list, spectrum, run_dir):
    """``int g . Xi_i(./eps) grad_i ubar`` per scale for one persisted sample."""
    grid = config.grid
    d = grid.dim
    a = sample_coefficient(config.cov, grid, config.master_seed, index, config.clip_tolerance, spectrum)
    phi = hgfd.read(field_path(run_dir, "phi", index), (d,))
    harmonic = np.stack([grad(p, grid) for p in phi])
    for i in range(d):
        harmonic[i, i] += 1.0
    xi = np.stack([a.apply(h) - matvec(abar, h, grid) for h in harmonic])
    out = []
    for eps, U in zip(config.eps_list, U_list):
        gw = quadrature_weight(grid, eps) * config.tests["g"].sample(grid, eps)
        out.append(float(np.sum(gw * np.einsum("i...,ij...->j...", U, xi))))
    return out


def run_sweep(config, run_dir=None, centering=None):
    """Evaluate every functional for every ``(sample, eps)`` pair.

    ``centering`` optionally maps each scale index to a precomputed
    :class:`~homlab.functionals.Centering`; otherwise the ensemble mean of
    the run is used.  Fields go to ``run_dir/fields`` (a temporary directory
    when ``run_dir`` is ``None``).
    """
    config.validate()
    if run_dir is None:
        with tempfile.TemporaryDirectory(prefix="homlab-") as tmp:
            return run_sweep(config, tmp, centering)
    os.makedirs(os.path.join(run_dir, "fields"), exist_ok=True)
    grid = config.grid
    d = grid.dim
    spectrum = embedding_spectrum(config.cov, grid)
    if spectrum[1] > config.clip_tolerance:
        from .errors import ClippedSpectrumError

        raise ClippedSpectrumError(spectrum[1], config.clip_tolerance)

    records, failures, reports = [], [], []
    for index in range(config.n_samples):
        try:
            record, rep = _first_pass(config, index, spectrum, run_dir)
        except NumericalError as exc:
            log.warning("sample %d failed: %s", index, exc)
            failures.append((index, str(exc)))
            if len(failures) > FAILURE_LIMIT * config.n_samples:
                raise SweepAbortedError(failures, config.n_samples) from exc
            continue
        records.append(record)
        reports.extend(r.to_dict() for r in rep)
        log.info("sample %d: iterations %s", index, [r.iterations for r in rep])
    if not records:
        raise SweepAbortedError(failures or [(-1, "no samples")], config.n_samples)

    abar = _mean_matrix([r.abar for r in records])
    n_eps = len(config.eps_list)
    Fcols = [quadrature_weight(grid, e) * config.tests["F"].sample(grid, e) for e in config.eps_list]
    jF = [np.array([[float(np.sum(Fw[i, j])) for j in range(d)] for i in range(d)]) for Fw in Fcols]
    source = "ensemble-mean" if centering is None else "precomputed"

    if config.with_solutions:
        if centering is None:
            c_i1 = [_fsum_mean(r.i1[k] for r in records) for k in range(n_eps)]
            c_i2 = [_fsum_mean(r.i2[k] for r in records) for k in range(n_eps)]
            c_gm = [_mean_matrix([r.gm[k] for r in records]) for k in range(n_eps)]
        else:
            c_i1, c_i2, c_gm = [], [], []
            for k, eps in enumerate(config.eps_list):
                gw = quadrature_weight(grid, eps) * config.tests["g"].sample(grid, eps)
                c_i1.append(float(np.sum(gw * centering[k].grad)))
                c_i2.append(float(np.sum(gw * centering[k].flux)))
                c_gm.append(_cross(gw, centering[k].grad, d))
        U_list = homogenized_gradients(config, abar)

        extras = [expansion_term(config, r.index, abar, U_list, spectrum, run_dir) for r in records]
        if centering is None:
            c_extra = [_fsum_mean(x[k] for x in extras) for k in range(n_eps)]
        else:
            c_extra = []
            for k, eps in enumerate(config.eps_list):
                xi = centering[k].xi
                gw = quadrature_weight(grid, eps) * config.tests["g"].sample(grid, eps)
                c_extra.append(0.0 if xi is None else
                               float(np.sum(gw * np.einsum("i...,ij...->j...", U_list[k], xi))))

    samples = []
    for n_r, r in enumerate(records):
        for k, eps in enumerate(config.eps_list):
            values = {
                "j0": r.jq[k] - float(np.sum(abar * r.jm[k])),
                "j1": r.j1[k],
                "j2": r.jq[k] - float(np.sum(abar.T * jF[k])),
            }
            if config.with_solutions:
                values["i1"] = r.i1[k] - c_i1[k]
                values["i2"] = r.i2[k] - c_i2[k]
                commutator = (r.i2[k] - float(np.sum(abar * r.gm[k]))) - (
                    c_i2[k] - float(np.sum(abar * c_gm[k])))
                values["e_val"] = commutator - (extras[n_r][k] - c_extra[k])
            samples.append(FunctionalSample.create(r.index, eps, config.beta, d, centering=source, **values))
    return SweepResult(config, samples, abar, failures, reports)


def write_run(result, run_dir):
    """``samples.csv`` plus ``abar.json`` (homogenized matrix, failures, solver reports)."""
    with open(os.path.join(run_dir, "samples.csv"), "w", newline="\n") as fh:
        fh.write(result.csv_text())
    with open(os.path.join(run_dir, "abar.json"), "w") as fh:
        json.dump({"abar": result.abar.tolist(), "failures": result.failures,
                   "solver_reports": result.reports}, fh, indent=1)


def read_samples(path, d):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != FunctionalSample.CSV_HEADER:
            raise ValidationError(f"{path}: unexpected CSV header {header!r}")
        return [FunctionalSample.from_csv_row(line, d) for line in fh if line.strip()]


# ---------------------------------------------------------------- statistics


@dataclass
class MomentStats:
    """Statistics of one functional at one scale; ``*_ci`` are 95% jackknife intervals."""

    eps: float
    n: int
    mean: float
    variance: float
    variance_ci: tuple
    moment: float
    moment_ci: tuple
    q: int
    kurtosis: float
    heavy_tail: bool


def _variance(x):
    m = math.fsum(x) / len(x)
    return math.fsum((v - m) ** 2 for v in x) / (len(x) - 1)


def _moment(x, q):
    return (math.fsum(abs(v) ** q for v in x) / len(x)) ** (1.0 / q)


def jackknife(x, statistic, z=1.959963984540054):
    """Leave-one-out standard error and normal interval for ``statistic``."""
    n = len(x)
    full = statistic(x)
    loo = [statistic(x[:i] + x[i + 1:]) for i in range(n)]
    centre = math.fsum(loo) / n
    se = math.sqrt((n - 1) / n * math.fsum((v - centre) ** 2 for v in loo))
    return full, se, (full - z * se, full + z * se)


def estimate_moments(samples, q=2, attr="j0_hat"):
    """Per-scale variance and ``q``-th absolute moment of ``attr`` with jackknife CIs.

    Samples are sorted by value before folding, so the result does not
    depend on the order in which they are supplied.
    """
    by_eps = {}
    for s in samples:
        by_eps.setdefault(s.eps, []).append(float(getattr(s, attr)))
    out = []
    for eps in sorted(by_eps, reverse=True):
        x = sorted(by_eps[eps])
        if len(x) < 8:
            raise InsufficientSamplesError(f"need at least 8 samples per scale, got {len(x)} at eps={eps}")
        var, _, var_ci = jackknife(x, _variance)
        mom, _, mom_ci = jackknife(x, lambda y: _moment(y, q))
        m2, m4 = _moment(x, 2), _moment(x, 4)
        kurt = m4**4 / m2**4 if m2 > 0 else 0.0
        # flag a kurtosis above twice the Gaussian value, or a single sample
        # carrying half of the fourth moment
        heavy = bool(kurt > 6.0 or (m4 > 0 and max(v**4 for v in x) > 0.5 * len(x) * m4**4))
        out.append(MomentStats(eps, len(x), math.fsum(x) / len(x), var, var_ci, mom, mom_ci, q,
                               kurt, heavy))
    return out


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residuals: list
    slope_stderr: float

    def to_dict(self):
        return asdict(self)


def fit_scaling(eps_list, stats):
    """Least-squares line through ``(log eps, log stat)``."""
    eps = np.asarray(eps_list, dtype=float)
    y = np.asarray(stats, dtype=float)
    if eps.size < 3:
        raise DegenerateFitError(f"a scaling fit needs at least 3 points, got {eps.size}")
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise DegenerateFitError("scaling fit needs positive finite statistics")
    x = np.log(eps)
    ly = np.log(y)
    design = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, ly, rcond=None)
    residuals = ly - (slope * x + intercept)
    dof = max(eps.size - 2, 1)
    sxx = float(np.sum((x - x.mean()) ** 2))
    stderr = math.sqrt(float(np.sum(residuals**2)) / dof / sxx)
    return ScalingFit(float(slope), float(intercept), residuals.tolist(), stderr)


def reference_slope(eps_list, fn):
    """Least-squares slope of ``log fn(eps)`` against ``log eps``."""
    return fit_scaling(eps_list, [fn(e) for e in eps_list]).slope


def scaling_report(samples, config, band=0.35, e_threshold=0.6):
    """Assemble the statistics and fits of a sweep into a JSON-ready dict."""
    d, beta = config.dim, config.beta
    eps_list = sorted({s.eps for s in samples}, reverse=True)
    stats = {}
    attrs = ["j0", "j0_hat"] + (["i1_hat", "e_hat"] if config.with_solutions else [])
    for attr in attrs:
        stats[attr] = {
            f"q{q}": [asdict(m) for m in estimate_moments(samples, q, attr)] for q in (2, 4)
        }
    var = [m["variance"] for m in stats["j0"]["q2"]]
    var_hat = [m["variance"] for m in stats["j0_hat"]["q2"]]
    fit_raw = fit_scaling(eps_list, var)
    fit_hat = fit_scaling(eps_list, var_hat)
    predicted = min(beta, d)
    pi_slope = reference_slope(eps_list, lambda e: pi_star(1.0 / e, beta, d))
    fits = {
        "var_j0": {**fit_raw.to_dict(), "predicted": predicted, "band": band,
                   "pass": abs(fit_raw.slope - predicted) <= band},
        "var_j0_hat": {**fit_hat.to_dict(), "predicted": 0.0, "band": band,
                       "pass": abs(fit_hat.slope) <= band},
        "hat_link": {
            "pi_star_slope": pi_slope,
            "mismatch": fit_hat.slope - fit_raw.slope - pi_slope,
            "holds": abs(fit_hat.slope - fit_raw.slope - pi_slope) <= 1e-9,
        },
    }
    if beta == d:
        fits["var_j0"]["log_trend"] = "log factor excluded from the slope; see residuals"
    if config.with_solutions:
        rms_e = [m["moment"] for m in stats["e_hat"]["q2"]]
        rms_j = [m["moment"] for m in stats["j0_hat"]["q2"]]
        fe = fit_scaling(eps_list, rms_e)
        fj = fit_scaling(eps_list, rms_j)
        fits["rms_e_hat"] = {**fe.to_dict(), "threshold": e_threshold,
                             "reference": reference_slope(eps_list, lambda e: e * mu_star(1.0 / e, beta, d)),
                             "pass": fe.slope >= e_threshold}
        fits["rms_j0_hat"] = {**fj.to_dict(), "predicted": 0.0, "band": band,
                              "pass": abs(fj.slope) <= band}
        e_hi = stats["e_hat"]["q2"][-1]["moment_ci"][1]
        j_lo = stats["j0_hat"]["q2"][-1]["moment_ci"][0]
        fits["ordering"] = {"eps": eps_list[-1], "e_hat_ci_upper": e_hi, "j0_hat_ci_lower": j_lo,
                            "pass": e_hi < j_lo}
    heavy = sorted({attr for attr, by_q in stats.items() for m in by_q["q4"] if m["heavy_tail"]})
    n = min(m["n"] for m in stats["j0"]["q2"])
    return {
        "beta": beta,
        "dim": d,
        "eps": eps_list,
        "n_samples": n,
        "centering": sorted({s.centering for s in samples}),
        "centering_bias_scale": 1.0 / math.sqrt(n),
        "statistics": stats,
        "fits": fits,
        "heavy_tail_warnings": heavy,
    }


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
