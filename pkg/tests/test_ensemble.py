import math
import random

import numpy as np
import pytest

from homlab import ensemble, hgfd
from homlab.corrector import CorrectorSet, compute_flux, homogenized_coefficient
from homlab.ensemble import (
    EnsembleConfig,
    estimate_moments,
    field_path,
    fit_scaling,
    read_samples,
    run_sweep,
    scaling_report,
    write_run,
)
from homlab.errors import (
    DegenerateFitError,
    InsufficientSamplesError,
    NoConvergenceError,
    SweepAbortedError,
    ValidationError,
)
from homlab.functionals import (
    Centering,
    FunctionalSample,
    commutator_field,
    eval_E,
    eval_I,
    eval_J,
    homogenized_solution,
    pair,
    weighted_sample,
)
from homlab.gaussian import embedding_spectrum, sample_coefficient
from homlab.operators import SolveReport, grad

TOY = dict(n_samples=8, n=64, extent=32.0, eps_list=(0.5, 0.25, 0.125), master_seed=11)


# ------------------------------------------------------------------ config


def test_config_parse():
    text = """
    # toy sweep
    seed = 5
    samples = 16   # per scale
    beta = 1
    eps = 1/2, 1/4, 0.125
    lambda = 0.3
    link = nonsymmetric
    kappa = 0.2
    persist_fields = no
    """
    c = EnsembleConfig.from_text(text)
    assert (c.master_seed, c.n_samples, c.beta) == (5, 16, 1.0)
    assert c.eps_list == (0.5, 0.25, 0.125)
    assert c.cov.link.kind == "nonsymmetric" and c.cov.link.lam == 0.3 and c.persist_fields is False


def test_config_text_round_trip():
    c = EnsembleConfig(**TOY, link="diagonal-sigmoid", functionals="j0")
    assert EnsembleConfig.from_text(c.to_text()) == c


@pytest.mark.parametrize("text", ["bogus = 1", "seed = x", "seed 4", "persist_fields = maybe"])
def test_config_rejects_bad_lines(text):
    with pytest.raises(ValidationError):
        EnsembleConfig.from_text(text)


def test_config_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        EnsembleConfig.load(tmp_path / "missing.cfg")


@pytest.mark.parametrize("overrides", [
    dict(eps_list=(0.5, 0.3, 0.125)),   # not dyadic
    dict(eps_list=(0.25, 0.5, 0.125)),  # not decreasing
    dict(eps_list=(0.5, 0.25, 0.125, 0.0625)),  # support beyond a quarter torus
    dict(functionals="some"),
    dict(n_samples=0),
])
def test_config_validation(overrides):
    with pytest.raises(ValidationError):
        EnsembleConfig(**{**TOY, **overrides}).validate()


# ------------------------------------------------------------------- sweep


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("toy")
    config = EnsembleConfig(**TOY)
    result = run_sweep(config, str(run_dir))
    write_run(result, str(run_dir))
    return config, result, run_dir


def test_sweep_layout(toy_run):
    config, result, run_dir = toy_run
    assert len(result.samples) == config.n_samples * len(config.eps_list)
    assert (run_dir / "samples.csv").is_file() and (run_dir / "abar.json").is_file()
    assert (run_dir / "fields" / "phi_00007.hgfd").is_file()
    assert (run_dir / "fields" / "v_00003_e2.hgfd").is_file()
    assert not result.failures
    assert {s.centering for s in result.samples} == {"ensemble-mean"}


def test_sweep_is_deterministic(toy_run, tmp_path):
    config, result, _ = toy_run
    again = run_sweep(config, str(tmp_path))
    assert again.csv_text() == result.csv_text()
    write_run(again, str(tmp_path))
    assert read_samples(tmp_path / "samples.csv", 2) == result.samples


def test_replay_from_persisted_fields(toy_run):
    """Every CSV value recomputed directly from the stored correctors and
    solutions, with the coefficient regenerated from its seed."""
    config, result, run_dir = toy_run
    grid, d = config.grid, config.dim
    tests = config.tests
    spectrum = embedding_spectrum(config.cov, grid)
    abar = result.abar
    coefficients, correctors = [], []
    for index in range(config.n_samples):
        a = sample_coefficient(config.cov, grid, config.master_seed, index, config.clip_tolerance, spectrum)
        phi = hgfd.read(field_path(str(run_dir), "phi", index), (d,))
        q = compute_flux(a, phi)
        coefficients.append(a)
        correctors.append(CorrectorSet(grid, phi, q, homogenized_coefficient(q)))
    assert np.allclose(abar, np.mean([c.abar for c in correctors], axis=0), rtol=1e-14, atol=0)
    replayed, expansion = [], {}
    for k, eps in enumerate(config.eps_list):
        solutions = [hgfd.read(field_path(str(run_dir), "v", i, k)) for i in range(config.n_samples)]
        cen = Centering.from_ensemble(coefficients, solutions, correctors, abar)
        U = grad(homogenized_solution(abar, tests["f"], eps, grid), grid)
        gw = weighted_sample(tests["g"], grid, eps)
        expansion[eps] = [pair(gw, np.einsum("i...,ij...->j...", U, commutator_field(a, c, abar)))
                          for a, c in zip(coefficients, correctors)]
        for i, (a, c, v) in enumerate(zip(coefficients, correctors, solutions)):
            replayed.append(FunctionalSample.create(
                i, eps, config.beta, d, centering="ensemble-mean",
                j0=eval_J(0, tests["F"], eps, a, c, abar),
                j1=eval_J(1, tests["F"], eps, a, c, abar),
                j2=eval_J(2, tests["F"], eps, a, c, abar),
                i1=eval_I(1, tests["g"], eps, a, v, cen),
                i2=eval_I(2, tests["g"], eps, a, v, cen),
                e_val=eval_E(tests["g"], eps, a, v, c, abar, U, cen),
            ))
    # values on the scale of their ensemble spread; E is a small difference of
    # the commutator and expansion pairings, so its roundoff scale is theirs
    stored = {(s.sample_index, s.eps): s for s in result.samples}
    for name in ("j0", "j1", "j2", "i1", "i2", "e_val"):
        for eps in config.eps_list:
            ours = [getattr(r, name) for r in replayed if r.eps == eps]
            theirs = [getattr(stored[(r.sample_index, eps)], name) for r in replayed if r.eps == eps]
            scale = math.sqrt(np.mean(np.square(expansion[eps] if name == "e_val" else ours)))
            assert max(abs(x - y) for x, y in zip(ours, theirs)) <= 1e-12 * scale
    # statistics: every moment in the report recomputed from the replayed values
    report = scaling_report(result.samples, config)
    again = scaling_report(replayed, config)
    for attr, by_q in report["statistics"].items():
        for q, rows in by_q.items():
            for x, y in zip(rows, again["statistics"][attr][q]):
                # centred functionals have a mean at roundoff, so it is judged on the rms scale
                assert y["mean"] == pytest.approx(x["mean"], rel=1e-12, abs=1e-12 * x["moment"])
                for key in ("variance", "moment"):
                    assert y[key] == pytest.approx(x[key], rel=1e-12, abs=1e-300)
    for name, fit in report["fits"].items():
        if "slope" in fit:
            assert again["fits"][name]["slope"] == pytest.approx(fit["slope"], rel=1e-12, abs=1e-12)


def test_statistics_recomputed_from_csv(toy_run):
    config, result, run_dir = toy_run
    reread = read_samples(run_dir / "samples.csv", 2)
    a = scaling_report(result.samples, config)
    b = scaling_report(reread, config)
    assert a == b


def test_degenerate_spec_gives_zero_functionals(tmp_path):
    # a covariance this small leaves the sigmoid link exactly constant in double precision
    config = EnsembleConfig(**{**TOY, "n_samples": 1, "c0": 1e-300})
    result = run_sweep(config, str(tmp_path))
    for s in result.samples:
        for name in ("j0", "j1", "j2", "i1", "i2", "e_val"):
            assert abs(getattr(s, name)) <= 1e-14


def test_sweep_aborts_on_failures(monkeypatch, tmp_path):
    def failing(a, tol=1e-10, max_iter=None):
        raise NoConvergenceError(SolveReport(3, 1.0, False, tol))

    monkeypatch.setattr(ensemble, "solve_corrector", failing)
    with pytest.raises(SweepAbortedError) as info:
        run_sweep(EnsembleConfig(**TOY), str(tmp_path))
    assert info.value.failures and "1%" in str(info.value)


def test_precomputed_centering_label(tmp_path):
    config = EnsembleConfig(**{**TOY, "n_samples": 2, "eps_list": (0.5, 0.25)})
    grid = config.grid
    zero = Centering(np.zeros((2,) + grid.shape), np.zeros((2,) + grid.shape))
    result = run_sweep(config, str(tmp_path), centering={0: zero, 1: zero})
    assert {s.centering for s in result.samples} == {"precomputed"}
    raw = run_sweep(config, str(tmp_path))
    # with a zero centering I1 is the raw pairing, the ensemble-mean version subtracts the average
    pairs = {(s.sample_index, s.eps): s for s in raw.samples}
    for s in result.samples:
        other = pairs[(s.sample_index, s.eps)]
        mean = np.mean([t.i1 for t in result.samples if t.eps == s.eps])
        assert other.i1 == pytest.approx(s.i1 - mean, abs=1e-15)


# -------------------------------------------------------------- statistics


def synthetic(values, eps=0.5, attr="j0"):
    return [FunctionalSample.create(i, eps, 4.0, 2, **{attr: v}) for i, v in enumerate(values)]


def test_constant_data_has_zero_variance_and_ci():
    (m,) = estimate_moments(synthetic([0.7] * 10), attr="j0")
    assert m.variance == 0.0 and m.variance_ci == (0.0, 0.0)
    assert m.moment == pytest.approx(0.7, rel=1e-15)
    assert m.moment_ci[1] - m.moment_ci[0] <= 1e-15


def test_second_moment_identity(rng):
    x = rng.standard_normal(37) * 2 + 0.5
    (m,) = estimate_moments(synthetic(x), q=2, attr="j0")
    biased = m.variance * (len(x) - 1) / len(x)
    assert m.moment == pytest.approx(math.sqrt(biased + m.mean**2), rel=1e-13)


def test_too_few_samples():
    with pytest.raises(InsufficientSamplesError):
        estimate_moments(synthetic([1.0] * 7), attr="j0")


def test_jackknife_coverage_on_gaussian_data(rng):
    """Nominal 95% variance intervals cover the true variance within simulation error."""
    trials, n, sigma2 = 400, 256, 2.0
    hits = 0
    for _ in range(trials):
        (m,) = estimate_moments(synthetic(rng.standard_normal(n) * math.sqrt(sigma2)), attr="j0")
        hits += m.variance_ci[0] <= sigma2 <= m.variance_ci[1]
    coverage = hits / trials
    se = math.sqrt(0.95 * 0.05 / trials)
    assert abs(coverage - 0.95) <= 3 * se


def test_order_independence(rng):
    samples = synthetic(rng.standard_normal(50) * 1e3) + synthetic(rng.standard_normal(50), eps=0.25)
    shuffled = samples[:]
    random.Random(4).shuffle(shuffled)
    for q in (2, 4):
        a, b = estimate_moments(samples, q, "j0"), estimate_moments(shuffled, q, "j0")
        for x, y in zip(a, b):
            assert x.variance == pytest.approx(y.variance, rel=1e-12)
            assert x.moment == pytest.approx(y.moment, rel=1e-12)


def test_heavy_tail_flag(rng):
    calm = estimate_moments(synthetic(rng.standard_normal(64)), q=4, attr="j0")[0]
    wild = estimate_moments(synthetic(list(rng.standard_normal(63)) + [100.0]), q=4, attr="j0")[0]
    assert not calm.heavy_tail and wild.heavy_tail


def test_fit_exact_power_law():
    eps = [0.5, 0.25, 0.125, 0.0625]
    fit = fit_scaling(eps, [3.0 * e**2 for e in eps])
    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert max(abs(r) for r in fit.residuals) <= 1e-12


@pytest.mark.parametrize("eps,values", [([0.5, 0.25], [1.0, 0.5]), ([0.5, 0.25, 0.125], [1.0, 0.0, 0.5]),
                                        ([0.5, 0.25, 0.125], [1.0, -1.0, 0.5])])
def test_degenerate_fits(eps, values):
    with pytest.raises(DegenerateFitError):
        fit_scaling(eps, values)


def test_report_hat_link_is_algebraic(toy_run):
    config, result, _ = toy_run
    report = scaling_report(result.samples, config)
    link = report["fits"]["hat_link"]
    assert link["holds"] and abs(link["mismatch"]) <= 1e-9
    assert report["centering_bias_scale"] == pytest.approx(1 / math.sqrt(8))
    assert set(report["fits"]) >= {"var_j0", "var_j0_hat", "rms_e_hat", "rms_j0_hat", "ordering"}
