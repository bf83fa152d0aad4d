"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one ``criterion NN ...: PASS/FAIL`` line (visible with
``pytest -s`` or on failure).  Simulation-backed criteria state their
runtime budgets and are asserted against them.
"""

import itertools
import time

import numpy as np
import pytest
from scipy import integrate

import cropprogress as cp
from cropprogress.dataset import ProgressPanel, StageScheme
from cropprogress.estimation import (
    CumulativeLinkModel,
    PredictedProgress,
    maximize_partial_likelihood,
    sandwich_covariance,
)
from cropprogress.evaluation import CvPlan, monte_carlo_cv, rmspe, selection_grid
from cropprogress.features import (
    CardinalTemperatures,
    StandardizationParams,
    gdd,
    whittaker_smooth,
)
from cropprogress.likelihood import (
    MeanStructure,
    PartialLikelihood,
    bcm_log_density,
    mb_log_density,
)
from cropprogress.mixed import MixedCumulativeLinkModel, laplace_logdensity
from cropprogress.simulate import SimConfig, simulate


def report(number, label, body):
    try:
        body()
    except BaseException:
        print(f"criterion {number:>3} [{label}]: FAIL")
        raise
    print(f"criterion {number:>3} [{label}]: PASS")


# -- 1: density normalization -------------------------------------------------

def bcm_outcomes(n_categories, n_trials):
    for counts in itertools.product(range(n_trials + 1), repeat=n_categories):
        if sum(counts) == n_trials:
            yield np.cumsum(counts[::-1])[::-1] / n_trials


def mb_outcomes(n_categories, n_trials):
    grid = [i / n_trials for i in range(n_trials + 1)]
    for free in itertools.product(grid, repeat=n_categories - 1):
        yield np.array([1.0, *free])


def test_criterion_01_density_normalization():
    def body():
        start = time.time()
        rng = np.random.default_rng(1)
        for n_categories in (2, 3):
            for n_trials in (1, 2, 3):
                for _ in range(50):
                    free = np.sort(rng.uniform(0.02, 0.98, n_categories - 1))[::-1]
                    mstar = np.r_[1.0, free]
                    total = sum(
                        np.exp(bcm_log_density(y, mstar, n_trials))
                        for y in bcm_outcomes(n_categories, n_trials)
                    )
                    assert abs(total - 1.0) < 1e-10
                    mstar_mb = np.r_[1.0, rng.uniform(0.02, 0.98, n_categories - 1)]
                    total = sum(
                        np.exp(mb_log_density(y, mstar_mb, n_trials))
                        for y in mb_outcomes(n_categories, n_trials)
                    )
                    assert abs(total - 1.0) < 1e-10
        assert time.time() - start < 10.0

    report(1, "density normalization", body)


# -- 2: score correctness -----------------------------------------------------

def _score_problem(family, link, seed=0):
    rng = np.random.default_rng(seed)
    scheme = StageScheme("x", ("A", "B", "C"))
    structure = MeanStructure(scheme, ("calendar", "thermal"), ())
    n, n_trials = 60, 40
    seasons = np.repeat(np.arange(6), 10)
    W = np.ones((n, 1))
    Z = rng.normal(size=(n, 2))
    counts = np.array(
        [rng.multinomial(n_trials, p) for p in rng.dirichlet(np.ones(4), size=n)]
    )
    y = np.column_stack(
        [np.full(n, n_trials), np.cumsum(counts[:, ::-1], axis=1)[:, ::-1][:, 1:]]
    ) / n_trials
    return PartialLikelihood(structure, link, family, n_trials, W, Z, y, seasons)


def test_criterion_02_score_matches_finite_differences():
    def body():
        rng = np.random.default_rng(2)
        h = 1e-6
        for family in ("bcm", "mb"):
            for link in ("logit", "probit", "cauchit"):
                problem = _score_problem(family, link)
                for _ in range(10):
                    thresholds = np.sort(rng.normal(0, 1, 3))[::-1]
                    theta = np.r_[thresholds, rng.normal(0, 0.5, 2)]
                    analytic = problem.score(theta)
                    fd = np.empty_like(analytic)
                    for j in range(theta.size):
                        e = np.zeros_like(theta)
                        e[j] = h
                        fd[j] = (
                            problem.loglik(theta + e) - problem.loglik(theta - e)
                        ) / (2 * h)
                    assert np.max(np.abs(analytic - fd) / (1e-8 + np.abs(fd))) < 1e-5

    report(2, "analytic score vs finite differences", body)


# -- 3: closed-form intercept-only oracle --------------------------------------

def test_criterion_03_intercept_only_closed_form():
    def body():
        rng = np.random.default_rng(3)
        scheme = StageScheme("x", ("A", "B"))
        n, n_trials = 48, 50
        seasons = np.repeat(np.arange(8), 6)
        y2 = rng.binomial(n_trials, 0.6, n) / n_trials
        y3 = rng.binomial(n_trials, 0.3, n) / n_trials
        y = np.column_stack([np.ones(n), y2, y3])
        structure = MeanStructure(scheme, ("calendar",), ())
        problem = PartialLikelihood(
            structure, "logit", "mb", n_trials,
            np.ones((n, 1)), np.zeros((n, 1)), y, seasons,
        )
        result = maximize_partial_likelihood(problem, problem.intercept_start())
        from cropprogress.links import get_link

        fitted = get_link("logit").cdf(result["theta"][:2])
        pooled = y[:, 1:].mean(axis=0)
        assert np.max(np.abs(fitted - pooled)) < 1e-8

    report(3, "intercept-only closed form", body)


# -- 4: consistency / coverage -------------------------------------------------

def test_criterion_04_sandwich_coverage():
    def body():
        start = time.time()
        scheme = StageScheme("k5", ("S2", "S3", "S4", "S5"))
        truth_misses = None
        n_replicates = 50
        for rep in range(n_replicates):
            config = SimConfig(
                scheme=scheme,
                thresholds=(2.0, 0.7, -0.7, -2.0),
                slopes={"calendar": 1.3, "thermal": 0.7},
                link="probit", family="bcm", setting="thermal",
                n_trials=100, n_seasons=200, n_obs_days=30,
                seed=4000 + rep,
            )
            sim = simulate(config)
            model = CumulativeLinkModel(
                link="probit", family="bcm", setting="thermal", n_trials=100
            ).fit(sim.table)
            truth = np.asarray([v for _, v in sim.truth["theta"]])
            hit = np.abs(model.params_ - truth) <= 3.0 * model.se_
            if truth_misses is None:
                truth_misses = np.zeros(truth.size, dtype=int)
            truth_misses += ~hit
        coverage = 1.0 - truth_misses / n_replicates
        assert np.all(coverage >= 0.95), f"per-parameter coverage {coverage}"
        elapsed = time.time() - start
        assert elapsed < 300.0, f"runtime {elapsed:.0f}s"

    report(4, "sandwich coverage over 50 replicates", body)


# -- 5: information matrix equality with one observation per season ------------

def test_criterion_05_uime():
    def body():
        rng = np.random.default_rng(5)
        scheme = StageScheme("x", ("A", "B"))
        n, n_trials = 50, 60
        seasons = np.arange(n)  # J = 1
        y2 = rng.binomial(n_trials, 0.6, n) / n_trials
        y3 = np.minimum(y2, rng.binomial(n_trials, 0.3, n) / n_trials)
        y = np.column_stack([np.ones(n), y2, y3])
        structure = MeanStructure(scheme, ("calendar",), ())
        problem = PartialLikelihood(
            structure, "probit", "bcm", n_trials,
            np.ones((n, 1)), rng.normal(size=(n, 1)), y, seasons,
        )
        result = maximize_partial_likelihood(problem, problem.intercept_start())
        sandwich, model_based = sandwich_covariance(problem, result["theta"])
        assert np.max(np.abs(sandwich - model_based)) < 1e-10

    report(5, "information matrix equality at J=1", body)


# -- 6: Laplace exactness -------------------------------------------------------

def test_criterion_06_laplace():
    def body():
        result = laplace_logdensity(
            lambda u: -0.5 * u @ u, lambda u: -u,
            lambda u: -np.eye(u.size), x0=[2.0],
        )
        expected = np.log(np.sqrt(2 * np.pi))
        assert abs(result.value - expected) / abs(expected) < 1e-12

        result = laplace_logdensity(
            lambda u: -((u[0] - 3.0) ** 2) / 8.0,
            lambda u: np.array([-(u[0] - 3.0) / 4.0]),
            lambda u: np.array([[-0.25]]),
            x0=[0.0],
        )
        expected = np.log(np.sqrt(8 * np.pi))
        assert abs(result.value - expected) / abs(expected) < 1e-12

        quartic = laplace_logdensity(
            lambda u: -0.5 * u[0] ** 2 - 0.01 * u[0] ** 4,
            lambda u: np.array([-u[0] - 0.04 * u[0] ** 3]),
            lambda u: np.array([[-1.0 - 0.12 * u[0] ** 2]]),
            x0=[0.5],
        )
        oracle, _ = integrate.quad(
            lambda x: np.exp(-0.5 * x**2 - 0.01 * x**4), -np.inf, np.inf
        )
        assert abs(np.exp(quartic.value) - oracle) / oracle < 0.01

    report(6, "Laplace exactness and quartic tilt", body)


# -- 7: mixed-model recovery -----------------------------------------------------

def test_criterion_07_mixed_recovery():
    def body():
        start = time.time()
        scheme = StageScheme("k3", ("S2", "S3"))
        hits = 0
        n_replicates = 30
        for rep in range(n_replicates):
            config = SimConfig(
                scheme=scheme, thresholds=(1.0, -1.0),
                slopes={"calendar": 1.0, "thermal": 0.5},
                link="probit", family="bcm", setting="thermal",
                n_trials=100, n_seasons=100, n_obs_days=12,
                seed=7000 + rep, sd_intercepts=0.3,
                plant_persistence=False,
            )
            sim = simulate(config)
            model = MixedCumulativeLinkModel(
                link="probit", family="bcm", setting="thermal", n_trials=100,
                seasonal_intercepts=True, stage_slopes=(), compute_se=False,
            ).fit(sim.table)
            sds = np.array(list(model.sd_intercepts_.values()))
            hits += bool(np.all((sds >= 0.2) & (sds <= 0.4)))
            # the random-effects fit can only improve the training error
            from cropprogress.mixed import _within_sample_rmse

            fixed = CumulativeLinkModel(
                link="probit", family="bcm", setting="thermal", n_trials=100
            ).fit(sim.table)
            fixed_rmse = _within_sample_rmse(
                sim.table, fixed.fitted_values(sim.table)
            )
            assert model.rmse_within_ <= fixed_rmse + 1e-10
        assert hits >= 0.9 * n_replicates, f"{hits}/{n_replicates} hits"

        degenerate = SimConfig(
            scheme=scheme, thresholds=(1.0, -1.0),
            slopes={"calendar": 1.0, "thermal": 0.5},
            link="probit", family="bcm", setting="thermal",
            n_trials=100, n_seasons=60, n_obs_days=12,
            seed=7777, sd_intercepts=0.0, plant_persistence=False,
        )
        sim = simulate(degenerate)
        model = MixedCumulativeLinkModel(
            link="probit", family="bcm", setting="thermal", n_trials=100,
            seasonal_intercepts=True, stage_slopes=(), compute_se=False,
        ).fit(sim.table)
        assert max(model.sd_intercepts_.values(), default=0.0) < 0.05
        elapsed = time.time() - start
        assert elapsed < 600.0, f"runtime {elapsed:.0f}s"

    report(7, "mixed-model variance recovery", body)


# -- 8: GDD properties ------------------------------------------------------------

def test_criterion_08_gdd():
    def body():
        corn = CardinalTemperatures(8.0, 30.0, 36.0)
        assert gdd(30.0, 30.0, corn) == 1.0
        assert gdd(-5.0, 2.0, corn) == 0.0
        assert gdd(50.0, 60.0, corn) == 0.0
        assert abs(gdd(20.0, 40.0, corn) - 10.0 / 11.0) < 1e-12
        constant25 = gdd(25.0, 25.0, corn)
        assert abs(constant25 - 17.0 / 22.0) < 1e-12
        assert abs(constant25 - 0.75) < 0.03  # quoted approximate rate

    report(8, "growing-degree-day arithmetic", body)


# -- 9: Whittaker smoother ---------------------------------------------------------

def test_criterion_09_whittaker():
    def body():
        y = np.array([0.3, 0.9, 0.1, 0.7, 0.5])
        assert np.array_equal(whittaker_smooth(y, 0.0), y)

        out = whittaker_smooth(np.array([0.0, 1.0, 0.0, 1.0]), 1e8)
        assert np.max(np.abs(out - 0.5)) < 1e-4

        gap = np.array([1.0, np.nan, 3.0, np.nan, 2.0, 4.0])
        out = whittaker_smooth(gap, 2.5)
        w = np.diag(np.isfinite(gap).astype(float))
        d = np.diff(np.eye(gap.size), axis=0)
        dense = np.linalg.solve(w + 2.5 * d.T @ d, w @ np.nan_to_num(gap))
        assert np.max(np.abs(out - dense) / np.abs(dense)) < 1e-12

    report(9, "Whittaker smoother vs dense solve", body)


# -- 10: CV determinism and combinatorics --------------------------------------------

def test_criterion_10_cv():
    def body():
        scheme = StageScheme("cv", ("S2", "S3"))
        config = SimConfig(
            scheme=scheme, thresholds=(1.0, -1.0),
            slopes={"calendar": 1.0, "thermal": 0.5},
            link="probit", family="bcm", setting="thermal",
            n_trials=100, n_seasons=4, n_obs_days=10, seed=10,
        )
        sim = simulate(config)
        estimator = CumulativeLinkModel(
            link="probit", family="bcm", setting="thermal", n_trials=100
        )
        report_a = monte_carlo_cv(sim.table, estimator, CvPlan(seed=0))
        assert report_a.exhaustive and report_a.n_replicates == 4
        assert report_a.train_size == 3 and report_a.test_size == 1
        report_b = monte_carlo_cv(sim.table, estimator, CvPlan(seed=0))
        assert np.array_equal(report_a.pooled, report_b.pooled)
        assert report_a.average == report_b.average

        # constructed constant-offset case: r_j = delta * sqrt(K - 1)
        delta = 0.07
        seasons = np.repeat([1, 2, 3], 4)
        days = np.tile([10, 17, 24, 31], 3)
        y = np.column_stack([np.ones(12), np.full(12, 0.6), np.full(12, 0.4)])
        observed = ProgressPanel(scheme, seasons, days, y, monotone_time=False)
        predicted = PredictedProgress(
            scheme.stages, seasons, days,
            np.column_stack(
                [np.ones(12), np.full(12, 0.6 - delta), np.full(12, 0.4 + delta)]
            ),
        )
        series = rmspe(observed, predicted)
        assert np.max(np.abs(series.pooled - delta * np.sqrt(2.0))) < 1e-10

    report(10, "cross-validation determinism and combinatorics", body)


# -- 11: model-selection sanity ---------------------------------------------------------

def test_criterion_11_selection_grid():
    def body():
        scheme = StageScheme("sel", ("S2", "S3"))
        wins = 0
        n_meta = 20
        for meta in range(n_meta):
            config = SimConfig(
                scheme=scheme, thresholds=(1.2, -1.2),
                nominal_slopes={"calendar": (2.2, 0.8)}, slopes={},
                link="cauchit", family="mb", setting="calendar",
                n_trials=400, n_seasons=8, n_obs_days=14,
                seed=1100 + meta, plant_persistence=False,
            )
            sim = simulate(config)
            cells = selection_grid(
                sim.table, "mb", "calendar",
                CvPlan(n_replicates=500, seed=meta), n_trials=400,
            )
            best = cells[0]
            wins += best.link == "cauchit" and best.nominal == ("calendar",)
        assert wins >= 0.8 * n_meta, f"{wins}/{n_meta} selections"

    report(11, "true structure attains minimal CV error", body)


# -- 12: agronomy round trip ----------------------------------------------------------

def test_criterion_12_agronomy():
    def body():
        stages = ("Planted", "Emerged", "Silking", "Dough", "Dented",
                  "Mature", "Harvested")
        thresholds = (9.728, -1.387, -7.282, -10.095, -11.366, -13.250, -13.807)
        model = CumulativeLinkModel(link="probit", family="bcm", setting="thermal")
        scheme = StageScheme("corn", stages)
        model.scheme_ = scheme
        model.structure_ = MeanStructure(scheme, ("calendar", "thermal"), ())
        model.params_ = np.asarray([*thresholds, 5.400, 1.357])
        model.param_names_ = model.structure_.param_names()
        model.standardization_ = StandardizationParams(
            {"calendar": 0.0, "thermal": 0.0},
            {"calendar": 1.0, "thermal": 1.0},
        )
        reqs = cp.requirements(model)
        assert reqs[0].magnitude == pytest.approx(11.115, abs=1e-9)
        # telescoping is exact in real arithmetic; float summation of the
        # individual differences rounds in the last bits
        assert sum(r.delta for r in reqs) == pytest.approx(
            thresholds[-1] - thresholds[0], abs=1e-12
        )
        days = cp.transition_time(model, "Emerged", gdd_rate=0.75)
        rate = cp.required_gdd_rate(model, "Emerged", days)
        assert abs(rate - 0.75) < 1e-10

    report(12, "agronomy round trip and threshold arithmetic", body)
