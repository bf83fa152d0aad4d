import numpy as np
import pytest
from scipy import integrate

from cropprogress.estimation import CumulativeLinkModel, _TableColumns
from cropprogress.exceptions import DataError, FitError
from cropprogress.features import setting_covariates, standardize
from cropprogress.likelihood import MeanStructure, PartialLikelihood
from cropprogress.mixed import (
    MixedCumulativeLinkModel,
    _LaplaceObjective,
    laplace_logdensity,
)
from cropprogress.simulate import SimConfig, simulate


class TestLaplaceApproximation:
    def test_standard_gaussian_exact(self):
        result = laplace_logdensity(
            lambda u: -0.5 * u @ u,
            lambda u: -u,
            lambda u: -np.eye(u.size),
            x0=[1.7],
        )
        assert result.value == pytest.approx(np.log(np.sqrt(2 * np.pi)), abs=1e-12)

    def test_shifted_scaled_gaussian_exact(self):
        result = laplace_logdensity(
            lambda u: -((u[0] - 3.0) ** 2) / 8.0,
            lambda u: np.array([-(u[0] - 3.0) / 4.0]),
            lambda u: np.array([[-0.25]]),
            x0=[0.0],
        )
        assert result.value == pytest.approx(np.log(np.sqrt(8 * np.pi)), abs=1e-12)
        assert result.mode[0] == pytest.approx(3.0, abs=1e-9)

    def test_quartic_tilt_within_one_percent_of_quadrature(self):
        def logf(u):
            return -0.5 * u[0] ** 2 - 0.01 * u[0] ** 4

        def grad(u):
            return np.array([-u[0] - 0.04 * u[0] ** 3])

        def hess(u):
            return np.array([[-1.0 - 0.12 * u[0] ** 2]])

        result = laplace_logdensity(logf, grad, hess, x0=[0.5])
        oracle, _ = integrate.quad(
            lambda x: np.exp(-0.5 * x**2 - 0.01 * x**4), -np.inf, np.inf
        )
        # the bare second-order formula misses this integrand by 2.66%;
        # the one-dimensional tilt correction recovers it
        rel = abs(np.exp(result.value) - oracle) / oracle
        assert rel < 0.01
        assert result.mode[0] == pytest.approx(0.0, abs=1e-9)

    def test_start_point_invariance_on_concave_problem(self):
        def logf(u):
            return -0.5 * (u[0] - 1.0) ** 2 - 0.3 * np.cosh(u[0] - 1.0)

        def grad(u):
            return np.array([-(u[0] - 1.0) - 0.3 * np.sinh(u[0] - 1.0)])

        def hess(u):
            return np.array([[-1.0 - 0.3 * np.cosh(u[0] - 1.0)]])

        a = laplace_logdensity(logf, grad, hess, x0=[-7.0])
        b = laplace_logdensity(logf, grad, hess, x0=[6.0])
        assert abs(a.value - b.value) < 1e-10

    def test_indefinite_hessian_rejected(self):
        with pytest.raises(FitError, match="negative definite"):
            laplace_logdensity(
                lambda u: float(u[0] * 0.0),
                lambda u: np.zeros(1),
                lambda u: np.zeros((1, 1)),
                x0=[0.0],
            )

    def test_multivariate_gaussian_exact(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(3, 3))
        precision = m @ m.T + np.eye(3)
        mean = rng.normal(size=3)

        result = laplace_logdensity(
            lambda u: -0.5 * (u - mean) @ precision @ (u - mean),
            lambda u: -precision @ (u - mean),
            lambda u: -precision,
            x0=np.zeros(3),
        )
        expected = 0.5 * (3 * np.log(2 * np.pi) - np.linalg.slogdet(precision)[1])
        assert result.value == pytest.approx(expected, abs=1e-10)


def _objective_for(table, link="probit", family="bcm", with_intercepts=True,
                   slopes=(), n_trials=100):
    covs = setting_covariates("thermal")
    _, std = standardize(_TableColumns(table), covs)
    structure = MeanStructure(table.scheme, covs, ())
    W, Z = structure.design(table, std)
    y = np.rint(np.asarray(table.y) * n_trials) / n_trials
    slope_cols = [std.apply(c, table.covariate(c)) for c in slopes]
    objective = _LaplaceObjective(
        structure, link, family, n_trials, W, Z, y, table.seasons,
        slope_cols, with_intercepts, bool(slopes),
    )
    return objective, structure, std, W, Z, y


class TestMarginalObjective:
    def test_no_random_terms_equals_partial_loglik(self, sim_bcm_probit):
        table = sim_bcm_probit.table
        objective, structure, std, W, Z, y = _objective_for(
            table, with_intercepts=False, slopes=()
        )
        problem = PartialLikelihood(
            structure, "probit", "bcm", 100, W, Z, y, table.seasons
        )
        theta = problem.intercept_start()
        assert objective.value(theta) == problem.loglik(theta)

    def test_tiny_variance_approaches_partial_loglik(self, sim_bcm_probit):
        table = sim_bcm_probit.table
        objective, structure, std, W, Z, y = _objective_for(table)
        problem = PartialLikelihood(
            structure, "probit", "bcm", 100, W, Z, y, table.seasons
        )
        theta = problem.intercept_start()
        fixed = problem.loglik(theta)
        tiny = objective.value(theta, sd_a=np.full(structure.n_thresholds, 1e-6))
        assert tiny == pytest.approx(fixed, abs=1e-3 * abs(fixed) * 1e-2 + 1e-4)

    def test_laplace_value_finite_and_below_fixed_for_moderate_sd(self, sim_bcm_probit):
        table = sim_bcm_probit.table
        objective, structure, std, W, Z, y = _objective_for(table)
        theta = PartialLikelihood(
            structure, "probit", "bcm", 100, W, Z, y, table.seasons
        ).intercept_start()
        value = objective.value(theta, sd_a=np.full(structure.n_thresholds, 0.3))
        assert np.isfinite(value)


@pytest.fixture(scope="module")
def mixed_sim(scheme3):
    config = SimConfig(
        scheme=scheme3,
        thresholds=(1.5, 0.0, -1.5),
        slopes={"calendar": 1.0, "thermal": 0.5},
        link="probit", family="bcm", setting="thermal",
        n_trials=100, n_seasons=40, n_obs_days=12, seed=21,
        sd_intercepts=0.3, plant_persistence=False,
    )
    return simulate(config)


@pytest.fixture(scope="module")
def mixed_fit(mixed_sim):
    model = MixedCumulativeLinkModel(
        link="probit", family="bcm", setting="thermal", n_trials=100,
        seasonal_intercepts=True, stage_slopes=(), compute_se=True,
    )
    return model.fit(mixed_sim.table)


class TestMixedFit:
    def test_recovers_intercept_sd(self, mixed_fit):
        sds = np.array(list(mixed_fit.sd_intercepts_.values()))
        assert np.all(sds > 0.15) and np.all(sds < 0.45)

    def test_fixed_effects_near_truth(self, mixed_sim, mixed_fit):
        truth = np.array([v for _, v in mixed_sim.truth["theta"]])
        assert np.max(np.abs(mixed_fit.params_ - truth)) < 0.3

    def test_objective_is_a_maximum(self, mixed_sim, mixed_fit):
        table = mixed_sim.table
        objective = mixed_fit._make_objective(
            table, mixed_fit.standardization_, True, ()
        )
        sd = np.array(list(mixed_fit.sd_intercepts_.values()))
        best = objective.value(mixed_fit.params_, sd_a=sd)
        for j in range(mixed_fit.params_.size):
            for sign in (-1.0, 1.0):
                theta = mixed_fit.params_.copy()
                theta[j] += sign * 1e-3
                assert objective.value(theta, sd_a=sd) <= best + 1e-6
        for j in range(sd.size):
            for sign in (-1.0, 1.0):
                bumped = sd.copy()
                bumped[j] *= np.exp(sign * 1e-3)
                assert objective.value(mixed_fit.params_, sd_a=bumped) <= best + 1e-6

    def test_mixed_rmse_not_worse_than_fixed(self, mixed_sim, mixed_fit):
        from cropprogress.mixed import _within_sample_rmse

        fixed = CumulativeLinkModel(
            link="probit", family="bcm", setting="thermal", n_trials=100
        ).fit(mixed_sim.table)
        fixed_rmse = _within_sample_rmse(
            mixed_sim.table, fixed.fitted_values(mixed_sim.table)
        )
        assert mixed_fit.rmse_within_ <= fixed_rmse + 1e-10

    def test_wald_and_se_present(self, mixed_fit):
        assert mixed_fit.se_ is not None
        assert np.all(mixed_fit.se_ > 0)
        assert len(mixed_fit.wald_) == mixed_fit.params_.size

    def test_summary_mentions_model_based_se(self, mixed_fit):
        text = mixed_fit.summary()
        assert "model-based" in text
        assert "RMSE" in text

    def test_degenerate_variance_collapses(self, scheme3):
        config = SimConfig(
            scheme=scheme3, thresholds=(1.5, 0.0, -1.5),
            slopes={"calendar": 1.0, "thermal": 0.5},
            link="probit", family="bcm", setting="thermal",
            n_trials=100, n_seasons=30, n_obs_days=10, seed=77,
            sd_intercepts=0.0, plant_persistence=False,
        )
        sim = simulate(config)
        model = MixedCumulativeLinkModel(
            link="probit", family="bcm", setting="thermal", n_trials=100,
            seasonal_intercepts=True, stage_slopes=(), compute_se=False,
        ).fit(sim.table)
        assert max(model.sd_intercepts_.values(), default=0.0) < 0.05

    def test_needs_a_random_term(self, mixed_sim):
        with pytest.raises(DataError, match="random term"):
            MixedCumulativeLinkModel(
                seasonal_intercepts=False, stage_slopes=()
            ).fit(mixed_sim.table)

    def test_needs_three_seasons(self, scheme3, mixed_sim):
        table = mixed_sim.table.subset_seasons(mixed_sim.table.season_values[:2])
        with pytest.raises(DataError, match="3 seasons"):
            MixedCumulativeLinkModel(
                link="probit", family="bcm", setting="thermal"
            ).fit(table)


class TestInterpolation:
    def test_training_days_bit_identical(self, mixed_sim, mixed_fit):
        from cropprogress.features import FeatureFrame

        table = mixed_sim.table
        frame = FeatureFrame(table.seasons, table.days, dict(table.covariates))
        predicted = mixed_fit.interpolate(frame)
        fitted = mixed_fit.fitted_values(table)
        assert np.array_equal(predicted.values, fitted)

    def test_daily_curves_monotone_with_positive_slopes(self, mixed_sim, mixed_fit):
        if any(v <= 0 for v in mixed_fit.ordinal_slopes_.values()):
            pytest.skip("slope sign precondition not met on this draw")
        season = mixed_fit.training_seasons_[0]
        predicted = mixed_fit.interpolate(mixed_sim.frame, seasons=[season])
        for k in range(1, predicted.values.shape[1]):
            assert np.all(np.diff(predicted.values[:, k]) >= -1e-12)

    def test_unknown_season_rejected(self, mixed_sim, mixed_fit):
        with pytest.raises(DataError, match="not seen in training"):
            mixed_fit.interpolate(mixed_sim.frame, seasons=[1900])

    def test_artifact_round_trip(self, tmp_path, mixed_sim, mixed_fit):
        path = tmp_path / "mixed.json"
        mixed_fit.save(path)
        from cropprogress.estimation import load_model

        loaded = load_model(path)
        assert isinstance(loaded, MixedCumulativeLinkModel)
        predicted = loaded.interpolate(mixed_sim.frame)
        original = mixed_fit.interpolate(mixed_sim.frame)
        assert np.array_equal(predicted.values, original.values)
