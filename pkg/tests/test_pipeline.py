"""End-to-end paths not covered by the per-module tests."""

import numpy as np
import pytest

from cropprogress.dataset import ReflectanceSeries, join_panel
from cropprogress.estimation import CumulativeLinkModel
from cropprogress.features import CardinalTemperatures, FeatureFrame, build_features
from cropprogress.mixed import MixedCumulativeLinkModel
from cropprogress.simulate import SimConfig, simulate


@pytest.fixture(scope="module")
def greenup_inputs(sim_bcm_probit):
    """Attach a synthetic vegetation bump to the simulated panel."""
    weather = sim_bcm_probit.weather
    rng = np.random.default_rng(13)
    nir = []
    red = []
    for day in weather.days:
        level = 0.25 + 0.5 / (1.0 + np.exp(-(day - 150) / 15.0))
        nir.append(np.clip(level + rng.normal(0, 0.01), 0.05, 0.95))
        red.append(0.2)
    keep = rng.random(weather.days.size) > 0.3  # cloud gaps
    reflectance = ReflectanceSeries(
        weather.seasons[keep], weather.days[keep],
        np.asarray(red)[keep], np.asarray(nir)[keep],
    )
    frame = build_features(
        weather, CardinalTemperatures(8, 30, 36), reflectance, lam=50.0
    )
    return join_panel(sim_bcm_probit.panel, frame), frame


class TestVegetationSettings:
    def test_greenup_setting_fits_and_predicts(self, greenup_inputs):
        table, frame = greenup_inputs
        model = CumulativeLinkModel(
            link="probit", family="bcm", setting="greenup", n_trials=100
        ).fit(table)
        assert model.converged_
        predicted = model.predict(frame)
        assert np.all((predicted.values >= 0) & (predicted.values <= 1))

    def test_combined_setting_includes_ndvi_slope(self, greenup_inputs):
        table, _ = greenup_inputs
        model = CumulativeLinkModel(
            link="logit", family="mb", setting="combined", n_trials=100
        ).fit(table)
        assert "ndvi" in model.ordinal_slopes_


class TestNominalPrediction:
    def test_nominal_model_predicts_on_training_rows(self, sim_bcm_probit):
        table = sim_bcm_probit.table
        model = CumulativeLinkModel(
            link="probit", family="mb", setting="thermal",
            nominal=("thermal",), n_trials=100,
        ).fit(table)
        frame = FeatureFrame(table.seasons, table.days, dict(table.covariates))
        predicted = model.predict(frame)
        assert np.array_equal(predicted.values, model.fitted_values(table))
        assert len(model.param_names_) == 3 + 3 + 1  # thresholds, per-stage, shared


class TestStageSlopeBorder:
    def test_shared_slopes_fit_and_interpolate(self, scheme3):
        config = SimConfig(
            scheme=scheme3, thresholds=(1.2, 0.0, -1.2),
            slopes={"calendar": 1.0, "thermal": 0.5},
            link="probit", family="mb", setting="thermal",
            n_trials=100, n_seasons=24, n_obs_days=10, seed=33,
            sd_intercepts=0.2, sd_slopes={"calendar": 0.3},
            plant_persistence=False,
        )
        sim = simulate(config)
        model = MixedCumulativeLinkModel(
            link="probit", family="mb", setting="thermal", n_trials=100,
            seasonal_intercepts=True, stage_slopes=("calendar",),
            compute_se=False,
        ).fit(sim.table)
        assert "calendar" in model.random_slopes_
        assert model.random_slopes_["calendar"].shape == (3,)
        season = model.training_seasons_[0]
        daily = model.interpolate(sim.frame, seasons=[season])
        assert len(daily) > 0
        fitted = model.fitted_values(sim.table)
        assert np.all(np.isfinite(fitted))
