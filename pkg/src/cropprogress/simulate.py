"""Synthetic crop-progress panels from the latent development model.

Each simulated plant carries a latent remaining-development error drawn from
the link distribution; a plant has reached stage k once its latent value
falls below that stage's linear predictor.  Errors persist within a season,
so plant trajectories advance through stages the way survey populations do,
while the marginal distribution at any (season, day) is exactly the
cumulative link model.  The conditionally-independent-categories mode draws
one persistent uniform per plant and category instead, so categories are
uncorrelated across plants at every time point.

Season ``year`` draws from the dedicated stream ``(seed, year)``; population
level draws use ``(seed, 0)``.  Same seed, same panel, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dataset import ModelingTable, ProgressPanel, StageScheme, WeatherSeries, join_panel
from .exceptions import DataError
from .features import CardinalTemperatures, build_features, setting_covariates
from .likelihood import MeanStructure, check_family
from .links import get_link


@dataclass
class SimConfig:
    """Ground-truth configuration for a simulated panel.

    ``thresholds`` are the per-stage intercepts (strictly decreasing across
    stages); ``slopes`` the shared ordinal effects and ``nominal_slopes``
    optional per-stage effects, all on the standardized covariate scale
    (standardization is computed over the generated observation rows, the
    same convention the estimators use, so fitted parameters are directly
    comparable to the truth).
    """

    scheme: StageScheme
    thresholds: tuple
    slopes: dict = field(default_factory=dict)
    nominal_slopes: dict = field(default_factory=dict)
    link: str = "probit"
    family: str = "bcm"
    setting: str = "thermal"
    n_trials: int = 100
    n_seasons: int = 20
    n_obs_days: int = 20
    first_season: int = 2001
    obs_start_day: int = 100
    obs_step_days: int = 7
    sd_intercepts: float | tuple = 0.0
    sd_slopes: dict = field(default_factory=dict)
    seed: int = 0
    cardinals: CardinalTemperatures = field(
        default_factory=lambda: CardinalTemperatures(8.0, 30.0, 36.0)
    )
    winter_temp: float = -2.0
    summer_temp: float = 26.0
    warmup_midpoint_day: float = 130.0
    warmup_width_days: float = 25.0
    diurnal_spread: float = 6.0
    temp_noise_sd: float = 1.5
    keep_indicators: bool = False
    #: Persistent latents give each plant one error per season, so stage
    #: trajectories advance like real survey populations (loadable CSVs,
    #: intra-season dependence for the clustered covariance to absorb).
    #: With persistence off, every (season, day) redraws all plants:
    #: observations are conditionally independent given the random effects,
    #: the exact sampling model behind the mixed-effects likelihood.
    plant_persistence: bool = True

    def __post_init__(self):
        check_family(self.family)
        get_link(self.link)
        covs = setting_covariates(self.setting)
        unsupported = set(covs) - {"calendar", "thermal"}
        if unsupported:
            raise DataError(
                "the synthetic covariate generator produces calendar and "
                f"thermal time only; setting {self.setting!r} needs {sorted(unsupported)}"
            )
        thresholds = np.asarray(self.thresholds, dtype=float)
        if thresholds.size != self.scheme.n_categories - 1:
            raise DataError(
                f"need {self.scheme.n_categories - 1} thresholds, got {thresholds.size}"
            )
        if np.any(np.diff(thresholds) >= 0):
            raise DataError("thresholds must be strictly decreasing across stages")
        unknown = (set(self.slopes) | set(self.nominal_slopes)) - set(covs)
        if unknown:
            raise DataError(f"slopes for covariates outside the setting: {sorted(unknown)}")
        if set(self.slopes) & set(self.nominal_slopes):
            raise DataError("a covariate cannot be both ordinal and nominal")
        unknown_sd = set(self.sd_slopes) - set(covs)
        if unknown_sd:
            raise DataError(f"random slopes for unknown covariates: {sorted(unknown_sd)}")
        if self.n_trials < 1:
            raise DataError("n_trials must be at least 1")
        if self.first_season < 1:
            raise DataError("first_season must be a positive year")


@dataclass
class SimResult:
    panel: ProgressPanel
    frame: object
    weather: WeatherSeries
    table: ModelingTable
    truth: dict
    indicators: dict | None = None


def _season_rng(seed, year):
    return np.random.default_rng([seed, year])


def _synthetic_weather(config):
    """Logistic warm-up temperature curve plus seeded Gaussian noise."""
    n_days = config.obs_start_day + config.obs_step_days * (config.n_obs_days - 1)
    days = np.arange(1, n_days + 1)
    seasons, all_days, tmin, tmax = [], [], [], []
    for i in range(config.n_seasons):
        year = config.first_season + i
        rng = _season_rng(config.seed, year)
        mid = config.winter_temp + (config.summer_temp - config.winter_temp) * expit(
            (days - config.warmup_midpoint_day) / config.warmup_width_days
        )
        noise_lo = rng.normal(0.0, config.temp_noise_sd, size=n_days)
        noise_hi = rng.normal(0.0, config.temp_noise_sd, size=n_days)
        lo = mid - config.diurnal_spread + noise_lo
        hi = mid + config.diurnal_spread + noise_hi
        hi = np.maximum(hi, lo)
        seasons.append(np.full(n_days, year))
        all_days.append(days)
        tmin.append(lo)
        tmax.append(hi)
    return WeatherSeries(
        np.concatenate(seasons), np.concatenate(all_days),
        np.concatenate(tmin), np.concatenate(tmax),
    )


def simulate(config):
    """Generate a progress panel, features, and the ground-truth record.

    The nested-stages family thresholds one persistent latent error per
    plant and season; the independent-categories family uses one persistent
    uniform per plant and category.  Averaging stage vectors over plants
    gives the observed proportions.
    """
    weather = _synthetic_weather(config)
    frame = build_features(weather, config.cardinals)
    obs_days = config.obs_start_day + config.obs_step_days * np.arange(config.n_obs_days)
    obs_mask = np.isin(frame.days, obs_days)
    obs_frame = frame.select(obs_mask)

    covs = setting_covariates(config.setting)
    means = {c: float(np.mean(obs_frame.column(c))) for c in covs}
    # a constant column (single observation day) cannot be standardized;
    # keep it centered with unit scale so zero-slope covariates stay inert
    sds = {
        c: (float(np.std(obs_frame.column(c))) or 1.0) for c in covs
    }
    from .features import StandardizationParams

    std = StandardizationParams(means, sds)

    structure = MeanStructure(config.scheme, covs, tuple(config.nominal_slopes))
    n_stages = structure.n_thresholds
    A = np.zeros((1 + len(structure.nominal), n_stages))
    A[0] = np.asarray(config.thresholds, dtype=float)
    for j, cov in enumerate(structure.nominal, start=1):
        values = np.asarray(config.nominal_slopes[cov], dtype=float)
        if values.size != n_stages:
            raise DataError(f"nominal slopes for {cov!r} need {n_stages} values")
        A[j] = values
    beta = np.asarray([config.slopes.get(c, 0.0) for c in structure.ordinal], dtype=float)
    theta = structure.pack(A, beta)

    sd_a = np.broadcast_to(
        np.asarray(config.sd_intercepts, dtype=float), (n_stages,)
    ).astype(float)
    slope_cov_names = tuple(sorted(config.sd_slopes))
    link = get_link(config.link)

    # population-level stage-slope effects come from the (seed, 0) stream
    rng_global = _season_rng(config.seed, 0)
    b = {
        cov: rng_global.normal(0.0, config.sd_slopes[cov], size=n_stages)
        for cov in slope_cov_names
    }

    seasons_out, days_out, y_out = [], [], []
    indicators = {} if config.keep_indicators else None
    for i in range(config.n_seasons):
        year = config.first_season + i
        # latent draws use the (seed, year, 1) substream; (seed, year) belongs
        # to the weather generator
        rng = np.random.default_rng([config.seed, year, 1])

        season_mask = (obs_frame.seasons == year)
        sub = obs_frame.select(season_mask)
        W = np.ones((len(sub), 1 + len(structure.nominal)))
        for j, cov in enumerate(structure.nominal, start=1):
            W[:, j] = std.apply(cov, sub.column(cov))
        Z = np.column_stack(
            [std.apply(cov, sub.column(cov)) for cov in structure.ordinal]
        ) if structure.ordinal else np.empty((len(sub), 0))
        eta = structure.eta(W, Z, theta)

        a_i = rng.normal(0.0, 1.0, size=n_stages) * sd_a
        eta = eta + a_i
        for cov in slope_cov_names:
            eta = eta + np.outer(std.apply(cov, sub.column(cov)), b[cov])

        mstar_free = link.cdf(eta)
        n_days_obs = eta.shape[0]
        if config.family == "bcm":
            if np.any(np.diff(eta, axis=1) > 0):
                raise DataError(
                    "nested-stage simulation needs non-increasing linear "
                    "predictors across stages at every row; the configured "
                    "effects cross (use the mb family)"
                )
            if config.plant_persistence:
                eps = link.ppf(rng.random(config.n_trials))
                e = eps[None, :, None] <= eta[:, None, :]  # (days, plants, stages)
            else:
                eps = link.ppf(rng.random((n_days_obs, config.n_trials)))
                e = eps[:, :, None] <= eta[:, None, :]
        else:
            if config.plant_persistence:
                u = rng.random((config.n_trials, n_stages))
                e = u[None, :, :] <= mstar_free[:, None, :]
            else:
                u = rng.random((n_days_obs, config.n_trials, n_stages))
                e = u <= mstar_free[:, None, :]
        y_free = e.mean(axis=1)
        if indicators is not None:
            for r, d in enumerate(sub.days):
                indicators[(year, int(d))] = np.column_stack(
                    [np.ones(config.n_trials, dtype=bool), e[r]]
                )
        seasons_out.append(sub.seasons)
        days_out.append(sub.days)
        y_out.append(np.column_stack([np.ones(len(sub)), y_free]))

    panel = ProgressPanel(
        config.scheme,
        np.concatenate(seasons_out),
        np.concatenate(days_out),
        np.vstack(y_out),
        monotone_time=False,
    )
    table = join_panel(panel, frame)
    truth = {
        "theta": [[n, float(v)] for n, v in zip(structure.param_names(), theta)],
        "standardization": std.to_dict(),
        "sd_intercepts": sd_a.tolist(),
        "sd_slopes": {c: float(config.sd_slopes[c]) for c in slope_cov_names},
        "stage_slope_draws": {c: b[c].tolist() for c in slope_cov_names},
        "link": config.link,
        "family": config.family,
        "setting": config.setting,
        "nominal": list(structure.nominal),
        "n_trials": config.n_trials,
        "seed": config.seed,
    }
    return SimResult(panel, frame, weather, table, truth, indicators)
