"""Fixed-effects cumulative link model fitting and inference.

Fitting maximizes the pooled log-likelihood by Newton steps preconditioned
with the empirical outer-product information (Fisher scoring for these
families), with step-halving whenever a step fails to improve the
objective.  Purely ordinal models optimize thresholds through a monotone
reparameterization so the reported thresholds always decrease across
stages; estimates are reported on the natural scale.  Uncertainty comes
from the season-clustered sandwich covariance, with the model-based inverse
information alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import ndtr
from sklearn.base import BaseEstimator

from ._validation import freeze_array
from .dataset import StageScheme
from .exceptions import DataError, FitError
from .features import (
    StandardizationParams,
    apply_standardization,
    setting_covariates,
    standardize,
)
from .likelihood import (
    GRID_TOL,
    MeanStructure,
    PartialLikelihood,
    check_family,
    cum_means,
)
from .links import get_link

MODEL_FORMAT_VERSION = 1

#: Standardized-scale magnitude beyond which a parameter is treated as
#: diverging (complete separation).
SEPARATION_BOUND = 1e3

#: Gap floor (log scale) for the monotone threshold reparameterization.
MIN_LOG_GAP = -35.0


class OrdinalThresholdTransform:
    """Monotone reparameterization enforcing decreasing thresholds.

    The optimizer works on ``(t_2, g_3, ..., g_K, beta)`` where
    ``t_k = t_2 - sum_{l<=k} exp(g_l)``, so any real vector maps to a
    strictly decreasing threshold sequence.  Slopes pass through unchanged.
    """

    def __init__(self, n_thresholds, n_params):
        self.m = n_thresholds
        self.q = n_params

    def to_opt(self, theta):
        out = np.array(theta, dtype=float)
        gaps = theta[: self.m - 1] - theta[1 : self.m]
        out[1 : self.m] = np.log(np.maximum(gaps, np.exp(MIN_LOG_GAP)))
        return out

    def to_model(self, opt):
        out = np.array(opt, dtype=float)
        g = np.clip(opt[1 : self.m], MIN_LOG_GAP, None)
        out[1 : self.m] = opt[0] - np.cumsum(np.exp(g))
        return out

    def jacobian(self, opt):
        """d(theta_model)/d(theta_opt) at the given optimizer point."""
        J = np.eye(self.q)
        g = np.clip(opt[1 : self.m], MIN_LOG_GAP, None)
        e = np.exp(g)
        for k in range(1, self.m):
            J[k, 0] = 1.0
            J[k, 1 : k + 1] = -e[:k]
        return J


class IdentityTransform:
    def __init__(self, n_params):
        self.q = n_params

    def to_opt(self, theta):
        return np.array(theta, dtype=float)

    def to_model(self, opt):
        return np.array(opt, dtype=float)

    def jacobian(self, opt):
        return np.eye(self.q)


def _solve_spd(A, b):
    c, low = linalg.cho_factor(A, check_finite=False)
    return linalg.cho_solve((c, low), b, check_finite=False)


def _fd_neg_hessian(problem, transform, opt, h=1e-6):
    """Observed information by central differences of the analytic score."""
    q = opt.size

    def score_opt(x):
        theta = transform.to_model(x)
        return transform.jacobian(x).T @ problem.score(theta)

    H = np.empty((q, q))
    for j in range(q):
        step = np.zeros(q)
        step[j] = h
        H[:, j] = (score_opt(opt + step) - score_opt(opt - step)) / (2 * h)
    return -0.5 * (H + H.T)


def maximize_partial_likelihood(problem, theta0, tol=1e-8, max_iter=200, max_halvings=30):
    """Newton/Fisher-scoring ascent of the pooled log-likelihood.

    Returns a dict with the estimate (natural scale), final log-likelihood,
    gradient norm, iteration count, and diagnostics.  Raises FitError on
    non-convergence or divergence, carrying the best parameters seen.
    """
    structure = problem.structure
    if structure.is_purely_ordinal and structure.n_thresholds > 1:
        transform = OrdinalThresholdTransform(structure.n_thresholds, structure.n_params)
    else:
        transform = IdentityTransform(structure.n_params)

    opt = transform.to_opt(np.asarray(theta0, dtype=float))
    theta = transform.to_model(opt)
    ll = problem.loglik(theta)
    if not np.isfinite(ll):
        raise FitError("log-likelihood is not finite at the starting value", best_params=theta)
    trace = []
    regularized = False
    halvings_used = 0
    use_observed = False

    for iteration in range(max_iter + 1):
        score = problem.score(theta)
        grad_norm = float(np.linalg.norm(score))
        trace.append((iteration, ll, grad_norm))
        if grad_norm < tol * (1.0 + abs(ll)):
            return {
                "theta": theta,
                "loglik": ll,
                "grad_norm": grad_norm,
                "iterations": iteration,
                "trace": trace,
                "regularized": regularized,
                "halvings": halvings_used,
            }
        if np.max(np.abs(theta)) > SEPARATION_BOUND:
            raise FitError(
                "parameter magnitude exceeded 1e3 on the standardized scale; "
                "this indicates complete separation in the data",
                best_params=theta,
                trace=trace,
            )
        if iteration == max_iter:
            break
        # the outer-product information can badly misjudge curvature away
        # from the optimum; switch to the observed Hessian when ten
        # iterations fail to halve the gradient norm
        if (
            not use_observed
            and iteration >= 20
            and iteration % 10 == 0
            and grad_norm > 0.5 * trace[iteration - 10][2]
        ):
            use_observed = True

        J = transform.jacobian(opt)
        g = J.T @ score
        direction = None
        if not use_observed:
            S = problem.obs_scores(theta) @ J  # chain rule to the optimizer scale
            A = S.T @ S
            try:
                direction = _solve_spd(A, g)
            except linalg.LinAlgError:
                try:
                    direction = _solve_spd(A + 1e-10 * np.eye(A.shape[0]), g)
                    regularized = True
                except linalg.LinAlgError:
                    direction = None
        if direction is None:
            H = _fd_neg_hessian(problem, transform, opt)
            try:
                direction = _solve_spd(H, g)
            except linalg.LinAlgError:
                # indefinite observed Hessian (heavy-tail links away from
                # the optimum): retreat to the always-SPD outer product,
                # then to a bounded gradient step
                regularized = True
                S = problem.obs_scores(theta) @ J
                A = S.T @ S
                try:
                    direction = _solve_spd(A + 1e-10 * np.eye(A.shape[0]), g)
                except linalg.LinAlgError:
                    direction = g / max(1.0, float(np.linalg.norm(g)))

        step = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = opt + step * direction
            cand_theta = transform.to_model(cand)
            cand_ll = problem.loglik(cand_theta)
            if np.isfinite(cand_ll) and cand_ll > ll:
                opt, theta, ll = cand, cand_theta, cand_ll
                accepted = True
                break
            step *= 0.5
            halvings_used += 1
        if not accepted:
            # no ascent direction left; treat as converged only if the
            # gradient criterion is already nearly met
            if grad_norm < np.sqrt(tol) * (1.0 + abs(ll)):
                return {
                    "theta": theta,
                    "loglik": ll,
                    "grad_norm": grad_norm,
                    "iterations": iteration,
                    "trace": trace,
                    "regularized": regularized,
                    "halvings": halvings_used,
                }
            raise FitError(
                f"step-halving failed to improve the log-likelihood "
                f"(gradient norm {grad_norm:.3g})",
                best_params=theta,
                trace=trace,
            )

    raise FitError(
        f"no convergence in {max_iter} iterations "
        f"(last gradient norm {trace[-1][2]:.3g})",
        best_params=theta,
        trace=trace,
    )


def sandwich_covariance(problem, theta):
    """Season-clustered sandwich and model-based covariance at the estimate.

    The bread inverts the summed outer-product information; the meat sums
    season-level score outer products.  With one observation per season the
    information matrix equality makes the two returned matrices equal.
    """
    A, B = problem.information(theta)
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise FitError(
            "information matrix is singular; the model is too rich for the "
            "data (consider fewer nominal effects or covariates)"
        ) from None
    sandwich = A_inv @ B @ A_inv
    sandwich = 0.5 * (sandwich + sandwich.T)
    A_inv = 0.5 * (A_inv + A_inv.T)
    return sandwich, A_inv


def wald_table(names, estimates, ses):
    """Wald z rows with two-sided normal p-values and significance marks."""
    rows = []
    for name, est, se in zip(names, estimates, ses):
        z = est / se if se > 0 else np.inf * np.sign(est)
        p = 2.0 * (1.0 - ndtr(abs(z)))
        marker = "*" if p < 0.001 else ("." if p < 0.05 else "")
        rows.append(
            {"name": name, "estimate": float(est), "se": float(se),
             "z": float(z), "p": float(p), "marker": marker}
        )
    return rows


@dataclass(frozen=True)
class PredictedProgress:
    """Predicted cumulative means per (season, day); first column is 1."""

    stages: tuple
    seasons: np.ndarray
    days: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "seasons", freeze_array(np.asarray(self.seasons, dtype=int)))
        object.__setattr__(self, "days", freeze_array(np.asarray(self.days, dtype=int)))
        object.__setattr__(self, "values", freeze_array(np.asarray(self.values, dtype=float)))

    def __len__(self):
        return self.seasons.size


class CumulativeLinkModel(BaseEstimator):
    """Fixed-effects cumulative link model for crop progress panels.

    Parameters
    ----------
    link : {"logit", "probit", "cauchit"}
        Inverse link choice.
    family : {"bcm", "mb"}
        Likelihood family: backward cumulative multinomial or multivariate
        binomial.
    setting : {"calendar", "thermal", "greenup", "combined"}
        Which covariates enter the linear predictor.
    nominal : tuple of str
        Covariates receiving one coefficient per stage instead of a shared
        slope.  The thresholds themselves are always per stage.
    n_trials : int
        Trial count behind each observed proportion.  Survey percentages
        carry no explicit count, so this acts as a likelihood weight
        (default 100, percent resolution); Wald inference should be read
        accordingly.
    tol, max_iter : float, int
        Convergence tolerance (relative gradient norm) and iteration cap.

    After fitting, estimates live in ``params_`` (decreasing thresholds
    first), with the clustered sandwich covariance in ``cov_`` and the
    model-based one in ``cov_model_``.
    """

    def __init__(self, link="logit", family="bcm", setting="calendar",
                 nominal=(), n_trials=100, tol=1e-8, max_iter=200):
        self.link = link
        self.family = family
        self.setting = setting
        self.nominal = nominal
        self.n_trials = n_trials
        self.tol = tol
        self.max_iter = max_iter

    # -- fitting -----------------------------------------------------------

    def _build_problem(self, table, std_params):
        structure = MeanStructure(
            table.scheme, setting_covariates(self.setting), tuple(self.nominal)
        )
        W, Z = structure.design(table, std_params)
        Y = self._grid_round(table.y)
        return PartialLikelihood(
            structure, self.link, self.family, self.n_trials, W, Z, Y, table.seasons
        )

    def _grid_round(self, y):
        scaled = np.asarray(y, dtype=float) * self.n_trials
        rounded = np.rint(scaled)
        worst = float(np.max(np.abs(scaled - rounded), initial=0.0))
        if worst > GRID_TOL:
            import warnings

            warnings.warn(
                f"proportions adjusted to the nearest 1/{self.n_trials} grid "
                f"(largest adjustment {worst / self.n_trials:.3g})",
                stacklevel=3,
            )
        return rounded / self.n_trials

    def fit(self, table):
        """Fit on a modeling table; standardization runs over its rows."""
        get_link(self.link)
        check_family(self.family)
        if len(table) == 0:
            raise DataError("cannot fit on an empty modeling table")
        if table.season_values.size < 2:
            raise DataError("need at least 2 seasons to fit")
        covs = setting_covariates(self.setting)
        for cov in covs:
            table.covariate(cov)

        frame_like = _TableColumns(table)
        _, std_params = standardize(frame_like, covs)
        self.standardization_ = std_params
        problem = self._build_problem(table, std_params)
        theta0 = problem.intercept_start()
        result = maximize_partial_likelihood(
            problem, theta0, tol=self.tol, max_iter=self.max_iter
        )
        theta = result["theta"]
        if problem.clamp_stats.total and problem.clamp_stats.fraction > 0.01:
            raise FitError(
                f"{problem.clamp_stats.fraction:.1%} of bcm category "
                "probabilities were clamped from negative values; the mean "
                "structure crosses too often under nominal effects -- use "
                "the mb family",
                best_params=theta,
            )

        self.scheme_ = table.scheme
        self.structure_ = problem.structure
        self.params_ = theta
        self.param_names_ = problem.structure.param_names()
        self.loglik_ = result["loglik"]
        self.n_iter_ = result["iterations"]
        self.grad_norm_ = result["grad_norm"]
        self.converged_ = True
        self.n_seasons_ = int(table.season_values.size)
        self.clamp_fraction_ = problem.clamp_stats.fraction
        self.trace_ = result["trace"]
        self.hessian_regularized_ = result["regularized"]
        cov, cov_model = sandwich_covariance(problem, theta)
        self.cov_ = cov
        self.cov_model_ = cov_model
        self.se_ = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        self.wald_ = wald_table(self.param_names_, theta, self.se_)
        return self

    # -- introspection ------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise FitError("model is not fitted")

    @property
    def thresholds_(self):
        """Per-stage threshold estimates, in stage order."""
        self._check_fitted()
        return self.structure_.thresholds(self.params_)

    @property
    def ordinal_slopes_(self):
        """Shared-slope estimates keyed by covariate name."""
        self._check_fitted()
        _, beta = self.structure_.split(self.params_)
        return dict(zip(self.structure_.ordinal, beta.tolist()))

    # -- prediction ---------------------------------------------------------

    def predict(self, features, seasons=None, days=None):
        """Predict cumulative means for feature rows.

        ``seasons``/``days`` filter the frame; a requested value with no
        feature coverage is rejected with the missing keys listed.
        """
        self._check_fitted()
        frame = apply_standardization(features, self.standardization_)
        mask = np.ones(len(frame), dtype=bool)
        if seasons is not None:
            wanted = {int(s) for s in np.atleast_1d(seasons)}
            missing = wanted - {int(s) for s in np.unique(frame.seasons)}
            if missing:
                raise DataError(f"no feature rows for seasons: {sorted(missing)}")
            mask &= np.isin(frame.seasons, sorted(wanted))
        if days is not None:
            wanted_days = {int(d) for d in np.atleast_1d(days)}
            have = {int(d) for d in np.unique(frame.days[mask])}
            missing = wanted_days - have
            if missing:
                raise DataError(f"no feature rows for days: {sorted(missing)}")
            mask &= np.isin(frame.days, sorted(wanted_days))
        sub = frame.select(mask)
        W, Z = self.structure_.design(sub, self.standardization_)
        values = cum_means(self.structure_, self.link, W, Z, self.params_)
        return PredictedProgress(self.scheme_.stages, sub.seasons, sub.days, values)

    def fitted_values(self, table):
        """Cumulative means at the table's rows (the training fit path)."""
        self._check_fitted()
        W, Z = self.structure_.design(table, self.standardization_)
        return cum_means(self.structure_, self.link, W, Z, self.params_)

    # -- serialization ------------------------------------------------------

    def to_dict(self, config=None):
        from . import __version__

        self._check_fitted()
        payload = {
            "format_version": MODEL_FORMAT_VERSION,
            "tool": {"name": "cropprogress", "version": __version__},
            "kind": "clm",
            "spec": {
                "link": self.link,
                "family": self.family,
                "setting": self.setting,
                "nominal": list(self.nominal),
                "n_trials": int(self.n_trials),
            },
            "scheme": {"crop": self.scheme_.crop, "stages": list(self.scheme_.stages)},
            "params": [[n, float(v)] for n, v in zip(self.param_names_, self.params_)],
            "covariance": {
                "sandwich": self.cov_.tolist(),
                "model_based": self.cov_model_.tolist(),
            },
            "standardization": self.standardization_.to_dict(),
            "wald": self.wald_,
            "convergence": {
                "iterations": int(self.n_iter_),
                "gradient_norm": float(self.grad_norm_),
                "loglik": float(self.loglik_),
                "hessian_regularized": bool(self.hessian_regularized_),
            },
            "diagnostics": {"bcm_clamp_fraction": float(self.clamp_fraction_)},
            "n_seasons": self.n_seasons_,
        }
        if config is not None:
            payload["config"] = config
        return payload

    def save(self, path, config=None):
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(config), handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def from_dict(cls, payload):
        spec = payload["spec"]
        model = cls(
            link=spec["link"],
            family=spec["family"],
            setting=spec["setting"],
            nominal=tuple(spec["nominal"]),
            n_trials=spec["n_trials"],
        )
        scheme = StageScheme(payload["scheme"]["crop"], tuple(payload["scheme"]["stages"]))
        model.scheme_ = scheme
        model.structure_ = MeanStructure(
            scheme, setting_covariates(spec["setting"]), tuple(spec["nominal"])
        )
        model.params_ = np.asarray([v for _, v in payload["params"]], dtype=float)
        model.param_names_ = [n for n, _ in payload["params"]]
        model.cov_ = np.asarray(payload["covariance"]["sandwich"], dtype=float)
        model.cov_model_ = np.asarray(payload["covariance"]["model_based"], dtype=float)
        model.se_ = np.sqrt(np.clip(np.diag(model.cov_), 0.0, None))
        model.standardization_ = StandardizationParams.from_dict(payload["standardization"])
        model.wald_ = payload["wald"]
        conv = payload["convergence"]
        model.loglik_ = conv["loglik"]
        model.n_iter_ = conv["iterations"]
        model.grad_norm_ = conv["gradient_norm"]
        model.hessian_regularized_ = conv["hessian_regularized"]
        model.clamp_fraction_ = payload["diagnostics"]["bcm_clamp_fraction"]
        model.n_seasons_ = payload.get("n_seasons")
        model.converged_ = True
        return model


class _TableColumns:
    """Adapter letting ``standardize`` run over a modeling table."""

    def __init__(self, table):
        self._table = table

    def column(self, name):
        return self._table.covariate(name)

    def with_columns(self, extra):
        return self  # standardized columns are consumed via the params only

    def __len__(self):
        return len(self._table)


def load_model(path):
    """Load a fitted model artifact (fixed or mixed) from JSON."""
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    version = payload.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise DataError(
            f"unsupported model artifact version {version!r} "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    kind = payload.get("kind")
    if kind == "clm":
        return CumulativeLinkModel.from_dict(payload)
    if kind == "clmm":
        from .mixed import MixedCumulativeLinkModel

        return MixedCumulativeLinkModel.from_dict(payload)
    raise DataError(f"unknown model kind {kind!r} in artifact")
