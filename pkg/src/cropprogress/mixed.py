"""Mixed-effects cumulative link models via Laplace approximation.

Seasonal random intercepts (one per season and stage) capture inter-annual
variability; optional stage-level random slopes let calendar and thermal
time act differently on each stage.  The marginal likelihood integrates the
latent effects out with a Laplace approximation whose inner mode is found by
Newton iterations on a block-sparse Hessian: one small block per season plus
a dense border for the stage slopes shared across seasons, so the cost stays
linear in the number of seasons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator

from .dataset import StageScheme
from .estimation import (
    MODEL_FORMAT_VERSION,
    CumulativeLinkModel,
    OrdinalThresholdTransform,
    PredictedProgress,
    _TableColumns,
    wald_table,
)
from .exceptions import DataError, FitError
from .features import (
    StandardizationParams,
    apply_standardization,
    setting_covariates,
    standardize,
)
from .likelihood import (
    MeanStructure,
    _bcm_eta_weights,
    _mb_eta_weights,
    bcm_log_density,
    check_family,
    mb_log_density,
)
from .links import get_link

LOG_2PI = np.log(2.0 * np.pi)

#: A variance component whose SD collapses below this is dropped and the
#: model refitted without it.
SD_COLLAPSE = 1e-6


@dataclass
class LaplaceResult:
    value: float
    mode: np.ndarray
    log_det: float


def laplace_logdensity(logf, grad, hess, x0, tol=1e-10, max_iter=100, max_halvings=30):
    """Laplace approximation of ``log integral exp(logf(u)) du``.

    The mode is located by Newton iterations with step-halving (gradient
    tolerance ``tol``); the base approximation is
    ``logf(u0) + q/2 * log(2 pi) - 1/2 * log det(-H(u0))``.
    Exact for quadratic ``logf``.  In one dimension the standard
    fourth-order tilt correction (from the third and fourth derivatives at
    the mode, obtained by differencing the supplied Hessian) is added; it
    vanishes identically for quadratics and brings smooth non-Gaussian
    integrands well inside one percent.

    Parameters
    ----------
    logf, grad, hess : callables
        Log-integrand with its analytic gradient and Hessian, taking and
        returning arrays of dimension ``q``.
    x0 : array-like
        Starting point for the inner maximization.

    Raises
    ------
    FitError
        If the mode search fails or the Hessian at the mode is not negative
        definite.
    """
    u = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    value = float(logf(u))
    if not np.isfinite(value):
        raise FitError("log-integrand is not finite at the starting point")
    for _ in range(max_iter):
        g = np.atleast_1d(np.asarray(grad(u), dtype=float))
        if np.max(np.abs(g)) < tol * (1.0 + abs(value)):
            break
        H = np.atleast_2d(np.asarray(hess(u), dtype=float))
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H + 1e-10 * np.eye(u.size), g, rcond=None)[0]
        scale = 1.0
        for _ in range(max_halvings + 1):
            cand = u + scale * step
            cand_value = float(logf(cand))
            if np.isfinite(cand_value) and cand_value >= value:
                u, value = cand, cand_value
                break
            scale *= 0.5
        else:
            raise FitError("inner Newton step-halving failed to make progress")
    else:
        raise FitError(f"inner maximization did not reach tolerance {tol}")

    H = np.atleast_2d(np.asarray(hess(u), dtype=float))
    try:
        chol = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        raise FitError("Hessian is not negative definite at the inner optimum") from None
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    q = u.size
    out = value + 0.5 * q * LOG_2PI - 0.5 * log_det
    if q == 1:
        out += _tilt_correction(hess, u, float(H[0, 0]))
    return LaplaceResult(value=out, mode=u, log_det=log_det)


def _tilt_correction(hess, mode, h2):
    """Fourth-order correction ``log E[exp(a3 X^3 + a4 X^4)]`` for X at the
    mode's Gaussian scale; zero for quadratic integrands."""
    sigma2 = -1.0 / h2
    step = 0.1 * np.sqrt(sigma2)
    up = float(np.atleast_2d(hess(mode + step))[0, 0])
    down = float(np.atleast_2d(hess(mode - step))[0, 0])
    f3 = (up - down) / (2.0 * step)
    f4 = (up - 2.0 * h2 + down) / step**2
    factor = 1.0 + f4 * sigma2**2 / 8.0 + 5.0 * f3**2 * sigma2**3 / 24.0
    if factor <= 0.0 or not np.isfinite(factor):
        return 0.0
    return float(np.log(factor))


class _LaplaceObjective:
    """Laplace-approximated marginal log-likelihood of the mixed model.

    Holds the design and season layout; ``value`` evaluates the marginal
    log-likelihood for given fixed effects and variance-component SDs,
    warm-starting the inner mode between calls.  With all random terms
    absent the value is exactly the pooled fixed-effects log-likelihood.
    """

    def __init__(self, structure, link, family, n_trials, W, Z, Y, seasons,
                 slope_columns, with_intercepts, with_slopes,
                 inner_tol=1e-10, inner_max_iter=200):
        self.structure = structure
        self.link = get_link(link) if isinstance(link, str) else link
        self.family = check_family(family)
        self.n_trials = int(n_trials)
        self.W = np.asarray(W, dtype=float)
        self.Z = np.asarray(Z, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        self.seasons = np.asarray(seasons)
        self.inner_tol = inner_tol
        self.inner_max_iter = inner_max_iter
        self.allow_crossing = False

        # rows arrive sorted by season; record block boundaries
        starts = np.flatnonzero(np.r_[True, self.seasons[1:] != self.seasons[:-1]])
        self.block_starts = starts
        self.block_bounds = np.r_[starts, self.seasons.size]
        self.season_ids = self.seasons[starts]
        self.n_seasons = starts.size
        self.m = structure.n_thresholds

        self.with_intercepts = bool(with_intercepts)
        self.with_slopes = bool(with_slopes) and len(slope_columns) > 0
        self.X_slopes = (
            np.asarray(slope_columns, dtype=float).T
            if self.with_slopes and len(slope_columns)
            else np.empty((self.Y.shape[0], 0))
        )
        self.n_slope_covs = self.X_slopes.shape[1] if self.with_slopes else 0
        self.dim_a = self.n_seasons * self.m if self.with_intercepts else 0
        self.dim_b = self.m * self.n_slope_covs if self.with_slopes else 0
        self._warm = None

    # -- conditional density pieces -----------------------------------------

    def _eta(self, theta, a, b):
        eta = self.structure.eta(self.W, self.Z, theta)
        if self.with_intercepts:
            eta = eta + np.repeat(a, np.diff(self.block_bounds), axis=0)
        if self.with_slopes:
            eta = eta + self.X_slopes @ b.T
        return eta

    def _cond_loglik(self, eta):
        mstar = np.empty((eta.shape[0], self.m + 1))
        mstar[:, 0] = 1.0
        mstar[:, 1:] = self.link.cdf(eta)
        if self.family == "bcm":
            # crossing means are outside this family; returning -inf makes
            # the (convex) valid region a natural barrier for the inner
            # Newton line search
            if np.any(mstar[:, :-1] < mstar[:, 1:]):
                return -np.inf
            contrib = bcm_log_density(self.Y, mstar, self.n_trials, allow_crossing=True)
        else:
            contrib = mb_log_density(self.Y, mstar, self.n_trials)
        return float(np.sum(contrib))

    def _eta_weights(self, eta, order):
        mstar = np.empty((eta.shape[0], self.m + 1))
        mstar[:, 0] = 1.0
        mstar[:, 1:] = self.link.cdf(eta)
        f = self.link.pdf(eta)
        fp = self.link.dpdf(eta) if order == 2 else None
        if self.family == "bcm":
            return _bcm_eta_weights(self.Y, mstar, f, fp, self.n_trials, order,
                                    allow_crossing=True)
        return _mb_eta_weights(self.Y, mstar, f, fp, self.n_trials, order)

    # -- inner problem -------------------------------------------------------

    def _unpack(self, u):
        a = (
            u[: self.dim_a].reshape(self.n_seasons, self.m)
            if self.with_intercepts
            else np.zeros((self.n_seasons, self.m))
        )
        b = (
            u[self.dim_a :].reshape(self.m, self.n_slope_covs)
            if self.with_slopes
            else np.zeros((self.m, 0))
        )
        return a, b

    def _integrand(self, u, theta, var_a, var_b):
        a, b = self._unpack(u)
        value = self._cond_loglik(self._eta(theta, a, b))
        if self.with_intercepts:
            value += float(
                np.sum(-0.5 * a**2 / var_a - 0.5 * np.log(var_a) - 0.5 * LOG_2PI)
            )
        if self.with_slopes:
            value += float(
                np.sum(-0.5 * b**2 / var_b - 0.5 * np.log(var_b) - 0.5 * LOG_2PI)
            )
        return value

    def _blocks(self, u, theta, var_a, var_b):
        """Gradient and negative-Hessian blocks of the integrand at u."""
        a, b = self._unpack(u)
        eta = self._eta(theta, a, b)
        dl, d2 = self._eta_weights(eta, order=2)
        out = {}
        if self.with_intercepts:
            g_a = np.add.reduceat(dl, self.block_starts, axis=0) - a / var_a
            P = -np.add.reduceat(d2, self.block_starts, axis=0)
            P += np.diag(1.0 / var_a)[None, :, :]
            out["g_a"], out["P"] = g_a, P
        if self.with_slopes:
            g_b = dl.T @ self.X_slopes - b / var_b
            R = -np.einsum("rkl,rc,rd->kcld", d2, self.X_slopes, self.X_slopes)
            R = R.reshape(self.dim_b, self.dim_b)
            # b flattens stage-major, covariate fastest; the prior diagonal tiles
            # the per-covariate variances across stages in the same order
            R += np.diag(np.tile(1.0 / var_b, self.m))
            out["g_b"], out["R"] = g_b.ravel(), R
        if self.with_intercepts and self.with_slopes:
            Q = -np.einsum("rkl,rd->rkld", d2, self.X_slopes)
            Q = np.add.reduceat(Q, self.block_starts, axis=0)
            out["Q"] = Q.reshape(self.n_seasons, self.m, self.dim_b)
        return out

    def _newton_step(self, blocks):
        """Solve (-H) step = g with the season-block + border structure."""
        if self.with_intercepts and self.with_slopes:
            P, Q, R = blocks["P"], blocks["Q"], blocks["R"]
            g_a, g_b = blocks["g_a"], blocks["g_b"]
            P_inv_ga = np.linalg.solve(P, g_a[:, :, None])[:, :, 0]
            P_inv_Q = np.linalg.solve(P, Q)
            S = R - np.einsum("ikb,ikc->bc", Q, P_inv_Q)
            rhs = g_b - np.einsum("ikb,ik->b", Q, P_inv_ga)
            d_b = np.linalg.solve(S, rhs)
            d_a = P_inv_ga - P_inv_Q @ d_b
            return np.concatenate([d_a.ravel(), d_b])
        if self.with_intercepts:
            d_a = np.linalg.solve(blocks["P"], blocks["g_a"][:, :, None])[:, :, 0]
            return d_a.ravel()
        d_b = np.linalg.solve(blocks["R"], blocks["g_b"])
        return d_b

    def _grad_vector(self, blocks):
        parts = []
        if self.with_intercepts:
            parts.append(blocks["g_a"].ravel())
        if self.with_slopes:
            parts.append(blocks["g_b"])
        return np.concatenate(parts) if parts else np.empty(0)

    def _log_det(self, blocks):
        """log det of the negative Hessian via the block LDU factorization."""
        log_det = 0.0
        if self.with_intercepts:
            P = blocks["P"]
            try:
                chol = np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                for i in range(self.n_seasons):
                    try:
                        np.linalg.cholesky(P[i])
                    except np.linalg.LinAlgError:
                        raise FitError(
                            "indefinite inner Hessian at the optimum for "
                            f"season {self.season_ids[i]}"
                        ) from None
                raise
            log_det += 2.0 * float(np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2))))
        if self.with_slopes:
            S = blocks["R"]
            if self.with_intercepts:
                P_inv_Q = np.linalg.solve(blocks["P"], blocks["Q"])
                S = S - np.einsum("ikb,ikc->bc", blocks["Q"], P_inv_Q)
            try:
                chol_s = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise FitError(
                    "indefinite inner Hessian at the optimum (stage-slope block)"
                ) from None
            log_det += 2.0 * float(np.sum(np.log(np.diag(chol_s))))
        return log_det

    def value(self, theta, sd_a=None, sd_b=None, return_mode=False):
        """Laplace-approximated marginal log-likelihood.

        ``sd_a`` holds one SD per stage (seasonal intercepts), ``sd_b`` one
        SD per random-slope covariate.  With both terms absent this is the
        pooled fixed-effects log-likelihood exactly.
        """
        if not self.with_intercepts and not self.with_slopes:
            value = self._cond_loglik(self._eta(theta, np.zeros((self.n_seasons, self.m)),
                                                np.zeros((self.m, 0))))
            return (value, np.empty(0)) if return_mode else value
        var_a = np.asarray(sd_a, dtype=float) ** 2 if self.with_intercepts else None
        var_b = np.asarray(sd_b, dtype=float) ** 2 if self.with_slopes else None

        u = self._warm
        if u is None or u.size != self.dim_a + self.dim_b:
            u = np.zeros(self.dim_a + self.dim_b)
        value = self._integrand(u, theta, var_a, var_b)
        if not np.isfinite(value):
            u = np.zeros(self.dim_a + self.dim_b)
            value = self._integrand(u, theta, var_a, var_b)
        # cap Newton steps to the latent scale; an unchecked first step can
        # jump onto a clamping plateau of the bcm density and park there
        cap = 2.0
        if var_a is not None:
            cap = max(cap, 4.0 * float(np.sqrt(np.max(var_a))))
        if var_b is not None and var_b.size:
            cap = max(cap, 4.0 * float(np.sqrt(np.max(var_b))))
        converged = False
        stall = 0
        best_norm = np.inf
        for _ in range(self.inner_max_iter):
            blocks = self._blocks(u, theta, var_a, var_b)
            g = self._grad_vector(blocks)
            grad_norm = np.max(np.abs(g), initial=0.0)
            # gradient components are sums over the panel, so the attainable
            # floor scales with the integrand's magnitude
            tol_eff = self.inner_tol * (1.0 + abs(value))
            if grad_norm < tol_eff:
                converged = True
                break
            if grad_norm >= best_norm * 0.99:
                stall += 1
                if stall >= 5 and grad_norm < 1e-6 * (1.0 + abs(value)):
                    converged = True
                    break
            else:
                stall = 0
            best_norm = min(best_norm, grad_norm)
            try:
                step = self._newton_step(blocks)
            except np.linalg.LinAlgError:
                raise FitError("inner Hessian solve failed; model may be unstable") from None
            step_norm = np.max(np.abs(step), initial=0.0)
            if step_norm > cap:
                step = step * (cap / step_norm)
            scale = 1.0
            accepted = False
            for _ in range(31):
                cand = u + scale * step
                cand_value = self._integrand(cand, theta, var_a, var_b)
                if np.isfinite(cand_value) and cand_value >= value:
                    u, value = cand, cand_value
                    accepted = True
                    break
                scale *= 0.5
            if not accepted:
                if grad_norm < 1e-6 * (1.0 + abs(value)):
                    converged = True
                    break
                raise FitError("inner Newton failed to improve the integrand")
        if not converged:
            raise FitError(
                f"inner mode search did not converge to {self.inner_tol}"
            )
        self._warm = u.copy()
        blocks = self._blocks(u, theta, var_a, var_b)
        log_det = self._log_det(blocks)
        q = self.dim_a + self.dim_b
        out = value + 0.5 * q * LOG_2PI - 0.5 * log_det
        return (out, u) if return_mode else out


def _fd_gradient(fun, x, h=1e-5):
    """Central differences, degrading to one-sided near infeasible points."""

    def safe(z):
        try:
            value = fun(z)
        except FitError:
            return np.nan
        return value

    g = np.empty(x.size)
    f0 = None
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        fp, fm = safe(x + e), safe(x - e)
        if np.isfinite(fp) and np.isfinite(fm):
            g[j] = (fp - fm) / (2.0 * h)
            continue
        if f0 is None:
            f0 = safe(x)
        if np.isfinite(fp) and np.isfinite(f0):
            g[j] = (fp - f0) / h
        elif np.isfinite(fm) and np.isfinite(f0):
            g[j] = (f0 - fm) / h
        else:
            g[j] = 0.0
    return g


def _fd_hessian(fun, x, h=1e-3):
    n = x.size
    H = np.empty((n, n))
    f0 = fun(x)
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = h
        H[j, j] = (fun(x + ej) - 2.0 * f0 + fun(x - ej)) / h**2
        for k in range(j + 1, n):
            ek = np.zeros(n)
            ek[k] = h
            H[j, k] = H[k, j] = (
                fun(x + ej + ek) - fun(x + ej - ek) - fun(x - ej + ek) + fun(x - ej - ek)
            ) / (4.0 * h**2)
    return H


class MixedCumulativeLinkModel(BaseEstimator):
    """Cumulative link model with seasonal and stage-level random effects.

    All covariates enter as fixed ordinal effects; the random structure
    follows the completed-season formulation: one random intercept per
    (season, stage) with a per-stage SD, and optional random slopes per
    stage for selected covariates with a per-covariate SD.

    Parameters
    ----------
    link, family, setting, n_trials
        As in :class:`CumulativeLinkModel`.
    seasonal_intercepts : bool
        Include the per-(season, stage) random intercepts.
    stage_slopes : tuple of str or "auto"
        Covariates with stage-level random slopes.  "auto" selects calendar
        and thermal time when present in the setting.
    compute_se : bool
        Compute Laplace model-based standard errors for the fixed effects
        (finite-difference Hessian of the marginal log-likelihood); they are
        labeled as model-based in the artifact.
    """

    def __init__(self, link="probit", family="bcm", setting="thermal",
                 n_trials=100, seasonal_intercepts=True, stage_slopes="auto",
                 compute_se=True, outer_tol=1e-6, max_outer_iter=300):
        self.link = link
        self.family = family
        self.setting = setting
        self.n_trials = n_trials
        self.seasonal_intercepts = seasonal_intercepts
        self.stage_slopes = stage_slopes
        self.compute_se = compute_se
        self.outer_tol = outer_tol
        self.max_outer_iter = max_outer_iter

    def _resolve_slopes(self):
        covs = setting_covariates(self.setting)
        if self.stage_slopes == "auto":
            return tuple(c for c in ("calendar", "thermal") if c in covs)
        slopes = tuple(self.stage_slopes)
        unknown = set(slopes) - set(covs)
        if unknown:
            raise DataError(
                f"stage slopes for covariates not in setting {self.setting!r}: "
                f"{sorted(unknown)}"
            )
        return slopes

    def fit(self, table):
        """Fit the mixed model on a modeling table."""
        get_link(self.link)
        check_family(self.family)
        covs = setting_covariates(self.setting)
        slopes = self._resolve_slopes()
        if not self.seasonal_intercepts and not slopes:
            raise DataError("a mixed model needs at least one random term")
        if self.seasonal_intercepts and table.season_values.size < 3:
            raise DataError("need at least 3 seasons for seasonal intercepts")

        _, std_params = standardize(_TableColumns(table), covs)
        self.standardization_ = std_params
        self.scheme_ = table.scheme

        # fixed-effects fit provides the starting point
        start_model = CumulativeLinkModel(
            link=self.link, family=self.family, setting=self.setting,
            nominal=(), n_trials=self.n_trials,
        ).fit(table)
        self._fixed_start_ = start_model

        with_intercepts = bool(self.seasonal_intercepts)
        active_slopes = slopes
        dropped = []
        while True:
            result = self._fit_once(table, std_params, with_intercepts, active_slopes,
                                    start_model.params_)
            collapse = []
            if with_intercepts and np.all(result["sd_a"] < SD_COLLAPSE):
                collapse.append("seasonal_intercepts")
            dead_slopes = [
                c for c, sd in zip(active_slopes, result["sd_b"]) if sd < SD_COLLAPSE
            ]
            collapse.extend(dead_slopes)
            if not collapse:
                break
            dropped.extend(collapse)
            if "seasonal_intercepts" in collapse:
                with_intercepts = False
            active_slopes = tuple(c for c in active_slopes if c not in dead_slopes)

        self._store_fit(table, result, with_intercepts, active_slopes, dropped)
        return self

    def _make_objective(self, table, std_params, with_intercepts, slopes):
        structure = MeanStructure(table.scheme, setting_covariates(self.setting), ())
        W, Z = structure.design(table, std_params)
        y = np.rint(np.asarray(table.y) * self.n_trials) / self.n_trials
        slope_cols = [std_params.apply(c, table.covariate(c)) for c in slopes]
        return _LaplaceObjective(
            structure, self.link, self.family, self.n_trials, W, Z, y,
            table.seasons, slope_cols, with_intercepts, bool(slopes),
        )

    def _fit_once(self, table, std_params, with_intercepts, slopes, theta_start):
        objective = self._make_objective(table, std_params, with_intercepts, slopes)
        m = objective.m
        n_b = len(slopes)
        transform = OrdinalThresholdTransform(m, objective.structure.n_params)

        n_theta = objective.structure.n_params
        x0 = np.concatenate([
            transform.to_opt(theta_start),
            np.full(m if with_intercepts else 0, np.log(0.2)),
            np.full(n_b, np.log(0.2)),
        ])

        def split(x):
            theta = transform.to_model(x[:n_theta])
            pos = n_theta
            sd_a = np.exp(x[pos: pos + (m if with_intercepts else 0)])
            pos += m if with_intercepts else 0
            sd_b = np.exp(x[pos:])
            return theta, sd_a, sd_b

        def objective_value(x):
            theta, sd_a, sd_b = split(x)
            return objective.value(
                theta,
                sd_a if with_intercepts else None,
                sd_b if n_b else None,
            )

        def neg(x):
            try:
                return -objective_value(x)
            except FitError:
                return np.inf

        def neg_grad(x):
            return -_fd_gradient(objective_value, x)

        bounds = [(None, None)] * n_theta
        bounds += [(np.log(1e-8), np.log(1e3))] * ((m if with_intercepts else 0) + n_b)
        res = optimize.minimize(
            neg, x0, jac=neg_grad, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": self.max_outer_iter, "ftol": 1e-12,
                     "gtol": self.outer_tol},
        )
        if not np.isfinite(res.fun):
            raise FitError("mixed-model optimization failed to find a finite objective")
        theta, sd_a, sd_b = split(res.x)
        value, mode = objective.value(
            theta,
            sd_a if with_intercepts else None,
            sd_b if n_b else None,
            return_mode=True,
        )
        return {
            "objective": objective,
            "theta": theta,
            "sd_a": sd_a if with_intercepts else np.empty(0),
            "sd_b": sd_b,
            "x_opt": res.x,
            "loglik": value,
            "mode": mode,
            "transform": transform,
            "n_theta": n_theta,
            "converged": bool(res.success),
            "outer_iterations": int(res.nit),
            "slopes": slopes,
            "with_intercepts": with_intercepts,
        }

    def _store_fit(self, table, result, with_intercepts, slopes, dropped):
        objective = result["objective"]
        theta = result["theta"]
        self.structure_ = objective.structure
        self.params_ = theta
        self.param_names_ = objective.structure.param_names()
        self.sd_intercepts_ = (
            dict(zip(self.scheme_.stages, result["sd_a"].tolist()))
            if with_intercepts
            else {}
        )
        self.sd_slopes_ = dict(zip(slopes, result["sd_b"].tolist()))
        self.loglik_laplace_ = result["loglik"]
        self.outer_iterations_ = result["outer_iterations"]
        self.converged_ = result["converged"]
        self.dropped_terms_ = list(dropped)
        self.random_slope_covs_ = tuple(slopes)
        self.with_intercepts_ = with_intercepts

        a, b = objective._unpack(result["mode"])
        self.random_intercepts_ = (
            {int(s): a[i].copy() for i, s in enumerate(objective.season_ids)}
            if with_intercepts
            else {}
        )
        self.random_slopes_ = {
            cov: b[:, j].copy() for j, cov in enumerate(slopes)
        }
        self.training_seasons_ = [int(s) for s in objective.season_ids]

        fitted = self.fitted_values(table)
        self.rmse_within_ = _within_sample_rmse(table, fitted)

        if self.compute_se:
            self._compute_se(result)
        else:
            self.se_ = None
            self.wald_ = None

    def _compute_se(self, result):
        """Laplace model-based SEs: FD Hessian on the natural scale."""
        objective = result["objective"]
        n_theta = result["n_theta"]
        with_intercepts = result["with_intercepts"]
        n_b = len(result["slopes"])
        m = objective.m

        def natural_value(x):
            theta = x[:n_theta]
            pos = n_theta
            sd_a = np.exp(x[pos: pos + (m if with_intercepts else 0)])
            pos += m if with_intercepts else 0
            sd_b = np.exp(x[pos:])
            try:
                return objective.value(
                    theta,
                    sd_a if with_intercepts else None,
                    sd_b if n_b else None,
                )
            except FitError:
                return -np.inf

        sds = np.concatenate([
            result["sd_a"] if with_intercepts else np.empty(0),
            result["sd_b"],
        ])
        x_natural = np.concatenate([result["theta"], np.log(np.maximum(sds, 1e-300))])
        # variance components stuck near zero contribute no curvature on the
        # log scale; freeze them so the information matrix stays invertible
        active = np.r_[np.ones(n_theta, dtype=bool), sds > 1e-4]

        def active_value(x_act):
            x = x_natural.copy()
            x[active] = x_act
            return natural_value(x)

        H = _fd_hessian(active_value, x_natural[active])
        try:
            cov = np.linalg.inv(-H)
        except np.linalg.LinAlgError:
            cov = np.linalg.pinv(-H)
        if not np.all(np.isfinite(cov)):
            cov = np.linalg.pinv(-H)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))[:n_theta]
        self.se_ = se
        self.se_method_ = "laplace_model_based"
        self.wald_ = wald_table(self.param_names_, result["theta"], se)

    # -- fitted values and interpolation -------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise FitError("model is not fitted")

    def _eta_for(self, seasons, W, Z, slope_cols):
        eta = self.structure_.eta(W, Z, self.params_)
        if self.with_intercepts_:
            offsets = np.empty((len(seasons), self.structure_.n_thresholds))
            for r, s in enumerate(seasons):
                offsets[r] = self.random_intercepts_[int(s)]
            eta = eta + offsets
        for j, cov in enumerate(self.random_slope_covs_):
            eta = eta + np.outer(slope_cols[j], self.random_slopes_[cov])
        return eta

    def fitted_values(self, table):
        """Cumulative means at the table rows using the predicted effects."""
        self._check_fitted()
        unknown = set(int(s) for s in table.season_values) - set(self.training_seasons_)
        if unknown:
            raise DataError(
                f"seasons without predicted random effects: {sorted(unknown)}; "
                "random effects exist only for training seasons"
            )
        W, Z = self.structure_.design(table, self.standardization_)
        slope_cols = [
            self.standardization_.apply(c, table.covariate(c))
            for c in self.random_slope_covs_
        ]
        eta = self._eta_for(table.seasons, W, Z, slope_cols)
        link = get_link(self.link)
        out = np.empty((eta.shape[0], self.structure_.n_categories))
        out[:, 0] = 1.0
        out[:, 1:] = link.cdf(eta)
        return out

    def interpolate(self, features, seasons=None):
        """Daily cumulative-mean curves for training seasons.

        Seasonal random effects exist only for seasons present in training,
        so unseen seasons are rejected.
        """
        self._check_fitted()
        frame = apply_standardization(features, self.standardization_)
        if seasons is None:
            seasons = np.unique(frame.seasons)
        wanted = [int(s) for s in np.atleast_1d(seasons)]
        unknown = [s for s in wanted if s not in set(self.training_seasons_)]
        if unknown:
            raise DataError(
                f"seasons not seen in training: {unknown}; the seasonal random "
                "effects cannot be predicted for new seasons"
            )
        mask = np.isin(frame.seasons, wanted)
        if not mask.any():
            raise DataError(f"no feature rows for seasons {wanted}")
        sub = frame.select(mask)
        W, Z = self.structure_.design(sub, self.standardization_)
        slope_cols = [
            self.standardization_.apply(c, sub.column(c))
            for c in self.random_slope_covs_
        ]
        eta = self._eta_for(sub.seasons, W, Z, slope_cols)
        link = get_link(self.link)
        values = np.empty((eta.shape[0], self.structure_.n_categories))
        values[:, 0] = 1.0
        values[:, 1:] = link.cdf(eta)
        return PredictedProgress(self.scheme_.stages, sub.seasons, sub.days, values)

    @property
    def thresholds_(self):
        self._check_fitted()
        return self.structure_.thresholds(self.params_)

    @property
    def ordinal_slopes_(self):
        self._check_fitted()
        _, beta = self.structure_.split(self.params_)
        return dict(zip(self.structure_.ordinal, beta.tolist()))

    # -- reporting ------------------------------------------------------------

    def summary(self):
        """Fixed effects with SEs, Wald z and the random-effect SDs."""
        self._check_fitted()
        lines = [
            f"{'Parameter':<22}{'Estimate':>10}{'SE':>9}{'Wald z':>11}  {'SD':>7}",
        ]
        n_stages = len(self.scheme_.stages)
        for idx, name in enumerate(self.param_names_):
            est = self.params_[idx]
            se = self.se_[idx] if self.se_ is not None else np.nan
            if self.se_ is not None and se > 0:
                row = self.wald_[idx]
                z_text = f"{row['z']:>9.3f} {row['marker']:<1}"
            else:
                z_text = f"{'':>11}"
            if idx < n_stages:
                sd = self.sd_intercepts_.get(name)
            else:
                sd = self.sd_slopes_.get(name)
            sd_text = f"{sd:>7.3f}" if sd is not None else f"{'-':>7}"
            se_text = f"{se:>9.3f}" if np.isfinite(se) else f"{'-':>9}"
            lines.append(f"{name:<22}{est:>10.3f}{se_text}{z_text}  {sd_text}")
        lines.append("Significance: . < 0.05, * < 0.001; SE is Laplace model-based")
        lines.append(
            f"Within-sample RMSE averaged over seasons: {self.rmse_within_ * 100:.2f}%"
        )
        return "\n".join(lines)

    # -- serialization ---------------------------------------------------------

    def to_dict(self, config=None):
        from . import __version__

        self._check_fitted()
        payload = {
            "format_version": MODEL_FORMAT_VERSION,
            "tool": {"name": "cropprogress", "version": __version__},
            "kind": "clmm",
            "spec": {
                "link": self.link,
                "family": self.family,
                "setting": self.setting,
                "n_trials": int(self.n_trials),
                "seasonal_intercepts": bool(self.with_intercepts_),
                "stage_slopes": list(self.random_slope_covs_),
            },
            "scheme": {"crop": self.scheme_.crop, "stages": list(self.scheme_.stages)},
            "params": [[n, float(v)] for n, v in zip(self.param_names_, self.params_)],
            "sd_intercepts": {k: float(v) for k, v in self.sd_intercepts_.items()},
            "sd_slopes": {k: float(v) for k, v in self.sd_slopes_.items()},
            "random_intercepts": {
                str(s): v.tolist() for s, v in self.random_intercepts_.items()
            },
            "random_slopes": {k: v.tolist() for k, v in self.random_slopes_.items()},
            "training_seasons": self.training_seasons_,
            "standardization": self.standardization_.to_dict(),
            "wald": self.wald_,
            "se": self.se_.tolist() if self.se_ is not None else None,
            "se_method": "laplace_model_based",
            "convergence": {
                "laplace_loglik": float(self.loglik_laplace_),
                "outer_iterations": int(self.outer_iterations_),
                "converged": bool(self.converged_),
                "dropped_terms": self.dropped_terms_,
            },
            "rmse_within": float(self.rmse_within_),
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
            link=spec["link"], family=spec["family"], setting=spec["setting"],
            n_trials=spec["n_trials"],
            seasonal_intercepts=spec["seasonal_intercepts"],
            stage_slopes=tuple(spec["stage_slopes"]),
        )
        scheme = StageScheme(payload["scheme"]["crop"], tuple(payload["scheme"]["stages"]))
        model.scheme_ = scheme
        model.structure_ = MeanStructure(
            scheme, setting_covariates(spec["setting"]), ()
        )
        model.params_ = np.asarray([v for _, v in payload["params"]], dtype=float)
        model.param_names_ = [n for n, _ in payload["params"]]
        model.sd_intercepts_ = payload["sd_intercepts"]
        model.sd_slopes_ = payload["sd_slopes"]
        model.random_intercepts_ = {
            int(s): np.asarray(v, dtype=float)
            for s, v in payload["random_intercepts"].items()
        }
        model.random_slopes_ = {
            k: np.asarray(v, dtype=float) for k, v in payload["random_slopes"].items()
        }
        model.training_seasons_ = [int(s) for s in payload["training_seasons"]]
        model.standardization_ = StandardizationParams.from_dict(payload["standardization"])
        model.wald_ = payload["wald"]
        model.se_ = np.asarray(payload["se"], dtype=float) if payload["se"] else None
        model.with_intercepts_ = spec["seasonal_intercepts"]
        model.random_slope_covs_ = tuple(spec["stage_slopes"])
        conv = payload["convergence"]
        model.loglik_laplace_ = conv["laplace_loglik"]
        model.outer_iterations_ = conv["outer_iterations"]
        model.converged_ = conv["converged"]
        model.dropped_terms_ = conv["dropped_terms"]
        model.rmse_within_ = payload["rmse_within"]
        return model


def _within_sample_rmse(table, fitted):
    """Per-season RMSE over the free categories, averaged over seasons."""
    err = np.asarray(table.y)[:, 1:] - np.asarray(fitted)[:, 1:]
    sq = np.sum(err**2, axis=1)
    values = []
    for s in np.unique(table.seasons):
        mask = table.seasons == s
        values.append(np.sqrt(np.mean(sq[mask])))
    return float(np.mean(values))
