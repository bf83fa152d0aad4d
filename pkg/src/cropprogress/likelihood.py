"""Conditional densities, mean structure, and the partial log-likelihood.

Two likelihood families share one cumulative mean model.  The backward
cumulative multinomial ("bcm") treats the stage proportions as a multinomial
over category differences, so it requires deterministically nested stages.
The multivariate binomial ("mb") treats each cumulative category as a
conditionally independent binomial, so only the mean structure carries the
ordering.  Inference pools per-observation log-densities across seasons and
weeks; intra-season dependence is absorbed by the clustered covariance in
the estimation layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .exceptions import DataError
from .links import get_link

#: Probability floor applied inside the log-pmfs (and nowhere else).
PROB_EPS = 1e-12

#: N * y must sit on the integer grid within this tolerance.
GRID_TOL = 1e-6

FAMILIES = ("bcm", "mb")


def check_family(name):
    if name not in FAMILIES:
        raise ValueError(f"unknown family {name!r}; expected one of {FAMILIES}")
    return name


@dataclass
class ClampStats:
    """Counter for negative category probabilities clamped under bcm."""

    clamped: int = 0
    total: int = 0

    @property
    def fraction(self):
        return self.clamped / self.total if self.total else 0.0


class MeanStructure:
    """Parameter layout and linear predictors of the cumulative mean model.

    Covariates flagged nominal get one coefficient per stage (they join the
    intercept in the ``w`` block); ordinal covariates share a single slope
    across stages (the ``z`` block).  The parameter vector is laid out as
    the intercept thresholds in stage order, then each nominal covariate's
    per-stage coefficients, then the ordinal slopes.
    """

    def __init__(self, scheme, covariates, nominal=()):
        self.scheme = scheme
        self.covariates = tuple(covariates)
        nominal = tuple(c for c in self.covariates if c in set(nominal))
        unknown = set(nominal) - set(self.covariates)
        if set(nominal) - set(self.covariates):
            raise DataError(f"nominal flags for unknown covariates: {sorted(unknown)}")
        self.nominal = nominal
        self.ordinal = tuple(c for c in self.covariates if c not in set(nominal))
        self.n_categories = scheme.n_categories
        self.n_thresholds = self.n_categories - 1

    @property
    def n_params(self):
        return self.n_thresholds * (1 + len(self.nominal)) + len(self.ordinal)

    @property
    def is_purely_ordinal(self):
        return not self.nominal

    def param_names(self):
        names = list(self.scheme.stages)
        for cov in self.nominal:
            names.extend(f"{cov}[{stage}]" for stage in self.scheme.stages)
        names.extend(self.ordinal)
        return names

    def design(self, table, std_params):
        """Build (W, Z) from a modeling table or feature frame.

        ``W`` carries the intercept and standardized nominal covariates,
        ``Z`` the standardized ordinal covariates.
        """
        n = len(table)
        getter = table.covariate if hasattr(table, "covariate") else table.column
        W = np.ones((n, 1 + len(self.nominal)))
        for j, cov in enumerate(self.nominal, start=1):
            W[:, j] = std_params.apply(cov, getter(cov))
        Z = np.empty((n, len(self.ordinal)))
        for j, cov in enumerate(self.ordinal):
            Z[:, j] = std_params.apply(cov, getter(cov))
        return W, Z

    def split(self, theta):
        """Split theta into the (1 + n_nominal, K - 1) matrix A and beta."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DataError(
                f"theta must have length {self.n_params}, got {theta.shape}"
            )
        n_a = self.n_thresholds * (1 + len(self.nominal))
        A = theta[:n_a].reshape(1 + len(self.nominal), self.n_thresholds)
        beta = theta[n_a:]
        return A, beta

    def pack(self, A, beta):
        return np.concatenate([np.asarray(A, dtype=float).ravel(), np.asarray(beta, dtype=float)])

    def thresholds(self, theta):
        A, _ = self.split(theta)
        return A[0]

    def eta(self, W, Z, theta):
        A, beta = self.split(theta)
        eta = W @ A
        if beta.size:
            eta += (Z @ beta)[:, None]
        return eta


def cum_means(structure, link, W, Z, theta):
    """Cumulative mean matrix (n, K); the first column is identically 1."""
    link = get_link(link) if isinstance(link, str) else link
    eta = structure.eta(W, Z, theta)
    out = np.empty((eta.shape[0], structure.n_categories))
    out[:, 0] = 1.0
    out[:, 1:] = link.cdf(eta)
    return out


def _promote(y, mstar):
    y = np.asarray(y, dtype=float)
    mstar = np.asarray(mstar, dtype=float)
    scalar = y.ndim == 1
    if scalar:
        y = y[None, :]
        mstar = mstar[None, :]
    if y.shape != mstar.shape:
        raise DataError(f"y and mstar shapes differ: {y.shape} vs {mstar.shape}")
    return y, mstar, scalar


def _counts(y, n_trials):
    scaled = np.asarray(y, dtype=float) * n_trials
    rounded = np.rint(scaled)
    if np.max(np.abs(scaled - rounded), initial=0.0) > GRID_TOL:
        raise DataError(
            f"proportions are not multiples of 1/{n_trials} "
            f"(largest deviation {np.max(np.abs(scaled - rounded)):.3g})"
        )
    return rounded


def bcm_log_density(y, mstar, n_trials, allow_crossing=False, clamp_stats=None):
    """Log-density of the backward cumulative multinomial family.

    ``y`` and ``mstar`` are full category matrices (first column 1).  The
    category probabilities are the consecutive differences of ``mstar``;
    with ``allow_crossing`` (nominal-effects models) negative differences
    are clamped to the probability floor and counted in ``clamp_stats``,
    otherwise a non-monotone mean vector is an error because this family
    requires deterministic stage ordering.
    """
    y, mstar, scalar = _promote(y, mstar)
    if not np.allclose(y[:, 0], 1.0, rtol=0, atol=GRID_TOL):
        raise DataError("bcm requires y[...,0] == 1")
    if np.any(y[:, :-1] < y[:, 1:] - GRID_TOL):
        raise DataError("bcm requires y non-increasing across categories")
    cum = _counts(y, n_trials)
    counts = np.concatenate([cum[:, :-1] - cum[:, 1:], cum[:, -1:]], axis=1)
    probs = np.concatenate([mstar[:, :-1] - mstar[:, 1:], mstar[:, -1:]], axis=1)
    negative = probs < 0.0
    if np.any(negative):
        if not allow_crossing:
            raise DataError(
                "bcm requires a non-increasing mean vector; "
                "use the mb family for crossing means"
            )
        if clamp_stats is not None:
            clamp_stats.clamped += int(np.count_nonzero(negative))
    if clamp_stats is not None:
        clamp_stats.total += probs.size
    probs = np.clip(probs, PROB_EPS, 1.0)
    out = (
        gammaln(n_trials + 1.0)
        - gammaln(counts + 1.0).sum(axis=1)
        + (counts * np.log(probs)).sum(axis=1)
    )
    return float(out[0]) if scalar else out


def mb_log_density(y, mstar, n_trials):
    """Log-density of the multivariate binomial family.

    Each free category (k >= 2) contributes an independent binomial log-pmf
    with success probability ``mstar_k``; the first category is degenerate.
    No ordering of ``y`` across categories is required.
    """
    y, mstar, scalar = _promote(y, mstar)
    if not np.allclose(y[:, 0], 1.0, rtol=0, atol=GRID_TOL):
        raise DataError("mb requires y[...,0] == 1")
    if np.any((y < -GRID_TOL) | (y > 1 + GRID_TOL)):
        raise DataError("mb requires y within [0, 1]")
    counts = _counts(y[:, 1:], n_trials)
    p = np.clip(mstar[:, 1:], PROB_EPS, 1.0 - PROB_EPS)
    out = (
        gammaln(n_trials + 1.0)
        - gammaln(counts + 1.0)
        - gammaln(n_trials - counts + 1.0)
        + counts * np.log(p)
        + (n_trials - counts) * np.log1p(-p)
    ).sum(axis=1)
    return float(out[0]) if scalar else out


def _mb_eta_weights(y, mstar, f, fp, n_trials, order):
    """First (and second) derivatives of the mb log-density wrt eta.

    The log-pmf clamps probabilities to [eps, 1 - eps]; inside a clamped
    region the clamped objective is locally constant, so the consistent
    derivative there is zero.
    """
    raw = mstar[:, 1:]
    clamped = (raw < PROB_EPS) | (raw > 1.0 - PROB_EPS)
    p = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    yk = y[:, 1:]
    dldm = n_trials * (yk - p) / (p * (1.0 - p))
    dldm[clamped] = 0.0
    dl = dldm * f
    if order == 1:
        return dl, None
    d2ldm = -n_trials * (yk / p**2 + (1.0 - yk) / (1.0 - p) ** 2)
    d2ldm[clamped] = 0.0
    n, kk = dl.shape
    d2 = np.zeros((n, kk, kk))
    idx = np.arange(kk)
    d2[:, idx, idx] = d2ldm * f * f + dldm * fp
    return dl, d2


def _bcm_eta_weights(y, mstar, f, fp, n_trials, order, clamp_stats=None, allow_crossing=False):
    """First (and second) derivatives of the bcm log-density wrt eta.

    Entries whose category probability is floored at eps contribute zero
    derivative, matching the flat clamped log-pmf there.
    """
    cum = _counts(y, n_trials)
    counts = np.concatenate([cum[:, :-1] - cum[:, 1:], cum[:, -1:]], axis=1)
    probs = np.concatenate([mstar[:, :-1] - mstar[:, 1:], mstar[:, -1:]], axis=1)
    if np.any(probs < 0.0) and not allow_crossing:
        raise DataError(
            "bcm requires a non-increasing mean vector; "
            "use the mb family for crossing means"
        )
    clamped = probs < PROB_EPS
    probs = np.clip(probs, PROB_EPS, 1.0)
    ratio = counts / probs  # (n, K)
    ratio[clamped] = 0.0
    # dL/dm*_k = n_k/p_k - n_{k-1}/p_{k-1} for k = 2..K
    dldm = ratio[:, 1:] - ratio[:, :-1]
    dl = dldm * f
    if order == 1:
        return dl, None
    r2 = counts / probs**2  # (n, K)
    r2[clamped] = 0.0
    n, kk = dl.shape
    d2m = np.zeros((n, kk, kk))
    idx = np.arange(kk)
    d2m[:, idx, idx] = -(r2[:, 1:] + r2[:, :-1])
    if kk > 1:
        off = r2[:, 1:-1]  # shared term between consecutive free categories
        d2m[:, idx[:-1], idx[1:]] = off
        d2m[:, idx[1:], idx[:-1]] = off
    d2 = d2m * f[:, :, None] * f[:, None, :]
    d2[:, idx, idx] += dldm * fp
    return dl, d2


class PartialLikelihood:
    """Pooled log-likelihood, analytic score, and information matrices.

    Bundles the design (W, Z), responses, and season labels so the
    optimizer and the covariance estimators share one evaluation path.
    Per-season contributions are reduced in fixed row order, making every
    quantity reproducible bit for bit.
    """

    def __init__(self, structure, link, family, n_trials, W, Z, Y, seasons):
        self.structure = structure
        self.link = get_link(link) if isinstance(link, str) else link
        self.family = check_family(family)
        self.n_trials = int(n_trials)
        if self.n_trials < 1:
            raise DataError("n_trials must be a positive integer")
        self.W = np.asarray(W, dtype=float)
        self.Z = np.asarray(Z, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        self.seasons = np.asarray(seasons)
        self.allow_crossing = (family == "bcm") and not structure.is_purely_ordinal
        self.clamp_stats = ClampStats()

    @property
    def n_obs(self):
        return self.Y.shape[0]

    def linear_predictors(self, theta):
        return self.structure.eta(self.W, self.Z, theta)

    def cum_means(self, theta):
        return cum_means(self.structure, self.link, self.W, self.Z, theta)

    def loglik(self, theta):
        mstar = self.cum_means(theta)
        if self.family == "bcm":
            contrib = bcm_log_density(
                self.Y, mstar, self.n_trials,
                allow_crossing=self.allow_crossing,
                clamp_stats=self.clamp_stats,
            )
        else:
            contrib = mb_log_density(self.Y, mstar, self.n_trials)
        return float(np.sum(contrib))

    def eta_weights(self, theta, order=1):
        """d(logf)/d(eta) and optionally the per-observation eta Hessians."""
        eta = self.linear_predictors(theta)
        mstar = np.empty((eta.shape[0], self.structure.n_categories))
        mstar[:, 0] = 1.0
        mstar[:, 1:] = self.link.cdf(eta)
        f = self.link.pdf(eta)
        fp = self.link.dpdf(eta) if order == 2 else None
        if self.family == "bcm":
            return _bcm_eta_weights(
                self.Y, mstar, f, fp, self.n_trials, order,
                clamp_stats=self.clamp_stats, allow_crossing=self.allow_crossing,
            )
        return _mb_eta_weights(self.Y, mstar, f, fp, self.n_trials, order)

    def obs_scores(self, theta):
        """Per-observation score rows, shape (n_obs, n_params)."""
        dl, _ = self.eta_weights(theta, order=1)
        n = dl.shape[0]
        blocks = [dl * self.W[:, [j]] for j in range(self.W.shape[1])]
        cols = blocks + ([dl.sum(axis=1, keepdims=True) * self.Z] if self.Z.shape[1] else [])
        return np.concatenate(cols, axis=1) if cols else np.empty((n, 0))

    def score(self, theta):
        """Analytic gradient of the pooled log-likelihood."""
        return self.obs_scores(theta).sum(axis=0)

    def information(self, theta):
        """(A, B): outer-product information and its season-clustered version.

        ``A`` sums per-observation score outer products; ``B`` sums per
        season over the summed season scores, capturing intra-season score
        correlation.  With one observation per season the two coincide.
        """
        S = self.obs_scores(theta)
        A = S.T @ S
        order = np.argsort(self.seasons, kind="stable")
        S_sorted = S[order]
        seasons_sorted = self.seasons[order]
        starts = np.flatnonzero(
            np.r_[True, seasons_sorted[1:] != seasons_sorted[:-1]]
        )
        G = np.add.reduceat(S_sorted, starts, axis=0)
        B = G.T @ G
        return A, B

    def intercept_start(self):
        """Link-transformed pooled stage means; slopes start at zero.

        Exact maximizer for intercept-only models, a near-basin start
        otherwise.
        """
        ybar = self.Y[:, 1:].mean(axis=0)
        ybar = np.clip(ybar, 1e-10, 1.0 - 1e-10)
        alpha = np.asarray(self.link.ppf(ybar), dtype=float)
        A = np.zeros((1 + len(self.structure.nominal), self.structure.n_thresholds))
        A[0] = alpha
        beta = np.zeros(len(self.structure.ordinal))
        return self.structure.pack(A, beta)
