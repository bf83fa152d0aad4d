"""Inverse link functions and the derivatives needed by Fisher scoring.

Each link wraps a continuous CDF ``F`` together with its density ``f = F'``,
the density derivative ``f'``, the quantile function (used to draw latent
development errors in simulation), and log-space tail evaluations of ``F``
and ``1 - F``.  Outputs are never clamped here; probability clamping is the
responsibility of the likelihood layer.
"""

from __future__ import annotations

import numpy as np
from scipy import special

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class LogitLink:
    name = "logit"

    def cdf(self, eta):
        return special.expit(eta)

    def pdf(self, eta):
        p = special.expit(eta)
        return p * (1.0 - p)

    def dpdf(self, eta):
        p = special.expit(eta)
        return p * (1.0 - p) * (1.0 - 2.0 * p)

    def ppf(self, p):
        return special.logit(p)

    def log_cdf(self, eta):
        return special.log_expit(eta)

    def log_sf(self, eta):
        return special.log_expit(-np.asarray(eta, dtype=float))


class ProbitLink:
    name = "probit"

    def cdf(self, eta):
        # erfc-based standard normal CDF, absolute error below 1e-15
        return special.ndtr(eta)

    def pdf(self, eta):
        eta = np.asarray(eta, dtype=float)
        return np.exp(-0.5 * eta * eta) / _SQRT_2PI

    def dpdf(self, eta):
        eta = np.asarray(eta, dtype=float)
        return -eta * np.exp(-0.5 * eta * eta) / _SQRT_2PI

    def ppf(self, p):
        return special.ndtri(p)

    def log_cdf(self, eta):
        return special.log_ndtr(eta)

    def log_sf(self, eta):
        return special.log_ndtr(-np.asarray(eta, dtype=float))


class CauchitLink:
    name = "cauchit"

    def cdf(self, eta):
        eta = np.asarray(eta, dtype=float)
        return 0.5 + np.arctan(eta) / np.pi

    def pdf(self, eta):
        eta = np.asarray(eta, dtype=float)
        return 1.0 / (np.pi * (1.0 + eta * eta))

    def dpdf(self, eta):
        eta = np.asarray(eta, dtype=float)
        return -2.0 * eta / (np.pi * (1.0 + eta * eta) ** 2)

    def ppf(self, p):
        p = np.asarray(p, dtype=float)
        return np.tan(np.pi * (p - 0.5))

    def log_cdf(self, eta):
        # For eta < 0 use F(eta) = arctan(1/|eta|)/pi, which stays well above
        # the underflow threshold where the direct form rounds to 0.
        eta = np.asarray(eta, dtype=float)
        with np.errstate(divide="ignore"):
            tail = np.log(np.arctan(1.0 / np.maximum(-eta, 1e-300))) - np.log(np.pi)
        direct = np.log(np.clip(self.cdf(eta), 1e-300, None))
        return np.where(eta < 0, tail, direct)

    def log_sf(self, eta):
        return self.log_cdf(-np.asarray(eta, dtype=float))


LINKS = {
    "logit": LogitLink(),
    "probit": ProbitLink(),
    "cauchit": CauchitLink(),
}


def get_link(name):
    """Look up a link object by its configuration name."""
    try:
        return LINKS[name]
    except KeyError:
        raise ValueError(
            f"unknown link {name!r}; expected one of {sorted(LINKS)}"
        ) from None
