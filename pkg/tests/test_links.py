import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from cropprogress.links import LINKS, get_link

ALL_LINKS = sorted(LINKS)


def test_logit_at_zero():
    assert LINKS["logit"].cdf(0.0) == 0.5


def test_cauchit_at_one():
    assert LINKS["cauchit"].cdf(1.0) == pytest.approx(0.75, abs=1e-15)


def test_probit_quantile_against_series_oracle():
    # independent high-precision normal CDF (mpmath erf series)
    oracle = float(mpmath.ncdf(1.959964))
    assert LINKS["probit"].cdf(1.959964) == pytest.approx(oracle, abs=1e-12)
    assert LINKS["probit"].cdf(1.959964) == pytest.approx(0.975, abs=1e-6)


def test_unknown_link_rejected():
    with pytest.raises(ValueError, match="unknown link"):
        get_link("cloglog")


@pytest.mark.parametrize("name", ALL_LINKS)
@given(eta=st.floats(-30, 30))
def test_symmetry(name, eta):
    link = LINKS[name]
    assert link.cdf(-eta) == pytest.approx(1.0 - link.cdf(eta), abs=1e-12)


@pytest.mark.parametrize("name", ALL_LINKS)
def test_strictly_increasing(name):
    # range where consecutive CDF values stay representably distinct
    link = LINKS[name]
    grid = np.linspace(-7, 7, 401)
    values = link.cdf(grid)
    assert np.all(np.diff(values) > 0)


@pytest.mark.parametrize("name", ALL_LINKS)
@given(eta=st.floats(-4, 4))
def test_density_matches_cdf_slope(name, eta):
    # beyond |eta| ~ 4 the probit CDF difference cancels below the
    # 1e-6 relative target, invalidating the oracle itself
    link = LINKS[name]
    h = 1e-5
    fd = (link.cdf(eta + h) - link.cdf(eta - h)) / (2 * h)
    assert link.pdf(eta) == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("name", ALL_LINKS)
@given(eta=st.floats(-4, 4))
def test_density_derivative_matches_density_slope(name, eta):
    link = LINKS[name]
    h = 1e-5
    fd = (link.pdf(eta + h) - link.pdf(eta - h)) / (2 * h)
    assert link.dpdf(eta) == pytest.approx(fd, rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("name", ALL_LINKS)
@given(p=st.floats(1e-6, 1 - 1e-6))
def test_quantile_round_trip(name, p):
    link = LINKS[name]
    assert link.cdf(link.ppf(p)) == pytest.approx(p, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("name", ALL_LINKS)
def test_log_tails(name):
    link = LINKS[name]
    for eta in (-200.0, -30.0, -2.0, 0.0, 2.0, 30.0):
        log_f = link.log_cdf(eta)
        assert log_f <= 0.0
        if link.cdf(eta) > 0:
            assert log_f == pytest.approx(
                np.log(link.cdf(eta)), rel=1e-9, abs=1e-12
            ) or link.cdf(eta) < 1e-290
        assert link.log_sf(eta) == pytest.approx(link.log_cdf(-eta), rel=1e-12)
