import numpy as np
import pytest

from mvnash.closed_form import (
    feasibility_check,
    frontier_variance,
    h_check_closed,
    integrate,
    is_pinned,
    lagrange_and_mean,
    lagrange_multiplier,
    p_closed,
)
from mvnash.errors import DenominatorDegenerate
from mvnash.market import PiecewiseDeterministic, TimeFunction

from conftest import make_game


def test_closed_form_factors():
    assert p_closed(0.03, 0.2, 0.0, 1.0) == pytest.approx(np.exp(0.02))
    assert h_check_closed(0.03, 0.0, 1.0) == pytest.approx(-np.exp(-0.03))
    pw = PiecewiseDeterministic((0.5,), (0.0, 0.06))
    assert h_check_closed(pw, 0.0, 1.0) == pytest.approx(-np.exp(-0.03))
    assert integrate(TimeFunction(lambda t: t**2), 0.0, 1.0) == pytest.approx(1 / 3, abs=1e-12)


P0, HC0, HT0, Z, GAMMA = np.exp(0.02), -np.exp(-0.03), 0.01, 0.3, 2.0


def test_chain_maximises_the_mean_variance_value():
    ch = lagrange_and_mean(P0, HC0, HT0, Z, GAMMA)
    value = lambda d: d - GAMMA / 2 * frontier_variance(P0, HC0, HT0, Z, d)
    grid = ch.d_star + np.linspace(-0.05, 0.05, 101)
    assert np.argmax([value(d) for d in grid]) == 50
    assert ch.value == pytest.approx(value(ch.d_star))
    assert ch.variance == pytest.approx(frontier_variance(P0, HC0, HT0, Z, ch.d_star))
    assert ch.lambda_star == pytest.approx(lagrange_multiplier(P0, HC0, HT0, Z, ch.d_star))


def test_frontier_minimum_sits_at_the_zero_multiplier_mean():
    d0 = -(Z + HT0) / HC0
    assert frontier_variance(P0, HC0, HT0, Z, d0) == pytest.approx(0.0)
    assert lagrange_multiplier(P0, HC0, HT0, Z, d0) == pytest.approx(0.0)


def test_degenerate_denominator_raises_and_pinned_branch():
    with pytest.raises(DenominatorDegenerate):
        frontier_variance(1.0, -1.0 - 1e-6, 0.0, 0.0, 0.1)
    assert is_pinned(1.0, -1.0)
    ch = lagrange_and_mean(1.0, -1.0, 0.2, 0.3, 2.0)
    assert ch.pinned and ch.variance == 0.0 and ch.d_star == pytest.approx(0.5) and np.isnan(ch.lambda_star)


def test_feasibility_certificate_is_positive_for_nonzero_premium():
    cert = feasibility_check(make_game())
    assert cert.all_feasible
    # constant coefficients: psi = prod 1/(1+r dt), xi = 0, so the integral is rho^2 sum psi^2 dt
    assert cert.integrals[0] > 0.03
