import itertools

import numpy as np
import pytest

from mvnash.market import AgentSpec, MarketSpec, validate_market
from mvnash.tree import build_driver

R, MU, SIGMA, T = 0.03, 0.07, 0.2, 1.0
RHO = (MU - R) / SIGMA


def make_game(N=10, mode="recombining", theta=(0.5, 0.5), gamma=(2.0, 4.0), x0=(1.0, 2.0), mu=None, sigma=None, r=R, horizon=T):
    n = len(theta)
    mu = mu if mu is not None else (MU,) * n
    sigma = sigma if sigma is not None else (SIGMA,) * n
    spec = MarketSpec(horizon, r, tuple(mu), tuple(sigma))
    agents = [AgentSpec(t, g, x) for t, g, x in zip(theta, gamma, x0)]
    return validate_market(spec, agents, build_driver(horizon, N, mode))


def all_paths(N):
    """Every +-1 sign sequence in the fullbinary node order (node index = binary number, up = 1)."""
    return np.array([[1 if b else -1 for b in bits] for bits in itertools.product((0, 1), repeat=N)])


@pytest.fixture
def baseline():
    return make_game()
