import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from mvnash.market import AgentSpec, competition_index

thetas = st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8)


@given(thetas, st.randoms())
def test_psi_is_permutation_invariant_and_bounded(theta, rnd):
    psi = competition_index([AgentSpec(t, 1.0) for t in theta])[0]
    shuffled = list(theta)
    rnd.shuffle(shuffled)
    assert np.isclose(psi, competition_index([AgentSpec(t, 1.0) for t in shuffled])[0])
    assert 0.0 <= psi <= 1.0 + 1e-12


@given(thetas, st.data())
def test_psi_is_monotone_in_each_theta(theta, data):
    i = data.draw(st.integers(0, len(theta) - 1))
    bumped = list(theta)
    bumped[i] = data.draw(st.floats(theta[i], 1.0))
    lo = competition_index([AgentSpec(t, 1.0) for t in theta])[0]
    hi = competition_index([AgentSpec(t, 1.0) for t in bumped])[0]
    assert hi >= lo - 1e-15


@settings(max_examples=50)
@given(st.integers(2, 8))
def test_psi_reaches_one_only_when_everyone_fully_competes(n):
    assert np.isclose(competition_index([AgentSpec(1.0, 1.0)] * n)[0], 1.0)
    assert competition_index([AgentSpec(1.0, 1.0)] * (n - 1) + [AgentSpec(0.99, 1.0)])[0] < 1.0
