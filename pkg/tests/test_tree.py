import numpy as np
import pytest

from mvnash.errors import DriverMismatch, ValidationError
from mvnash.tree import Mode, TreeProcess, build_driver, sup_distance

from conftest import all_paths


@pytest.mark.parametrize("mode", ["recombining", "fullbinary"])
def test_node_counts_and_probabilities(mode):
    d = build_driver(1.0, 5, mode)
    for k in range(6):
        assert d.n_nodes(k) == (k + 1 if mode == "recombining" else 2**k)
        assert np.isclose(d.probabilities(k).sum(), 1.0)


def test_recombining_probabilities_are_binomial():
    from scipy.stats import binom

    d = build_driver(1.0, 7, "recombining")
    assert np.allclose(d.probabilities(7), binom.pmf(np.arange(8), 7, 0.5))


def test_brownian_levels_match_sign_sums():
    d = build_driver(2.0, 4, "fullbinary")
    w = d.brownian(4)
    assert np.allclose(w, all_paths(4).sum(axis=1) * d.sqrt_dt)
    assert np.array_equal(d.signs(4), all_paths(4))


def test_expectation_and_integrand_are_exact_for_linear_functions():
    d = build_driver(1.0, 6, "recombining")
    w_next = d.brownian(4)
    assert np.allclose(d.expect(3, w_next), d.brownian(3))
    assert np.allclose(d.martingale_integrand(3, w_next), 1.0)


def test_fullbinary_cap():
    with pytest.raises(ValidationError):
        build_driver(1.0, 25, "fullbinary")
    assert build_driver(1.0, 25, "fullbinary", max_full_binary_steps=25).N == 25


def test_mode_parse():
    assert Mode.parse("FullBinary") is Mode.FULL_BINARY
    assert Mode.parse("recombining") is Mode.RECOMBINING
    with pytest.raises(ValidationError):
        Mode.parse("trinomial")


def test_forward_detects_path_dependence_on_recombining_driver():
    d = build_driver(1.0, 3, "recombining")
    x = [np.zeros(1)]
    x.append(d.forward(0, x[0] + 1.0, x[0] - 1.0))
    with pytest.raises(DriverMismatch):
        # running maximum of a walk is not a function of the up count
        d.forward(1, np.maximum(x[1], x[1] + 1.0), np.maximum(x[1], x[1] - 1.0))


def test_tree_process_arithmetic_and_norms():
    d = build_driver(1.0, 3, "fullbinary")
    a = TreeProcess.constant(d, 2.0, steps=4)
    b = TreeProcess(d, [d.brownian(k) for k in range(4)])
    c = 3.0 - a * b / 2.0
    assert np.allclose(c[2], 3.0 - d.brownian(2))
    assert a.is_deterministic() and not b.is_deterministic()
    assert np.isclose(b.expectation(3), 0.0)
    assert sup_distance(a, a + 1e-3) == pytest.approx(1e-3)
    with pytest.raises(Exception):
        a[0][0] = 1.0
