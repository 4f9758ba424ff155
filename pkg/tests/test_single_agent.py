import numpy as np
import pytest

from mvnash.errors import ConsistencyViolation
from mvnash.lattice import BsdeSolution
from mvnash.simulator import completion_of_squares, deviation_family, perturb, quadratic_exponent, tree_objective
from mvnash.single_agent import best_response, competition_terms, market_factors, reassemble_h
from mvnash.tree import TreeProcess

from conftest import R, RHO, SIGMA, T, make_game


def _with_own(sol, game, profile):
    return perturb(profile, sol.agent, sol.control, 1.0)


@pytest.mark.parametrize("mode", ["recombining", "fullbinary"])
def test_tree_moments_reproduce_the_chain(mode):
    game = make_game(N=8, mode=mode)
    zero = TreeProcess.zeros(game.driver, (2,))
    sol = best_response(game, 0, zero)
    est = tree_objective(game, 0, _with_own(sol, game, zero))
    assert est.mean == pytest.approx(sol.d_star, abs=1e-12)
    assert est.variance == pytest.approx(sol.chain.variance, abs=1e-12)


def test_classical_solution_with_zero_opponents_converges():
    # no competition: d* = (e^{rho^2 T} - 1)/gamma + e^{rT} z and sigma pi(0) = rho e^{(rho^2 - r)T}/gamma
    errs = []
    for N in (20, 40, 80):
        game = make_game(N=N, theta=(0.0, 0.0))
        sol = best_response(game, 0, TreeProcess.zeros(game.driver, (2,)))
        z = game.z[0]
        d_exact = (np.exp(RHO**2 * T) - 1) / 2.0 + np.exp(R * T) * z
        assert sol.d_star == pytest.approx(d_exact, rel=5.0 / N)
        errs.append(abs(sol.sigma_pi[0][0] - RHO * np.exp((RHO**2 - R) * T) / 2.0))
    assert errs[1] < errs[0] and errs[2] < errs[1]


def test_completion_of_squares_identity_is_exact():
    game = make_game(N=10, mode="fullbinary")
    zero = TreeProcess.zeros(game.driver, (2,))
    sol = best_response(game, 1, zero)
    base = _with_own(sol, game, zero)
    gap0, quad0 = completion_of_squares(game, sol, base)
    assert abs(gap0) < 1e-12 and abs(quad0) < 1e-12
    for name, delta in deviation_family(game.driver, seed=3)[::3]:
        gap, quad = completion_of_squares(game, sol, perturb(base, 1, delta, 0.2))
        assert gap > 0
        assert abs(gap - quad) <= 1e-8 * max(gap, 1e-300)


def test_losses_are_quadratic_in_the_deviation_size():
    game = make_game(N=10)
    zero = TreeProcess.zeros(game.driver, (2,))
    sol = best_response(game, 0, zero)
    base = _with_own(sol, game, zero)
    for _, delta in deviation_family(game.driver)[:4]:
        slope, losses = quadratic_exponent(game, 0, base, delta)
        assert 1.9 <= slope <= 2.1 and min(losses) > 0


def test_opponent_terms_and_reassembly():
    game = make_game(N=6, mu=(0.07, 0.1), sigma=(0.2, 0.25))
    prof = TreeProcess.constant(game.driver, [0.3, 0.4], steps=6)
    exposure, gap = competition_terms(game, 0, prof)
    sp2 = 0.25 * 0.4
    assert np.allclose(exposure[0], 0.5 * sp2)
    assert np.allclose(gap[0], 0.5 * (game.rho[0][0, 1] - game.rho[0][0, 0]) * sp2)
    sol = best_response(game, 0, prof)
    reassemble_h(game, sol)
    broken = BsdeSolution(sol.htilde.h + 1e-3, sol.htilde.eta)
    object.__setattr__(sol, "htilde", broken)
    with pytest.raises(ConsistencyViolation):
        reassemble_h(game, sol)


def test_feedback_reproduces_open_loop_control_along_optimal_wealth():
    game = make_game(N=6, mode="fullbinary", mu=(0.07, 0.1), sigma=(0.2, 0.25))
    prof = TreeProcess.constant(game.driver, [0.3, 0.4], steps=6)
    sol = best_response(game, 1, prof)
    for k in range(6):
        assert np.allclose(sol.feedback(k, sol.zstar[k]), sol.sigma_pi[k])


def test_market_factors_are_shared_by_agents():
    game = make_game(N=5)
    f = market_factors(game)
    assert np.allclose(f.p0[0], f.p0[1]) and np.all(f.feasible)
    assert game.driver.probabilities(5) @ f.deflator[5][:, 0] == pytest.approx(-f.hcheck0[0], rel=1e-12)
