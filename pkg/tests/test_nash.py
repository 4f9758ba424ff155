import numpy as np
import pytest

from mvnash.errors import FixedPointViolation, MarginalCase, NotMarginal
from mvnash.market import AgentSpec, MarketSpec, NodeFunction, NodeTable, validate_market
from mvnash.nash import (
    INFINITE,
    NONE,
    UNDECIDED,
    UNIQUE,
    assemble_marginal,
    assemble_usual,
    check_fixed_point,
    classify,
    classify_system,
    coupling_matrix,
    correspondence_gap,
    kernel_samples,
    phi_components,
    usual_profile,
)
from mvnash.single_agent import best_response, market_factors
from mvnash.tree import TreeProcess, build_driver, sup_distance

from conftest import R, RHO, SIGMA, T, make_game


def stochastic_game(theta=(0.5, 0.7), N=5):
    d = build_driver(1.0, N, "fullbinary")
    spec = MarketSpec(
        1.0,
        NodeFunction(lambda k, w: 0.03 + 0.01 * np.tanh(w)),
        (NodeFunction(lambda k, w: 0.08 + 0.02 * np.sin(w)), 0.10),
        (0.2, NodeFunction(lambda k, w: 0.3 + 0.05 * np.cos(w))),
    )
    return validate_market(spec, [AgentSpec(t, g, x) for t, g, x in zip(theta, (2.0, 4.0), (1.0, 2.0))], d)


def cancellation_game(rho=0.2, c=1.2, r0=0.05):
    """Two steps; the premium acts on step 0 only and the step-1 rate offsets it path by path."""
    d = build_driver(1.0, 2, "fullbinary")
    sq = d.sqrt_dt
    r_up, r_down = (c * (1 - rho * sq) - 1) / d.dt, (c * (1 + rho * sq) - 1) / d.dt
    rate = NodeTable([[r0], [r_down, r_up]])
    mu = NodeTable([[r0 + SIGMA * rho], [r_down, r_up]])
    spec = MarketSpec(1.0, rate, (mu, mu), (SIGMA, SIGMA))
    return validate_market(spec, [AgentSpec(1.0, 2.0, 1.0), AgentSpec(1.0, 4.0, 2.0)], d)


def test_coupling_matrix_by_hand_for_two_agents():
    game = make_game(N=3, mu=(0.07, 0.1))
    r1, r2 = game.rho[0][0]
    M = coupling_matrix(game)[0][0]
    # sigma pi_2 = -(4/3) phi_2 - (2/3) phi_1 solves the two best-response relations at theta = 1/2
    assert np.allclose(M, [[2 / 3 * (r2 - r1), 4 / 3 * (r2 - r1)], [4 / 3 * (r1 - r2), 2 / 3 * (r1 - r2)]])


def test_identical_premia_decouple_the_system():
    game = make_game(N=4, theta=(0.3, 0.6, 0.9), gamma=(1, 2, 3), x0=(1, 1, 1))
    sysm = assemble_usual(game)
    assert all(np.all(v == 0) for v in sysm.M.values)
    assert np.allclose(sysm.B[0][0], -RHO * np.eye(3))
    assert all(np.all(v == 0) for v in sysm.C.values + sysm.F.values)


def test_deterministic_coefficients_give_no_initial_value_coupling():
    game = make_game(N=4, mu=(0.07, 0.1))
    sysm = assemble_usual(game)
    assert all(np.allclose(v, 0) for v in sysm.C.values)
    rep = classify(game)
    assert rep.classification == UNIQUE and np.allclose(rep.system.K, 0)


@pytest.mark.parametrize("mode", ["recombining", "fullbinary"])
def test_usual_case_profile_is_a_fixed_point(mode):
    game = make_game(N=6, mode=mode, mu=(0.07, 0.1), sigma=(0.2, 0.3), theta=(0.4, 0.9))
    rep = classify(game)
    assert rep.classification == UNIQUE
    assert max(rep.diagnostics["best_response_gaps"]) < 1e-10
    assert rep.diagnostics["correspondence_gap"] < 1e-10


def test_stochastic_coefficients_couple_initial_values():
    game = stochastic_game()
    rep = classify(game)
    assert rep.classification == UNIQUE
    assert np.linalg.norm(rep.system.K) > 0
    assert rep.diagnostics["gamma_vs_picard"] < 1e-10
    assert correspondence_gap(game, rep.system.solution.solution, rep.profile) < 1e-10


def test_zero_competition_is_n_classical_problems():
    game = make_game(N=8, theta=(0.0, 0.0, 0.0), gamma=(1.0, 2.0, 5.0), x0=(1, 2, 3), mu=(0.07, 0.09, 0.1))
    rep = classify(game)
    zero = TreeProcess.zeros(game.driver, (3,))
    for i in range(3):
        alone = best_response(game, i, zero)
        assert sup_distance(alone.control, rep.profile.component(i)) < 1e-10


def test_equal_sharpe_game_converges_to_the_explicit_equilibrium():
    # sigma pi_i(0) from phi_i(0) = -rho e^{(rho^2 - r)T} / gamma_i
    phi = -RHO * np.exp((RHO**2 - R) * T) / np.array([2.0, 4.0])
    theta, n = np.array([0.5, 0.5]), 2
    psi = np.sum(theta / (n - 1 + theta))
    total = -np.sum(phi * (n - 1) / (n - 1 + theta)) / (1 - psi)
    exact = theta * total / (n - 1 + theta) - phi * (n - 1) / (n - 1 + theta)
    errs = []
    for N in (10, 20, 40):
        rep = classify(make_game(N=N))
        errs.append(np.max(np.abs(rep.profile[0][0] * SIGMA - exact)))
    assert errs[2] < 2e-4 and errs[2] < errs[1] < errs[0]


def test_phi_matches_best_response_bracket():
    game = stochastic_game()
    f = market_factors(game)
    prof = TreeProcess.constant(game.driver, [0.4, -0.2], steps=game.driver.N)
    sols = [best_response(game, i, prof, f) for i in range(2)]
    htilde = type(sols[0].htilde)(TreeProcess.stack([s.htilde.h for s in sols]), TreeProcess.stack([s.htilde.eta for s in sols]))
    comp = phi_components(game, f, htilde)
    for i, s in enumerate(sols):
        assert sup_distance(comp.phi.component(i), s.opponent_exposure - s.sigma_pi) < 1e-12


def test_profile_is_linear_in_phi():
    game = make_game(N=3, theta=(0.2, 0.6))
    phi = TreeProcess(game.driver, [np.random.default_rng(k).normal(size=(game.driver.n_nodes(k), 2)) for k in range(3)])
    assert sup_distance(usual_profile(game, phi * 2.5), usual_profile(game, phi) * 2.5) < 1e-13


def test_fixed_point_violation_is_reported():
    game = make_game(N=4)
    rep = classify(game)
    bad = TreeProcess(game.driver, [v * [1.5, 1.0] for v in rep.profile.values])
    with pytest.raises(FixedPointViolation) as info:
        check_fixed_point(game, bad, market_factors(game))
    assert info.value.agent in (1, 2)


def test_case_routing_errors():
    with pytest.raises(MarginalCase):
        assemble_usual(make_game(N=3, theta=(1.0, 1.0)))
    with pytest.raises(NotMarginal):
        assemble_marginal(make_game(N=3), TreeProcess.zeros(build_driver(1.0, 3, "recombining"), steps=3))


def test_synthetic_systems():
    inf = classify_system(np.eye(3), np.zeros(3))
    assert inf.kind == "infinite" and inf.kernel.shape == (3, 3)
    assert len(kernel_samples(inf)) == 7
    assert classify_system(np.eye(3), np.ones(3)).kind == "none"


def test_equal_sharpe_marginal_game_has_no_equilibrium():
    rep = classify(make_game(N=10, theta=(1.0, 1.0)))
    assert rep.classification == NONE
    assert rep.witness["xi_norm"] > 1e-8
    assert rep.diagnostics["criterion_homogeneous_spread"] > 0


def test_marginal_matrices_by_hand():
    game = make_game(N=3, theta=(1.0, 1.0), mu=(0.07, 0.1))
    f = market_factors(game)
    comp = phi_components(game, f)
    r1, r2 = game.rho[0][0]
    zero = TreeProcess.zeros(game.driver, steps=3)
    one = TreeProcess.constant(game.driver, 1.0, steps=3)
    s0, s1 = assemble_marginal(game, zero, f), assemble_marginal(game, one, f)
    assert np.allclose(s0.B[0][0], [[-r1, (r2 - r1) / 2], [(r1 - r2) / 2, -r2]])
    assert np.allclose(s0.F[1][:, 0], (r2 - r1) / 2 * comp.f[1][:, 1])
    assert np.allclose(s1.F[1][:, 0] - s0.F[1][:, 0], -(r2 - r1))
    assert all(np.allclose(v, 0) for v in s0.C.values)


def test_marginal_verdict_does_not_depend_on_chi_for_deterministic_coefficients():
    rep = classify(make_game(N=6, theta=(1.0, 1.0), mu=(0.07, 0.1)))
    res = list(rep.diagnostics["phi_residuals"].values())
    assert rep.classification in (NONE, INFINITE)
    assert np.allclose(res, res[0], atol=1e-12)


def test_marginal_without_structure_is_undecided():
    rep = classify(stochastic_game(theta=(1.0, 1.0)))
    assert rep.classification == UNDECIDED
    assert set(rep.witness["phi_residuals"]) == {"chi=0", "chi=1", "running_max"}


def test_path_cancellation_market_has_a_chi_family():
    game = cancellation_game()
    rep = classify(game)
    assert rep.classification == INFINITE
    assert rep.diagnostics["criterion_homogeneous_spread"] < 1e-12
    labels = [label for label, _ in rep.profiles]
    assert labels == ["chi=0", "chi=1", "running_max"]
    p0, p1 = rep.profiles[0][1], rep.profiles[1][1]
    assert sup_distance(p0, p1) > 0.1
    # relative wealths sum to zero on every path when every theta is one
    f = market_factors(game)
    sols = [best_response(game, i, p1, f) for i in range(2)]
    for k in range(3):
        assert np.allclose(sols[0].zstar[k] + sols[1].zstar[k], 0.0, atol=1e-12)


def test_report_serialises():
    d = classify(make_game(N=4)).to_dict()
    assert d["classification"] == UNIQUE and d["profiles"] == ["unique"]
    assert isinstance(d["diagnostics"]["singular_values"], list)
