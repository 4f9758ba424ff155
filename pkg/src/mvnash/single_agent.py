"""One agent's mean-variance problem against fixed opponent strategies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .closed_form import MeanVarianceChain, feasibility_check, lagrange_and_mean
from .errors import ConsistencyViolation, Infeasible
from .lattice import BsdeSolution, PSolution, forward_process, scheme_residual, solve_h_check, solve_linear_bsde, solve_p_bsde
from .market import ValidatedGame
from .tree import TreeProcess

REASSEMBLY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class MarketFactors:
    """Strategy-independent pieces, stacked over agents on the last axis.

    ``deflator`` D_i(k) = prod_{s<k} (1 - rho_i eps sqrt(dt)) / (1 + r dt), so the
    decoupled process is Y*_i = Y*_i(0) D_i.
    """

    p: PSolution
    hcheck: BsdeSolution
    deflator: TreeProcess
    feasible: np.ndarray
    feasibility_integrals: np.ndarray

    @property
    def p0(self):
        return np.asarray(self.p.p0)

    @property
    def hcheck0(self):
        return np.asarray(self.hcheck.h0)


def market_factors(game: ValidatedGame) -> MarketFactors:
    driver = game.driver
    p = solve_p_bsde(game.r, game.rho)
    hc = solve_h_check(game.r, game.rho, p)
    sq, dt = driver.sqrt_dt, driver.dt

    def step(k):
        disc = (1.0 + game.r[k] * dt)[:, None]
        return (1 - game.rho[k] * sq) / disc, (1 + game.rho[k] * sq) / disc, 0.0, 0.0

    deflator = forward_process(driver, np.ones(game.n), step, name="deflator")
    cert = feasibility_check(game)
    return MarketFactors(p, hc, deflator, cert.feasible, cert.integrals)


def competition_terms(game: ValidatedGame, i: int, profile: TreeProcess):
    """Return (opponent exposure theta(sigma pi)^_i, opponent drift gap g_i) per step.

    g_i = theta_i/(n-1) sum_{j != i} (rho_j - rho_i) sigma_j pi_j.
    """
    n = game.n
    th = game.theta[i]
    hat_sp, gap = [], []
    for k in range(game.driver.N):
        sp = game.sigma[k] * profile[k]
        others = np.delete(sp, i, axis=1)
        rho_o = np.delete(game.rho[k], i, axis=1)
        hat_sp.append(th * others.sum(axis=1) / (n - 1))
        gap.append(th * ((rho_o - game.rho[k][:, i : i + 1]) * others).sum(axis=1) / (n - 1))
    return TreeProcess(game.driver, hat_sp), TreeProcess(game.driver, gap)


def solve_htilde(game: ValidatedGame, i: int, profile: TreeProcess) -> BsdeSolution:
    """dh = [r h + g_i + rho_i eta] dt + eta dW, h(T) = 0, with g_i from the opponents."""
    _, gap = competition_terms(game, i, profile)
    return solve_linear_bsde(game.driver, 0.0, a=-game.r, b=-game.rho.component(i), g=-gap)


@dataclass(frozen=True, eq=False)
class AgentSolution:
    agent: int
    p: TreeProcess
    Lambda: TreeProcess
    loading: TreeProcess
    htilde: BsdeSolution
    hcheck: BsdeSolution
    chain: MeanVarianceChain
    h: BsdeSolution
    ystar: TreeProcess
    zstar: TreeProcess
    sigma_pi: TreeProcess
    control: TreeProcess
    opponent_exposure: TreeProcess
    opponent_gap: TreeProcess
    gamma: float
    z0: float

    @property
    def lambda_star(self):
        return self.chain.lambda_star

    @property
    def d_star(self):
        return self.chain.d_star

    @property
    def value(self):
        return self.chain.value

    def feedback(self, k, Z):
        """Optimal sigma*pi at step k as a function of the current relative wealth Z."""
        u = -(self.h.eta[k] + self.loading[k] * (Z + self.h.h[k]))
        return self.opponent_exposure[k] + u


def best_response(game: ValidatedGame, i: int, profile: TreeProcess, factors: MarketFactors | None = None) -> AgentSolution:
    """Optimal mean-variance strategy of agent ``i`` against ``profile`` (amounts invested).

    The agent's own column of ``profile`` is ignored.
    """
    factors = factors or market_factors(game)
    if not factors.feasible[i]:
        raise Infeasible(f"agent {i + 1}: every mean target is not attainable (feasibility integral 0)")
    exposure, gap = competition_terms(game, i, profile)
    htilde = solve_linear_bsde(game.driver, 0.0, a=-game.r, b=-game.rho.component(i), g=-gap)
    p = factors.p.p.component(i)
    hcheck = BsdeSolution(factors.hcheck.h.component(i), factors.hcheck.eta.component(i))
    p0, hc0 = float(factors.p0[i]), float(factors.hcheck0[i])
    chain = lagrange_and_mean(p0, hc0, float(htilde.h0), float(game.z[i]), float(game.gamma[i]))
    dl = chain.d_minus_lambda
    h = BsdeSolution(htilde.h + dl * hcheck.h, htilde.eta + dl * hcheck.eta)
    y0 = p0 * (game.z[i] + h.h0)
    ystar = y0 * factors.deflator.component(i)
    wealth_gap = ystar / p                      # Z* + h
    zstar = wealth_gap - h.h
    loading = factors.p.loading.component(i)
    u = -(h.eta + loading * wealth_gap.truncate(game.driver.N))
    sigma_pi = exposure + u
    control = sigma_pi / game.sigma.component(i)
    return AgentSolution(
        agent=i,
        p=p,
        Lambda=factors.p.Lambda.component(i),
        loading=loading,
        htilde=htilde,
        hcheck=hcheck,
        chain=chain,
        h=h,
        ystar=ystar,
        zstar=zstar,
        sigma_pi=sigma_pi,
        control=control,
        opponent_exposure=exposure,
        opponent_gap=gap,
        gamma=float(game.gamma[i]),
        z0=float(game.z[i]),
    )


def reassemble_h(game: ValidatedGame, sol: AgentSolution, tol=REASSEMBLY_TOL) -> BsdeSolution:
    """h = h_tilde + (d* - lambda*) h_check, checked against its own BSDE with terminal -(d* - lambda*)."""
    dl = sol.chain.d_minus_lambda
    h = BsdeSolution(sol.htilde.h + dl * sol.hcheck.h, sol.htilde.eta + dl * sol.hcheck.eta)
    resid = scheme_residual(
        h, terminal=-dl, a=-game.r, b=-game.rho.component(sol.agent), g=-sol.opponent_gap
    )
    scale = max(1.0, h.h.sup_norm())
    if resid > tol * scale:
        raise ConsistencyViolation(f"reassembled h violates its BSDE by {resid:.3e}")
    return h


def stack_controls(solutions, driver):
    """Profile (amounts invested) assembled from per-agent solutions ordered by agent."""
    return TreeProcess.stack([s.control for s in sorted(solutions, key=lambda s: s.agent)])
