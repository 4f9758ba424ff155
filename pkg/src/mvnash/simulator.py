"""Forward simulation of relative wealth and the Nash verification harness."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NashViolation, ValidationError
from .lattice import Moments, propagate_moments
from .market import ValidatedGame
from .single_agent import AgentSolution, MarketFactors, best_response, market_factors
from .tree import TreeProcess, sup_distance

TREE_EXACT = "tree"
EULER_MC = "euler"
DEFAULT_EPS_GRID = (0.1, -0.1, 0.01, -0.01)
BLOCK_SIZE = 4096


@dataclass(frozen=True)
class SimConfig:
    paths: int = 20000
    seed: int = 0
    scheme: str = TREE_EXACT
    antithetic: bool = True
    workers: int = 1
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if self.scheme not in (TREE_EXACT, EULER_MC):
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if self.paths < 1:
            raise ValidationError("paths must be >= 1")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")


@dataclass(frozen=True)
class ObjectiveEstimate:
    agent: int
    mean: float
    variance: float
    J_hat: float
    mean_se: float = 0.0
    variance_se: float = 0.0
    J_se: float = 0.0


def _exposures(game, k, sigma_pi, i):
    """Own volatility exposure and drift of Z_i at step k."""
    n, th = game.n, game.theta[i]
    others = np.delete(sigma_pi, i, axis=1)
    rho_o = np.delete(game.rho[k], i, axis=1)
    vol = sigma_pi[:, i] - th * others.sum(axis=1) / (n - 1)
    drift = game.rho[k][:, i] * sigma_pi[:, i] - th * (rho_o * others).sum(axis=1) / (n - 1)
    return vol, drift


def wealth_transition(game: ValidatedGame, i: int, profile: TreeProcess):
    """Transition of Z_i under an open-loop profile of invested amounts."""
    dt, sq = game.driver.dt, game.driver.sqrt_dt

    def step(k):
        vol, drift = _exposures(game, k, game.sigma[k] * profile[k], i)
        alpha = 1.0 + game.r[k] * dt
        return alpha, alpha, drift * dt + vol * sq, drift * dt - vol * sq

    return step


def wealth_moments(game: ValidatedGame, i: int, profile: TreeProcess) -> Moments:
    return propagate_moments(game.driver, game.z[i], wealth_transition(game, i, profile))


def tree_objective(game: ValidatedGame, i: int, profile: TreeProcess) -> ObjectiveEstimate:
    mom = wealth_moments(game, i, profile)
    mean, var = mom.mean(), mom.variance()
    return ObjectiveEstimate(i, float(mean), float(var), float(mean - 0.5 * game.gamma[i] * var))


def lq_cost(game, i, profile, target):
    """E[(Z_i(T) - target)^2] under ``profile``."""
    mom = wealth_moments(game, i, profile)
    return mom.second() - 2 * target * mom.mean() + target**2


def completion_of_squares(game: ValidatedGame, sol: AgentSolution, profile: TreeProcess):
    """Both sides of the completed-square identity for agent ``sol.agent``.

    Returns (cost gap, quadratic form): the LQ cost of ``profile`` minus the
    optimal cost p(0)(z + h(0))^2, and E sum_k kappa_k (u_k - u*_k(Z_k))^2, where
    u* is the optimal feedback at the state actually reached and kappa_k the
    one-step curvature of the value function. On the lattice they coincide.
    """
    i = sol.agent
    driver = game.driver
    dt, sq = driver.dt, driver.sqrt_dt
    target = sol.chain.d_minus_lambda
    mom = wealth_moments(game, i, profile)
    cost = mom.second() - 2 * target * mom.mean() + target**2
    optimal = float(sol.p.initial * (sol.z0 + sol.h.h0) ** 2)
    quad = 0.0
    for k in range(driver.N):
        up, down = driver.children(k)
        rho = game.rho[k][:, i]
        p_next = sol.p[k + 1]
        kappa = 0.5 * dt * (p_next[up] * (1 + rho * sq) ** 2 + p_next[down] * (1 - rho * sq) ** 2)
        vol, _ = _exposures(game, k, game.sigma[k] * profile[k], i)
        ell = sol.loading[k]
        a0 = vol + sol.h.eta[k] + ell * sol.h.h[k]
        quad += float(np.sum(kappa * (a0 * a0 * mom.mass[k] + 2 * a0 * ell * mom.m1[k] + ell * ell * mom.m2[k])))
    return cost - optimal, quad


def terminal_wealth_paths(game: ValidatedGame, profile: TreeProcess):
    """Z_i(T) on every path of a fullbinary driver, shape (2**N, n)."""
    driver = game.driver
    if not driver.full_binary:
        raise ValidationError("per-path output needs a fullbinary driver")
    z = game.z[None, :].copy()
    for k in range(driver.N):
        sp = game.sigma[k] * profile[k]
        vol = np.empty_like(sp)
        drift = np.empty_like(sp)
        for i in range(game.n):
            vol[:, i], drift[:, i] = _exposures(game, k, sp, i)
        base = (1 + game.r[k][:, None] * driver.dt) * z + drift * driver.dt
        z = driver.forward(k, base + vol * driver.sqrt_dt, base - vol * driver.sqrt_dt)
    return z


def _euler_block(game, profile, seed, block, size, antithetic, keep=False):
    driver = game.driver
    rng = np.random.default_rng([int(seed), int(block)])
    half = (size + 1) // 2 if antithetic else size
    g = rng.standard_normal((half, driver.N))
    if antithetic:
        g = np.concatenate([g, -g])[:size]
    dw = g * driver.sqrt_dt
    node = np.zeros(size, dtype=np.int64)
    z = np.broadcast_to(game.z, (size, game.n)).copy()
    for k in range(driver.N):
        sp = game.sigma[k][node] * profile[k][node]
        rho = game.rho[k][node]
        n, th = game.n, game.theta
        tot_sp = sp.sum(axis=1, keepdims=True)
        tot_rsp = (rho * sp).sum(axis=1, keepdims=True)
        vol = sp - th * (tot_sp - sp) / (n - 1)
        drift = rho * sp - th * (tot_rsp - rho * sp) / (n - 1)
        z = z + (game.r[k][node][:, None] * z + drift) * driver.dt + vol * dw[:, k : k + 1]
        upmove = (dw[:, k] > 0).astype(np.int64)
        node = 2 * node + upmove if driver.full_binary else node + upmove
    if keep:
        return z
    if antithetic:
        pairs = size // 2
        pair_mean = 0.5 * (z[:pairs] + z[pairs : 2 * pairs])
        rest = z[2 * pairs :]
        pm_sum = pair_mean.sum(axis=0) + rest.sum(axis=0)
        pm_sq = (pair_mean**2).sum(axis=0) + (rest**2).sum(axis=0)
        units = pairs + rest.shape[0]
    else:
        pm_sum, pm_sq, units = z.sum(axis=0), (z**2).sum(axis=0), size
    return np.stack([z.sum(axis=0), (z**2).sum(axis=0), (z**3).sum(axis=0), (z**4).sum(axis=0), pm_sum, pm_sq]), size, units


def _blocks(config):
    blocks = []
    remaining, b = config.paths, 0
    while remaining > 0:
        size = min(config.block_size, remaining)
        blocks.append((b, size))
        remaining -= size
        b += 1
    return blocks


def euler_terminal_paths(game: ValidatedGame, profile: TreeProcess, config: SimConfig):
    """Terminal Z per path and agent, shape (paths, n), in block order."""
    return np.concatenate(
        [_euler_block(game, profile, config.seed, b, size, config.antithetic, keep=True) for b, size in _blocks(config)]
    )


def euler_objectives(game: ValidatedGame, profile: TreeProcess, config: SimConfig):
    """Monte Carlo with Gaussian increments; strategies read at the node of the sign skeleton.

    Paths are split into fixed blocks with their own counter-keyed generator and
    reduced in block order, so results do not depend on the worker count.
    """
    blocks = _blocks(config)

    def run(item):
        return _euler_block(game, profile, config.seed, item[0], item[1], config.antithetic)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(item) for item in blocks]
    sums = np.zeros_like(results[0][0])
    count = units = 0
    for s, c, u in results:
        sums = sums + s
        count += c
        units += u
    m1, m2, m3, m4, pm_sum, pm_sq = sums / count
    var = np.maximum(m2 - m1**2, 0.0)
    unit_mean = pm_sum / units
    unit_var = np.maximum(pm_sq / units - unit_mean**2, 0.0)
    mean_se = np.sqrt(unit_var / units)
    c4 = m4 - 4 * m3 * m1 + 6 * m2 * m1**2 - 3 * m1**4
    var_se = np.sqrt(np.maximum(c4 - var**2, 0.0) / count)
    out = []
    for i in range(game.n):
        gam = game.gamma[i]
        J = m1[i] - 0.5 * gam * var[i]
        J_se = float(np.hypot(mean_se[i], 0.5 * gam * var_se[i]))
        out.append(ObjectiveEstimate(i, float(m1[i]), float(var[i]), float(J), float(mean_se[i]), float(var_se[i]), J_se))
    return out


def simulate_profile(game: ValidatedGame, profile: TreeProcess, config: SimConfig = SimConfig()):
    if config.scheme == TREE_EXACT:
        return [tree_objective(game, i, profile) for i in range(game.n)]
    return euler_objectives(game, profile, config)


def deviation_family(driver, seed=0, n_random=8, epochs=4):
    """Unit-norm perturbation directions: +-1 time bumps on each epoch plus seeded random ones.

    Random directions are path functions on a fullbinary driver and node
    functions on a recombining one. Each is normalised to E sum delta^2 dt = 1.
    """
    out = []
    parts = np.array_split(np.arange(driver.N), min(epochs, driver.N))
    for e, steps in enumerate(parts):
        for sign in (1.0, -1.0):
            vals = [np.full(driver.n_nodes(k), sign if k in steps else 0.0) for k in range(driver.N)]
            out.append((f"bump{e}{'+' if sign > 0 else '-'}", vals))
    rng = np.random.default_rng([int(seed), 0xDE7])
    kind = "path" if driver.full_binary else "node"
    for j in range(n_random):
        out.append((f"{kind}{j}", [rng.standard_normal(driver.n_nodes(k)) for k in range(driver.N)]))
    family = []
    for name, vals in out:
        norm = np.sqrt(sum(float(driver.probabilities(k) @ (v * v)) for k, v in enumerate(vals)) * driver.dt)
        family.append((name, TreeProcess(driver, [v / norm for v in vals])))
    return family


def perturb(profile: TreeProcess, i: int, delta: TreeProcess, eps: float) -> TreeProcess:
    vals = []
    for k, v in enumerate(profile.values):
        w = v.copy()
        w[:, i] += eps * delta[k]
        vals.append(w)
    return TreeProcess(profile.driver, vals)


@dataclass(frozen=True)
class DeviationCheck:
    agent: int
    deviation: str
    eps: float
    J_profile: float
    J_deviation: float

    @property
    def gain(self):
        return self.J_deviation - self.J_profile


@dataclass(frozen=True)
class VerificationReport:
    passed: bool
    checks: tuple
    best_response_gaps: tuple
    max_gain: float
    slack: float
    br_tol: float
    note: str = "sampled certificate: finitely many deviation directions, not a proof"
    failures: tuple = field(default=())

    def to_dict(self):
        return {
            "passed": self.passed,
            "note": self.note,
            "deviations_checked": len(self.checks),
            "max_gain": self.max_gain,
            "slack": self.slack,
            "best_response_gaps": list(self.best_response_gaps),
            "best_response_tol": self.br_tol,
            "failures": [
                {"agent": f.agent + 1, "deviation": f.deviation, "eps": f.eps, "gain": f.gain} for f in self.failures
            ],
        }


def verify_nash(
    game: ValidatedGame,
    profile: TreeProcess,
    config: SimConfig = SimConfig(),
    deviations=None,
    eps_grid=DEFAULT_EPS_GRID,
    factors: MarketFactors | None = None,
    slack=1e-9,
    br_tol=1e-6,
    raise_on_failure=False,
) -> VerificationReport:
    """Check that no sampled unilateral deviation improves any agent's objective.

    With the tree scheme objectives are exact, so ``slack`` is a relative
    solver tolerance; with the Euler scheme it is replaced by 3 standard errors.
    """
    factors = factors or market_factors(game)
    family = deviations if deviations is not None else deviation_family(game.driver, config.seed)

    def per_agent(i):
        base = _objective(game, i, profile, config)
        rows = []
        for name, delta in family:
            for eps in eps_grid:
                est = _objective(game, i, perturb(profile, i, delta, eps), config)
                rows.append((DeviationCheck(i, name, float(eps), base.J_hat, est.J_hat), base, est))
        br = best_response(game, i, profile, factors)
        gap = sup_distance(br.control, profile.component(i))
        return rows, gap

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(per_agent, range(game.n)))
    else:
        results = [per_agent(i) for i in range(game.n)]

    checks, failures, gaps = [], [], []
    max_gain = -np.inf
    for rows, gap in results:
        gaps.append(gap)
        for chk, base, est in rows:
            checks.append(chk)
            if config.scheme == TREE_EXACT:
                allowed = slack * (1.0 + abs(base.J_hat))
            else:
                allowed = 3.0 * np.hypot(base.J_se, est.J_se)
            max_gain = max(max_gain, chk.gain)
            if chk.gain > allowed:
                failures.append(chk)
    scale = max(1.0, profile.sup_norm())
    br_ok = all(g <= br_tol * scale for g in gaps)
    passed = not failures and br_ok
    report = VerificationReport(
        passed=passed,
        checks=tuple(checks),
        best_response_gaps=tuple(float(g) for g in gaps),
        max_gain=float(max_gain),
        slack=float(slack),
        br_tol=float(br_tol),
        failures=tuple(failures),
    )
    if raise_on_failure and not passed:
        if failures:
            f = max(failures, key=lambda c: c.gain)
            raise NashViolation(f.agent + 1, f.deviation, f.eps, f.gain)
        worst = int(np.argmax(gaps))
        raise NashViolation(worst + 1, "best-response", 0.0, gaps[worst])
    return report


def _objective(game, i, profile, config):
    if config.scheme == TREE_EXACT:
        return tree_objective(game, i, profile)
    return euler_objectives(game, profile, config)[i]


def quadratic_exponent(game, i, profile, delta, eps_values=(0.02, 0.04, 0.08)):
    """Slope of log(J(profile) - J(profile + eps delta)) against log(eps)."""
    base = tree_objective(game, i, profile).J_hat
    losses = [base - tree_objective(game, i, perturb(profile, i, delta, e)).J_hat for e in eps_values]
    slope = np.polyfit(np.log(eps_values), np.log(losses), 1)[0]
    return float(slope), losses
