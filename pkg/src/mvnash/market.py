"""Market inputs, coefficient processes and their validation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BoundViolation, DegenerateSharpe, DriverMismatch, ValidationError
from .tree import TreeDriver, TreeProcess

SHARPE_ZERO_TOL = 1e-14


class CoefficientProcess:
    """A scalar coefficient evaluated on the tree, one value per node for steps 0..N-1."""

    deterministic = False
    path_dependent = False

    def evaluate(self, driver: TreeDriver) -> TreeProcess:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(CoefficientProcess):
    value: float
    deterministic = True

    def evaluate(self, driver):
        return TreeProcess.constant(driver, float(self.value))

    def integral(self, t0, t1):
        return float(self.value) * (t1 - t0)

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), float(self.value))


@dataclass(frozen=True)
class PiecewiseDeterministic(CoefficientProcess):
    """Right-continuous step function: ``values[i]`` on [breakpoints[i-1], breakpoints[i])."""

    breakpoints: tuple
    values: tuple
    deterministic = True

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.breakpoints) + 1:
            raise ValidationError("piecewise coefficient needs len(values) == len(breakpoints) + 1")
        if any(b1 <= b0 for b0, b1 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValidationError("piecewise breakpoints must be strictly increasing")

    def __call__(self, t):
        idx = np.searchsorted(self.breakpoints, np.asarray(t, dtype=float), side="right")
        return np.asarray(self.values)[idx]

    def evaluate(self, driver):
        t = driver.times()[:-1]
        vals = self(t)
        return TreeProcess(driver, [np.full(driver.n_nodes(k), vals[k]) for k in range(driver.N)])

    def integral(self, t0, t1):
        edges = [t0] + [b for b in self.breakpoints if t0 < b < t1] + [t1]
        return float(sum(self(0.5 * (a + b)) * (b - a) for a, b in zip(edges, edges[1:])))


@dataclass(frozen=True)
class TimeFunction(CoefficientProcess):
    """Deterministic coefficient given by a vectorised callable of time."""

    fn: Callable
    deterministic = True

    def __call__(self, t):
        return np.asarray(self.fn(np.asarray(t, dtype=float)), dtype=float) * np.ones_like(t, dtype=float)

    def evaluate(self, driver):
        vals = self(driver.times()[:-1])
        return TreeProcess(driver, [np.full(driver.n_nodes(k), vals[k]) for k in range(driver.N)])


@dataclass(frozen=True)
class NodeFunction(CoefficientProcess):
    """Coefficient measurable w.r.t. the node: ``rule(step, brownian_level) -> value``."""

    rule: Callable

    def evaluate(self, driver):
        vals = []
        for k in range(driver.N):
            w = driver.brownian(k)
            vals.append(np.broadcast_to(np.asarray(self.rule(k, w), dtype=float), w.shape))
        return TreeProcess(driver, vals)


@dataclass(frozen=True)
class NodeTable(CoefficientProcess):
    """Explicit node values: ``table[k][j]`` at step k after j up-moves."""

    table: tuple

    def __post_init__(self):
        object.__setattr__(self, "table", tuple(tuple(float(x) for x in row) for row in self.table))
        for k, row in enumerate(self.table):
            if len(row) != k + 1:
                raise ValidationError(f"node table row {k} must have {k + 1} entries, got {len(row)}")

    def evaluate(self, driver):
        if len(self.table) < driver.N:
            raise ValidationError(f"node table has {len(self.table)} rows; driver needs {driver.N}")
        return TreeProcess(
            driver, [np.asarray(self.table[k])[driver.up_counts(k)] for k in range(driver.N)]
        )


@dataclass(frozen=True)
class PathFunction(CoefficientProcess):
    """Coefficient depending on the whole path prefix: ``rule(step, signs) -> values``.

    ``signs`` is an (n_nodes, step) array of +-1 increments.
    """

    rule: Callable
    path_dependent = True

    def evaluate(self, driver):
        if not driver.full_binary:
            raise DriverMismatch("a path-function coefficient requires a fullbinary driver")
        vals = []
        for k in range(driver.N):
            s = driver.signs(k)
            vals.append(np.broadcast_to(np.asarray(self.rule(k, s), dtype=float), (s.shape[0],)))
        return TreeProcess(driver, vals)


def as_coefficient(value) -> CoefficientProcess:
    if isinstance(value, CoefficientProcess):
        return value
    return Constant(float(value))


@dataclass(frozen=True)
class MarketSpec:
    """Bond rate ``r``, per-asset appreciation ``mu`` and volatility ``sigma``.

    ``sigma_bound`` is the declared constant c with sigma in [1/c, c]; ``r_max``
    bounds the interest rate from above.
    """

    horizon: float
    r: CoefficientProcess
    mu: tuple
    sigma: tuple
    sigma_bound: float = 10.0
    r_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "r", as_coefficient(self.r))
        object.__setattr__(self, "mu", tuple(as_coefficient(m) for m in self.mu))
        object.__setattr__(self, "sigma", tuple(as_coefficient(s) for s in self.sigma))

    @property
    def n(self):
        return len(self.mu)

    def coefficients(self):
        return (self.r,) + self.mu + self.sigma


@dataclass(frozen=True)
class AgentSpec:
    theta: float
    gamma: float
    x0: float = 0.0


def competition_index(agents: Sequence[AgentSpec]):
    """Return (Psi, gamma_hat) = (sum theta_i/(n-1+theta_i), sum 1/gamma_i)."""
    n = len(agents)
    theta = np.array([a.theta for a in agents], dtype=float)
    gamma = np.array([a.gamma for a in agents], dtype=float)
    psi = float(np.sum(theta / (n - 1 + theta)))
    return psi, float(np.sum(1.0 / gamma))


def relative_initial_wealth(agents):
    """z_i = x_i - theta_i * mean of the other agents' initial wealth."""
    n = len(agents)
    x = np.array([a.x0 for a in agents], dtype=float)
    theta = np.array([a.theta for a in agents], dtype=float)
    others = (x.sum() - x) / (n - 1)
    return x - theta * others


@dataclass(frozen=True, eq=False)
class ValidatedGame:
    market: MarketSpec
    agents: tuple
    driver: TreeDriver
    r: TreeProcess          # scalar, steps 0..N-1
    mu: TreeProcess         # (n,)
    sigma: TreeProcess      # (n,)
    rho: TreeProcess        # (n,)
    theta: np.ndarray
    gamma: np.ndarray
    x0: np.ndarray
    z: np.ndarray
    sigma_bound: float
    r_max: float
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.agents)

    @property
    def psi(self):
        return competition_index(self.agents)[0]

    @property
    def gamma_hat(self):
        return competition_index(self.agents)[1]

    def identical_sharpe(self, atol=0.0):
        """All agents face the same risk premium process."""
        return all(np.all(np.abs(v - v[:, :1]) <= atol) for v in self.rho.values)

    def deterministic_coefficients(self, atol=0.0):
        """Interest rate and every risk premium are functions of time only."""
        return self.r.is_deterministic(atol) and self.rho.is_deterministic(atol)

    def with_agents(self, agents):
        return validate_market(self.market, agents, self.driver)


def validate_market(spec: MarketSpec, agents: Sequence[AgentSpec], driver: TreeDriver) -> ValidatedGame:
    """Evaluate all coefficients on the driver and check every declared bound.

    All violations are collected; the raised error is of the class of the first
    one and lists every message (``err.violations``).
    """
    violations = []

    def fail(cls, msg):
        violations.append((cls, msg))

    n = spec.n
    agents = tuple(agents)
    if n < 2:
        fail(ValidationError, f"need at least 2 assets/agents, got {n}")
    if len(spec.sigma) != n:
        fail(ValidationError, f"{len(spec.sigma)} volatilities for {n} assets")
    if len(agents) != n:
        fail(ValidationError, f"{len(agents)} agents for {n} assets")
    if not spec.horizon > 0:
        fail(BoundViolation, f"horizon must be positive, got {spec.horizon}")
    if abs(spec.horizon - driver.T) > 1e-12 * max(1.0, spec.horizon):
        fail(ValidationError, f"driver horizon {driver.T} differs from market horizon {spec.horizon}")
    if not spec.sigma_bound > 1:
        fail(BoundViolation, f"sigma_bound must exceed 1, got {spec.sigma_bound}")
    for i, a in enumerate(agents):
        if not 0.0 <= a.theta <= 1.0:
            fail(BoundViolation, f"agent {i + 1}: theta={a.theta} outside [0, 1]")
        if not a.gamma > 0:
            fail(BoundViolation, f"agent {i + 1}: gamma={a.gamma} must be positive")
    if not driver.full_binary and any(c.path_dependent for c in spec.coefficients()):
        fail(DriverMismatch, "path-function coefficient on a recombining driver")
    if violations:
        _raise(violations)

    r = spec.r.evaluate(driver)
    mu = TreeProcess.stack([m.evaluate(driver) for m in spec.mu])
    sigma = TreeProcess.stack([s.evaluate(driver) for s in spec.sigma])
    c = spec.sigma_bound
    for k in range(driver.N):
        if np.any(r[k] < 0) or np.any(r[k] > spec.r_max):
            fail(BoundViolation, f"interest rate outside [0, {spec.r_max}] at step {k}")
            break
    for k in range(driver.N):
        bad = (sigma[k] < 1.0 / c) | (sigma[k] > c)
        if np.any(bad):
            i = int(np.argwhere(bad)[0][1])
            fail(BoundViolation, f"sigma_{i + 1} outside [1/{c:g}, {c:g}] at step {k}")
            break
    if violations:
        _raise(violations)

    rho = (mu - r.map(lambda v: v[:, None])) / sigma
    for i in range(n):
        if rho.component(i).sup_norm() <= SHARPE_ZERO_TOL:
            fail(DegenerateSharpe, f"risk premium of asset {i + 1} vanishes identically")
    if rho.sup_norm() * driver.sqrt_dt >= 1.0:
        fail(
            BoundViolation,
            f"|rho|*sqrt(dt) = {rho.sup_norm() * driver.sqrt_dt:.3f} >= 1: driver too coarse "
            "for a positive pricing measure; increase steps",
        )
    if violations:
        _raise(violations)

    return ValidatedGame(
        market=spec,
        agents=agents,
        driver=driver,
        r=r,
        mu=mu,
        sigma=sigma,
        rho=rho,
        theta=np.array([a.theta for a in agents], dtype=float),
        gamma=np.array([a.gamma for a in agents], dtype=float),
        x0=np.array([a.x0 for a in agents], dtype=float),
        z=relative_initial_wealth(agents),
        sigma_bound=float(c),
        r_max=float(spec.r_max),
    )


def _raise(violations):
    cls = violations[0][0]
    err = cls("; ".join(msg for _, msg in violations))
    err.violations = [msg for _, msg in violations]
    raise err
