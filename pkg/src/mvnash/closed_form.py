"""Explicit formulas for deterministic coefficients and the mean-variance chain.

These double as oracles for the lattice solvers: piecewise-constant inputs are
integrated exactly, other callables with composite Simpson on a grid finer
than any lattice they are compared against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .errors import DenominatorDegenerate
from .lattice import PINNED_TOL, solve_linear_bsde
from .market import Constant, PiecewiseDeterministic, as_coefficient
from .tree import TreeProcess

SIMPSON_CELLS_PER_STEP = 16
FEASIBILITY_THRESHOLD = 1e-12


def integrate(fn, t0, t1, cells=1024):
    """Integral of a deterministic coefficient (or plain callable) over [t0, t1]."""
    if t1 <= t0:
        return 0.0
    if isinstance(fn, (Constant, PiecewiseDeterministic)):
        return fn.integral(t0, t1)
    cells = max(2, int(cells) + int(cells) % 2)
    t = np.linspace(t0, t1, cells + 1)
    return float(simpson(np.asarray(fn(t), dtype=float) * np.ones_like(t), x=t))


def p_closed(r, rho, t, T, cells=1024):
    """p(t) = exp(int_t^T (2 r - rho^2) ds)."""
    r, rho = as_coefficient(r), as_coefficient(rho)
    if isinstance(r, Constant) and isinstance(rho, Constant):
        return float(np.exp((2 * r.value - rho.value**2) * (T - t)))
    return float(np.exp(2 * integrate(r, t, T, cells) - integrate(lambda s: rho(s) ** 2, t, T, cells)))


def h_check_closed(r, t, T, cells=1024):
    """h_check(t) = -exp(-int_t^T r ds); independent of the risk premium."""
    r = as_coefficient(r)
    return float(-np.exp(-integrate(r, t, T, cells)))


@dataclass(frozen=True, eq=False)
class FeasibilityCertificate:
    psi: TreeProcess
    xi: TreeProcess
    integrals: np.ndarray
    feasible: np.ndarray
    threshold: float

    @property
    def all_feasible(self):
        return bool(np.all(self.feasible))


def feasibility_check(game, threshold=FEASIBILITY_THRESHOLD) -> FeasibilityCertificate:
    """Solve d psi = -r psi dt + xi dW, psi(T) = 1, and evaluate E sum |rho psi + xi|^2 dt per agent."""
    driver = game.driver
    sol = solve_linear_bsde(driver, 1.0, a=game.r)
    psi, xi = sol.h, sol.eta
    total = np.zeros(game.n)
    for k in range(driver.N):
        w = game.rho[k] * psi[k][:, None] + xi[k][:, None]
        total += driver.probabilities(k) @ (w**2) * driver.dt
    return FeasibilityCertificate(psi, xi, total, total > threshold, threshold)


@dataclass(frozen=True)
class MeanVarianceChain:
    lambda_star: float
    d_star: float
    variance: float           # minimal variance at d_star
    value: float              # d_star - gamma/2 * variance
    d_minus_lambda: float     # target b of the equivalent LQ problem E(Z(T) - b)^2
    pinned: bool = False      # mean fixed by the market; lambda* is unbounded


def is_pinned(p0, hcheck0, tol=PINNED_TOL):
    """True where 1 - p(0) h_check(0)^2 vanishes: every strategy yields the same E[Z(T)]."""
    return np.abs(1.0 - np.asarray(p0) * np.asarray(hcheck0) ** 2) <= tol


def frontier_variance(p0, hcheck0, htilde0, z, d):
    """Minimal Var(Z(T)) subject to E[Z(T)] = d."""
    denom = 1.0 - p0 * hcheck0**2
    if denom <= 0:
        raise DenominatorDegenerate(f"p(0) h_check(0)^2 = {p0 * hcheck0**2:.6g} >= 1")
    return p0 * (z + htilde0 + hcheck0 * np.asarray(d, dtype=float)) ** 2 / denom


def lagrange_multiplier(p0, hcheck0, htilde0, z, d):
    denom = p0 * hcheck0**2 - 1.0
    if denom >= 0:
        raise DenominatorDegenerate(f"p(0) h_check(0)^2 = {p0 * hcheck0**2:.6g} >= 1")
    return p0 * hcheck0 * (z + htilde0 + hcheck0 * d) / denom


def lagrange_and_mean(p0, hcheck0, htilde0, z, gamma) -> MeanVarianceChain:
    q = p0 * hcheck0**2
    if is_pinned(p0, hcheck0):
        # Only one mean is reachable, so the optimum is its zero-variance hedge.
        d_star = -(z + htilde0) / hcheck0
        return MeanVarianceChain(float("nan"), float(d_star), 0.0, float(d_star), float(d_star), True)
    if q >= 1.0:
        raise DenominatorDegenerate(f"p(0) h_check(0)^2 = {q:.6g} >= 1")
    d_star = (1.0 / q - 1.0) / gamma - (z + htilde0) / hcheck0
    lam = lagrange_multiplier(p0, hcheck0, htilde0, z, d_star)
    var = float(frontier_variance(p0, hcheck0, htilde0, z, d_star))
    return MeanVarianceChain(
        lambda_star=float(lam),
        d_star=float(d_star),
        variance=var,
        value=float(d_star - 0.5 * gamma * var),
        d_minus_lambda=float(d_star - lam),
    )
