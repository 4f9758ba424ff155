"""Equilibrium assembly and classification for the competitive game.

Each agent's best response has sigma_i pi_i = theta (sigma pi)^_i - phi_i where
phi_i = eta~_i + c_i h~_i(0) + f_i. Solving these n linear relations gives the
profile in closed form; substituting it into the opponent-gap BSDEs couples the
h~_i into one vector BSDE with an anticipated initial value.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .closed_form import is_pinned
from .errors import FixedPointViolation, MarginalCase, NotMarginal, ValidationError
from .lattice import (
    AnticipatedSolution,
    BsdeSolution,
    LinearSystemVerdict,
    classify_linear_system,
    gamma_representation,
    propagate_moments,
    solve_anticipated_bsde,
)
from .market import ValidatedGame
from .single_agent import MarketFactors, best_response, market_factors, solve_htilde
from .tree import TreeProcess, sup_distance

UNIQUE = "Unique"
INFINITE = "InfinitelyMany"
NONE = "None"
UNDECIDED = "Undecided"

ZERO_TOL = 1e-8          # relative band for "Phi = 0", "Xi = 0"
FIXED_POINT_TOL = 1e-8
MARGINAL_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class PhiComponents:
    c: TreeProcess          # (n,), -eta_check / h_check(0)
    f: TreeProcess          # (n,)
    phi: TreeProcess | None
    Phi: TreeProcess | None


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    variant: str            # "usual" | "marginal"
    A: TreeProcess
    B: TreeProcess
    C: TreeProcess
    F: TreeProcess
    M: TreeProcess | None = None
    solution: AnticipatedSolution | None = None

    @property
    def K(self):
        return None if self.solution is None else self.solution.K

    @property
    def D(self):
        return None if self.solution is None else self.solution.D

    @property
    def Gamma(self):
        return None if self.solution is None else self.solution.flow


@dataclass(frozen=True, eq=False)
class EquilibriumReport:
    classification: str
    case: str
    psi: float
    gamma_hat: float
    profiles: tuple = ()            # ((label, TreeProcess of invested amounts), ...)
    system: SystemMatrices | None = None
    verdict: LinearSystemVerdict | None = None
    witness: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    family: dict = field(default_factory=dict)

    @property
    def profile(self):
        """The representative profile: the unique one, or the labelled canonical choice."""
        return self.profiles[0][1] if self.profiles else None

    def to_dict(self):
        out = {
            "classification": self.classification,
            "case": self.case,
            "psi": float(self.psi),
            "gamma_hat": float(self.gamma_hat),
            "thresholds": dict(self.thresholds),
            "diagnostics": _plain(self.diagnostics),
        }
        if self.witness:
            out["witness"] = _plain(self.witness)
        if self.family:
            out["family"] = _plain(self.family)
        out["profiles"] = [label for label, _ in self.profiles]
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def is_marginal(game: ValidatedGame, atol=MARGINAL_ATOL):
    return bool(np.all(np.abs(game.theta - 1.0) <= atol))


def phi_components(game: ValidatedGame, factors: MarketFactors, htilde: BsdeSolution | None = None) -> PhiComponents:
    """c_i, f_i and, when h~ is given, phi_i and Phi = sum_i phi_i on steps 0..N-1.

    For an agent whose mean is pinned by the market, Y* vanishes and f_i keeps
    only the hedge of the target -(z_i + h~_i(0)) / h_check_i(0).
    """
    N = game.driver.N
    hc0 = factors.hcheck0
    p0 = factors.p0
    eta_check = factors.hcheck.eta
    pinned = is_pinned(p0, hc0)
    coef = -game.z / hc0 + np.where(pinned, 0.0, 1.0 / (game.gamma * p0 * hc0**2))
    y_over_p = (factors.deflator / factors.p.p).truncate(N)
    y0 = np.where(pinned, 0.0, 1.0 / (game.gamma * hc0))
    c_vals, f_vals = [], []
    for k in range(N):
        c_vals.append(-eta_check[k] / hc0)
        f_vals.append(coef * eta_check[k] + factors.p.loading[k] * y0 * y_over_p[k])
    c = TreeProcess(game.driver, c_vals)
    f = TreeProcess(game.driver, f_vals)
    if htilde is None:
        return PhiComponents(c, f, None, None)
    h0 = np.asarray(htilde.h0, dtype=float)
    phi = TreeProcess(game.driver, [htilde.eta[k] + c[k] * h0 + f[k] for k in range(N)])
    Phi = phi.map(lambda v: v.sum(axis=-1))
    return PhiComponents(c, f, phi, Phi)


def coupling_matrix(game: ValidatedGame):
    """M_ij per node: the opponent gap of agent i is g_i = -theta_i sum_j M_ij phi_j."""
    n, th = game.n, game.theta
    psi = game.psi
    t = 1.0 / (n - 1 + th)
    vals = []
    for rho in game.rho.values:
        diff = rho[:, None, :] - rho[:, :, None]            # [node, i, j] = rho_j - rho_i
        S = (n - 1) * np.einsum("nij,j->ni", diff, th * t)
        vals.append(t[None, None, :] * (S[:, :, None] / ((n - 1) * (1 - psi)) + diff))
    return TreeProcess(game.driver, vals)


def _rate_matrix(game):
    eye = np.eye(game.n)
    return game.r.map(lambda r: -r[:, None, None] * eye)


def assemble_usual(game: ValidatedGame, factors: MarketFactors | None = None) -> SystemMatrices:
    """A = -r I, B = theta M - diag(rho), C_ij = theta_i M_ij c_j, F_i = theta_i sum_j M_ij f_j."""
    psi = game.psi
    if not 0.0 <= psi <= 1.0 + 1e-12:
        raise ValidationError(f"competition index {psi} outside [0, 1]")
    if is_marginal(game):
        raise MarginalCase("all theta_i = 1: use the marginal system")
    factors = factors or market_factors(game)
    comp = phi_components(game, factors)
    M = coupling_matrix(game)
    th = game.theta
    B, C, F = [], [], []
    for k in range(game.driver.N):
        tm = th[None, :, None] * M[k]
        B.append(tm - game.rho[k][:, :, None] * np.eye(game.n))
        C.append(tm * comp.c[k][:, None, :])
        F.append(np.einsum("nij,nj->ni", tm, comp.f[k]))
    d = game.driver
    return SystemMatrices("usual", _rate_matrix(game), TreeProcess(d, B), TreeProcess(d, C), TreeProcess(d, F), M)


def usual_profile(game: ValidatedGame, phi: TreeProcess) -> TreeProcess:
    """Invested amounts solving sigma_i pi_i - theta_i/(n-1) sum_{j!=i} sigma_j pi_j = -phi_i."""
    n, th = game.n, game.theta
    t = (n - 1) / (n - 1 + th)
    scale = 1.0 / (1.0 - game.psi)
    vals = []
    for k in range(game.driver.N):
        total = -scale * (phi[k] * t).sum(axis=-1, keepdims=True)   # sum_j sigma_j pi_j
        sp = th / (n - 1 + th) * total - t * phi[k]
        vals.append(sp / game.sigma[k])
    return TreeProcess(game.driver, vals)


def check_fixed_point(game, profile, factors, tol=FIXED_POINT_TOL, workers=1):
    """Sup-norm gap between each agent's best response and its own column; raises on failure."""

    def gap(i):
        br = best_response(game, i, profile, factors)
        return sup_distance(br.control, profile.component(i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            gaps = list(pool.map(gap, range(game.n)))
    else:
        gaps = [gap(i) for i in range(game.n)]
    scale = max(1.0, profile.sup_norm())
    for i, g in enumerate(gaps):
        if g > tol * scale:
            raise FixedPointViolation(i + 1, g)
    return gaps


def construct_profile(game, htilde: BsdeSolution, factors=None, tol=FIXED_POINT_TOL, check=True, workers=1):
    factors = factors or market_factors(game)
    comp = phi_components(game, factors, htilde)
    profile = usual_profile(game, comp.phi)
    gaps = check_fixed_point(game, profile, factors, tol, workers) if check else None
    return profile, comp, gaps


def correspondence_gap(game, htilde: BsdeSolution, profile: TreeProcess):
    """Sup-norm distance between each agent's h~ re-solved from ``profile`` and the system solution."""
    worst = 0.0
    for i in range(game.n):
        sol = solve_htilde(game, i, profile)
        worst = max(worst, sup_distance(sol.h, htilde.h.component(i)), sup_distance(sol.eta, htilde.eta.component(i)))
    return worst


def _thresholds(tol, rel_threshold):
    return {"singular_rel": rel_threshold, "zero_rel": tol, "fixed_point": FIXED_POINT_TOL}


def kernel_samples(verdict: LinearSystemVerdict):
    """Kernel coefficient choices: zero, then +-1 on each basis vector."""
    out = [("pinv", verdict.solution)]
    for b in range(verdict.kernel.shape[1]):
        for s in (1.0, -1.0):
            out.append((f"kernel{b}{'+' if s > 0 else '-'}", verdict.solution + s * verdict.kernel[:, b]))
    return out


def classify_usual(game, factors=None, tol=ZERO_TOL, rel_threshold=1e-8, picard=True, workers=1) -> EquilibriumReport:
    factors = factors or market_factors(game)
    system = assemble_usual(game, factors)
    sol = solve_anticipated_bsde(system.A, system.B, system.C, system.F, rel_threshold=rel_threshold, picard=picard)
    system = SystemMatrices(system.variant, system.A, system.B, system.C, system.F, system.M, sol)
    verdict = sol.verdict
    diag = {
        "singular_values": verdict.singular_values,
        "linear_residual": verdict.residual,
        "picard_converged": sol.picard_converged,
        "picard_iterations": sol.picard_iterations,
        "max_contraction_ratio": sol.max_contraction_ratio,
        "horizon_bound": sol.horizon_bound,
        "K_norm": float(np.linalg.norm(sol.K, 2)),
    }
    common = dict(case="usual", psi=game.psi, gamma_hat=game.gamma_hat, system=system, verdict=verdict,
                  thresholds=_thresholds(tol, rel_threshold))
    if verdict.kind == "none":
        witness = {"reason": "D is not in the image of I - K", "residual": verdict.residual}
        return EquilibriumReport(NONE, diagnostics=diag, witness=witness, **common)
    if verdict.kind == "unique":
        profile, comp, gaps = construct_profile(game, sol.solution, factors, workers=workers)
        diag["htilde0"] = sol.h0
        diag["best_response_gaps"] = gaps
        diag["correspondence_gap"] = correspondence_gap(game, sol.solution, profile)
        if sol.picard_h0 is not None:
            diag["gamma_vs_picard"] = float(np.max(np.abs(sol.picard_h0 - sol.h0)))
        return EquilibriumReport(UNIQUE, profiles=(("unique", profile),), diagnostics=diag, **common)
    profiles = []
    gaps_all = {}
    for label, x in kernel_samples(verdict):
        h = gamma_representation(game.driver, sol.flow, system.C, system.F, x, system.A, system.B)
        profile, _, gaps = construct_profile(game, h, factors, workers=workers)
        profiles.append((label, profile))
        gaps_all[label] = gaps
    diag["best_response_gaps"] = gaps_all
    family = {"kind": "affine", "particular": verdict.solution, "kernel_basis": verdict.kernel.T,
              "canonical": "pseudoinverse representative (a choice, not a claim)"}
    return EquilibriumReport(INFINITE, profiles=tuple(profiles), diagnostics=diag, family=family, **common)


def classify_system(K, D, rel_threshold=1e-8) -> LinearSystemVerdict:
    """Classify (I - K) x = D directly, for injected or externally built systems."""
    return classify_linear_system(K, D, rel_threshold)


def assemble_marginal(game: ValidatedGame, chi: TreeProcess, factors: MarketFactors | None = None) -> SystemMatrices:
    """Primed system for theta = 1: B'_ij = (rho_j - rho_i)/n off the diagonal, -rho_i on it.

    C'_ij = (rho_j - rho_i)/n c_j, F'_i = sum_{j!=i} (rho_j - rho_i)/n f_j - sum_{j!=i} (rho_j - rho_i)/(n-1) chi.
    """
    if not is_marginal(game):
        raise NotMarginal("the marginal system needs theta_i = 1 for every agent")
    factors = factors or market_factors(game)
    comp = phi_components(game, factors)
    n = game.n
    B, C, F = [], [], []
    for k in range(game.driver.N):
        rho = game.rho[k]
        diff = rho[:, None, :] - rho[:, :, None]          # zero diagonal
        B.append(diff / n - rho[:, :, None] * np.eye(n))
        C.append(diff / n * comp.c[k][:, None, :])
        chi_k = np.broadcast_to(np.asarray(chi[k], dtype=float), rho.shape[:1])
        F.append(np.einsum("nij,nj->ni", diff / n, comp.f[k]) - diff.sum(axis=2) / (n - 1) * chi_k[:, None])
    d = game.driver
    return SystemMatrices("marginal", _rate_matrix(game), TreeProcess(d, B), TreeProcess(d, C), TreeProcess(d, F))


def marginal_profile(game: ValidatedGame, phi: TreeProcess, chi: TreeProcess) -> TreeProcess:
    """sigma_i pi_i = chi - (n-1)/n phi_i."""
    n = game.n
    return TreeProcess(
        game.driver,
        [(np.asarray(chi[k], dtype=float).reshape(-1, 1) - (n - 1) / n * phi[k]) / game.sigma[k] for k in range(game.driver.N)],
    )


def chi_family(driver):
    """Sample free processes: two constants plus one path-dependent choice."""
    zero = TreeProcess.zeros(driver, steps=driver.N)
    one = TreeProcess.constant(driver, 1.0, steps=driver.N)
    if driver.full_binary:
        vals = [np.maximum.accumulate(np.cumsum(driver.signs(k), axis=1), axis=1)[:, -1] * driver.sqrt_dt
                if k else np.zeros(1) for k in range(driver.N)]
        third = ("running_max", TreeProcess(driver, [np.maximum(v, 0.0) for v in vals]))
    else:
        third = ("brownian", TreeProcess(driver, [driver.brownian(k) for k in range(driver.N)]))
    return [("chi=0", zero), ("chi=1", one), third]


def xi_process(factors: MarketFactors, N):
    """Xi_i = eta_check_i + loading_i h_check_i on steps 0..N-1."""
    return TreeProcess(factors.p.p.driver, [factors.hcheck.eta[k] + factors.p.loading[k] * factors.hcheck.h[k] for k in range(N)])


def _dispersion(driver, transition):
    """Standard deviation across paths of a forward additive functional started at 0."""
    mom = propagate_moments(driver, 0.0, transition)
    return float(np.sqrt(mom.variance()))


def criterion_homogeneous(game):
    """Lattice form of the path-cancellation test: spread of log prod (1 - rho eps sqrt dt)/(1 + r dt).

    Zero exactly when the deflator is the same constant on every terminal node.
    """
    d = game.driver
    rho = [v[:, 0] for v in game.rho.values]

    def step(k):
        disc = np.log1p(game.r[k] * d.dt)
        return 1.0, 1.0, np.log1p(-rho[k] * d.sqrt_dt) - disc, np.log1p(rho[k] * d.sqrt_dt) - disc

    return _dispersion(d, step)


def criterion_deterministic(game, factors):
    """Spread across paths of int q (rho_bar eta' + G) ds + int q eta' dW on the lattice."""
    d = game.driver
    n = game.n
    y = (factors.deflator / factors.p.p) * (1.0 / (game.gamma * factors.hcheck0))
    q = np.cumprod([1.0] + [1.0 / (1.0 + float(game.r[k][0]) * d.dt) for k in range(d.N)])

    def step(k):
        rho = game.rho[k]
        ry = rho * y[k]
        eta_p = ry.sum(axis=1)
        diff = rho[:, None, :] - rho[:, :, None]
        G = np.einsum("nij,nj->n", diff / n, ry)
        drift = q[k] * (rho.mean(axis=1) * eta_p + G) * d.dt
        vol = q[k] * eta_p * d.sqrt_dt
        return 1.0, 1.0, drift + vol, drift - vol

    return _dispersion(d, step)


def _phi_scale(comp):
    return max(1.0, max(float(np.max(np.abs(v), initial=0.0)) for v in comp.phi.values))


def solve_marginal(game, chi, factors, rel_threshold=1e-8):
    system = assemble_marginal(game, chi, factors)
    sol = solve_anticipated_bsde(system.A, system.B, system.C, system.F, rel_threshold=rel_threshold, picard=False)
    system = SystemMatrices(system.variant, system.A, system.B, system.C, system.F, None, sol)
    if sol.solution is None:
        return system, None
    return system, phi_components(game, factors, sol.solution)


def classify_marginal(game, chi=None, factors=None, tol=ZERO_TOL, rel_threshold=1e-8, workers=1) -> EquilibriumReport:
    """Theta = 1 for everyone: equilibria exist iff Phi = sum_i phi_i vanishes, for the given chi.

    Under homogeneous risk premia or deterministic coefficients Phi does not
    depend on chi, so the verdict is decided by any one chi. Otherwise the
    result is Undecided and carries the Phi residual of each chi tried.
    ``chi`` may be a TreeProcess or a list of (label, TreeProcess); default is
    the three-member sample family.
    """
    if not is_marginal(game):
        raise NotMarginal("the marginal classification needs theta_i = 1 for every agent")
    factors = factors or market_factors(game)
    d = game.driver
    family = chi_family(d) if chi is None else ([("chi", chi)] if isinstance(chi, TreeProcess) else list(chi))
    homogeneous = game.identical_sharpe(atol=1e-14)
    deterministic = game.deterministic_coefficients()
    decidable = homogeneous or deterministic

    xi = xi_process(factors, d.N)
    diag = {
        "homogeneous_premia": homogeneous,
        "deterministic_coefficients": deterministic,
        "xi_norm": xi.sup_norm(),
        "criterion_homogeneous_spread": criterion_homogeneous(game) if homogeneous else None,
        "criterion_deterministic_spread": criterion_deterministic(game, factors) if deterministic else None,
    }
    common = dict(case="marginal", psi=game.psi, gamma_hat=game.gamma_hat, thresholds=_thresholds(tol, rel_threshold))

    residuals, profiles, gaps, system = {}, [], {}, None
    for label, c in family:
        system, comp = solve_marginal(game, c, factors, rel_threshold)
        if comp is None:
            residuals[label] = None
            continue
        resid = comp.Phi.sup_norm() / _phi_scale(comp)
        residuals[label] = resid
        if resid <= tol:
            profile = marginal_profile(game, comp.phi, c)
            gaps[label] = check_fixed_point(game, profile, factors, workers=workers)
            profiles.append((label, profile))
    diag["phi_residuals"] = residuals
    diag["best_response_gaps"] = gaps
    verdict = system.solution.verdict if system is not None else None

    if all(v is None for v in residuals.values()):
        witness = {"reason": "primed system I - K' has no consistent initial vector"}
        kind = NONE if decidable else UNDECIDED
        return EquilibriumReport(kind, system=system, verdict=verdict, diagnostics=diag, witness=witness, **common)
    if decidable:
        if profiles:
            fam = {"kind": "chi", "members": [label for label, _ in profiles],
                   "canonical": "chi = 0 representative (a choice, not a claim)"}
            return EquilibriumReport(INFINITE, profiles=tuple(profiles), system=system, verdict=verdict,
                                     diagnostics=diag, family=fam, **common)
        witness = {"reason": "Phi does not vanish", "phi_residual": min(v for v in residuals.values() if v is not None),
                   "xi_norm": diag["xi_norm"]}
        return EquilibriumReport(NONE, system=system, verdict=verdict, diagnostics=diag, witness=witness, **common)
    witness = {"reason": "coefficients are neither homogeneous nor deterministic; Phi depends on chi",
               "phi_residuals": residuals}
    return EquilibriumReport(UNDECIDED, profiles=tuple(profiles), system=system, verdict=verdict,
                             diagnostics=diag, witness=witness, **common)


def classify(game: ValidatedGame, factors=None, tol=ZERO_TOL, rel_threshold=1e-8, workers=1, chi=None) -> EquilibriumReport:
    """Dispatch on the competition index: usual case when Psi < 1, marginal otherwise."""
    factors = factors or market_factors(game)
    if is_marginal(game):
        return classify_marginal(game, chi, factors, tol, rel_threshold, workers)
    return classify_usual(game, factors, tol, rel_threshold, workers=workers)
