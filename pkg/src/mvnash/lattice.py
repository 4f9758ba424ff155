"""Backward induction for linear BSDEs on the lattice driver.

Generic scheme for dh = -(a h + b eta + g) dt + eta dW, h(T) = terminal::

    eta(k) = (h_up(k+1) - h_down(k+1)) / (2 sqrt(dt))
    (I - a(k) dt) h(k) = E_k[h(k+1)] + (b(k) eta(k) + g(k)) dt

On a binary tree the martingale representation is exact, so this recursion is
the exact solution of the discrete problem. With a = -r, b = -rho the update
reads h(k) = E^Q_k[h(k+1)] / (1 + r dt) + ..., where Q moves up with probability
(1 - rho sqrt(dt)) / 2, the lattice analogue of the Girsanov change of measure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundCheckFailed, DriverMismatch, PicardDiverged, SingularGamma, SingularStep
from .tree import TreeDriver, TreeProcess

SINGULAR_STEP_TOL = 1e-12
GAMMA_COND_LIMIT = 1e12
PINNED_TOL = 1e-10
RATIO_FLOOR = 1e-12   # steps below this are rounding noise, not contraction


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    h: TreeProcess      # steps 0..N
    eta: TreeProcess    # steps 0..N-1

    @property
    def h0(self):
        return self.h.initial

    @property
    def driver(self):
        return self.h.driver


def _values(coef, k):
    if coef is None:
        return None
    if isinstance(coef, TreeProcess):
        return coef[k]
    return np.asarray(coef, dtype=float)


def _is_matrix(coef_k, x):
    """A coefficient acts as a matrix when it carries two more axes than the node axis of x's trailing shape."""
    return coef_k.ndim >= 3 and coef_k.ndim == x.ndim + 1


def _apply(coef_k, x):
    if coef_k is None:
        return 0.0
    if _is_matrix(coef_k, x):
        return np.einsum("...ij,...j->...i", coef_k, x)
    if coef_k.ndim == 1 and x.ndim == 2:
        return coef_k[:, None] * x
    return coef_k * x


def _implicit_solve(a_k, rhs, dt, k):
    if a_k is None:
        return rhs
    if _is_matrix(a_k, rhs):
        n = a_k.shape[-1]
        lhs = np.eye(n) - a_k * dt
        lhs = np.broadcast_to(lhs, rhs.shape[:1] + (n, n))
        det = np.abs(np.linalg.det(lhs))
        if np.any(det < SINGULAR_STEP_TOL):
            raise SingularStep(f"I - a dt is singular at step {k}; reduce dt")
        return np.linalg.solve(lhs, rhs[..., None])[..., 0]
    factor = 1.0 - a_k * dt
    if factor.ndim == 1 and rhs.ndim == 2:
        factor = factor[:, None]
    if np.any(np.abs(factor) < SINGULAR_STEP_TOL):
        raise SingularStep(f"1 - a dt vanishes at step {k}; reduce dt")
    return rhs / factor


def _terminal_array(driver, terminal):
    m = driver.n_nodes(driver.N)
    terminal = np.asarray(terminal, dtype=float)
    if terminal.ndim >= 1 and terminal.shape[0] == m and m > 1:
        return terminal.copy()
    return np.broadcast_to(terminal, (m,) + terminal.shape).copy()


def solve_linear_bsde(driver: TreeDriver, terminal, a=None, b=None, g=None) -> BsdeSolution:
    """Solve dh = -(a h + b eta + g) dt + eta dW backward from ``terminal``.

    ``a`` and ``b`` may be scalars per node (acting componentwise) or matrix
    processes with shape (n, n) for vector systems; ``g`` matches h's shape.
    Any of them may be None (zero).
    """
    dt = driver.dt
    h = [None] * (driver.N + 1)
    eta = [None] * driver.N
    h[driver.N] = _terminal_array(driver, terminal)
    for k in range(driver.N - 1, -1, -1):
        nxt = h[k + 1]
        eta_k = driver.martingale_integrand(k, nxt)
        rhs = driver.expect(k, nxt) + _apply(_values(b, k), eta_k) * dt
        g_k = _values(g, k)
        if g_k is not None:
            rhs = rhs + g_k * dt
        h[k] = _implicit_solve(_values(a, k), rhs, dt, k)
        eta[k] = eta_k
    return BsdeSolution(TreeProcess(driver, h), TreeProcess(driver, eta))


def scheme_residual(sol: BsdeSolution, terminal=None, a=None, b=None, g=None):
    """Largest violation of the backward scheme (and terminal value, if given)."""
    driver = sol.driver
    dt = driver.dt
    worst = 0.0
    for k in range(driver.N):
        h_k, nxt, eta_k = sol.h[k], sol.h[k + 1], sol.eta[k]
        a_k = _values(a, k)
        lhs = h_k - _apply(a_k, h_k) * dt if a_k is not None else h_k
        rhs = driver.expect(k, nxt) + _apply(_values(b, k), eta_k) * dt
        g_k = _values(g, k)
        if g_k is not None:
            rhs = rhs + g_k * dt
        worst = max(worst, float(np.max(np.abs(lhs - rhs), initial=0.0)))
        mart = driver.martingale_integrand(k, nxt)
        worst = max(worst, float(np.max(np.abs(eta_k - mart), initial=0.0)) * driver.sqrt_dt)
    if terminal is not None:
        term = _terminal_array(driver, terminal)
        worst = max(worst, float(np.max(np.abs(sol.h.terminal - term), initial=0.0)))
    return worst


def _broadcast_rate(r_k, like):
    return r_k[:, None] if like.ndim == 2 and r_k.ndim == 1 else r_k


@dataclass(frozen=True, eq=False)
class PSolution:
    """Riccati pair (p, Lambda) with its reciprocal (p_check, Lambda_check).

    ``loading`` is the lattice feedback coefficient multiplying (Z + h) in the
    optimal control; it tends to Lambda/p + rho as dt -> 0.
    """

    p: TreeProcess
    Lambda: TreeProcess
    p_check: TreeProcess
    Lambda_check: TreeProcess
    loading: TreeProcess

    @property
    def p0(self):
        return self.p.initial


def solve_p_bsde(r: TreeProcess, rho: TreeProcess) -> PSolution:
    """Riccati BSDE through its reciprocal.

    p_check(k) = E_k[p_check(k+1) (1 - rho eps sqrt(dt))^2] / (1 + r dt)^2, the
    lattice version of E[exp(-2 int rho dW - int (2r + rho^2) ds) | F_t];
    p = 1/p_check and Lambda = -Lambda_check p^2. Works componentwise when rho
    carries an agent axis.
    """
    driver = rho.driver
    dt, sq = driver.dt, driver.sqrt_dt
    shape = rho.shape
    pc = [None] * (driver.N + 1)
    lc = [None] * driver.N
    load = [None] * driver.N
    pc[driver.N] = np.ones((driver.n_nodes(driver.N),) + shape)
    for k in range(driver.N - 1, -1, -1):
        up, down = driver.children(k)
        nxt = pc[k + 1]
        rho_k = rho[k]
        disc = 1.0 + _broadcast_rate(r[k], rho_k) * dt
        pu, pd = nxt[up], nxt[down]
        pc[k] = 0.5 * (pu * (1 - rho_k * sq) ** 2 + pd * (1 + rho_k * sq) ** 2) / disc**2
        lc[k] = (pu - pd) / (2 * sq)
        load[k] = -((1 - rho_k * sq) * pu - (1 + rho_k * sq) * pd) / (2 * sq * disc * pc[k])
    p_check = TreeProcess(driver, pc)
    p = p_check.map(lambda v: 1.0 / v)
    Lambda = TreeProcess(driver, [-lc[k] * p[k] ** 2 for k in range(driver.N)])
    return PSolution(p, Lambda, p_check, TreeProcess(driver, lc), TreeProcess(driver, load))


def riccati_residual(ps: PSolution, r: TreeProcess, rho: TreeProcess):
    """Per-step residual of the continuous Riccati driver evaluated on the lattice pair.

    Returns max_k |p(k) - E_k p(k+1) - f(p, Lambda) dt| / dt; it is O(sqrt(dt))
    because the lattice p solves the discrete control problem exactly rather
    than the continuous equation.
    """
    driver = ps.p.driver
    dt = driver.dt
    worst = 0.0
    for k in range(driver.N):
        p_k, lam = ps.p[k], ps.Lambda[k]
        rk = _broadcast_rate(r[k], p_k)
        f = (2 * rk - rho[k] ** 2) * p_k - 2 * rho[k] * lam - lam**2 / p_k
        res = p_k - driver.expect(k, ps.p[k + 1]) - f * dt
        worst = max(worst, float(np.max(np.abs(res))) / dt)
    return worst


def solve_h_check(r: TreeProcess, rho: TreeProcess, p: PSolution | None = None) -> BsdeSolution:
    """Solve dh = (r h + rho eta) dt + eta dW, h(T) = -1 (componentwise over agents).

    Equals -E^Q_t[prod 1/(1 + r dt)]; if ``p`` is given the product bound
    p(0) h(0)^2 <= 1 is enforced. Equality (up to PINNED_TOL) is the pinned-mean
    market, where the terminal state-price density is deterministic.
    """
    driver = rho.driver
    if rho.shape:
        a = TreeProcess(driver, [np.broadcast_to(-r[k][:, None], rho[k].shape) for k in range(driver.N)])
    else:
        a = -r
    sol = solve_linear_bsde(driver, -np.ones(rho.shape), a=a, b=-rho)
    if p is not None:
        prod = np.asarray(p.p0 * sol.h0**2)
        if np.any(prod > 1.0 + PINNED_TOL):
            raise BoundCheckFailed(f"p(0) h_check(0)^2 = {prod} > 1; refine the driver")
    return sol


@dataclass(frozen=True, eq=False)
class GammaFlow:
    """Fundamental matrix of the lattice flow dGamma = Gamma (A dt + B dW).

    Step factor (I - A dt)^{-1} (I + eps sqrt(dt) B) makes the flow the exact
    adjoint of the backward scheme. ``mass[k]`` holds the probability-weighted
    aggregate E[Gamma(k) 1_node]; ``gamma`` / ``gamma_inv`` are the pathwise
    flows, None when the flow is not node-measurable on a recombining driver.
    """

    mass: tuple
    resolvent: tuple
    gamma: TreeProcess | None
    gamma_inv: TreeProcess | None


def _matrix_steps(driver, A, n):
    for k in range(driver.N):
        A_k = np.broadcast_to(_values(A, k), (driver.n_nodes(k), n, n)) if A is not None else np.zeros((driver.n_nodes(k), n, n))
        yield k, np.linalg.inv(np.eye(n) - A_k * driver.dt)


def gamma_flow(A: TreeProcess, B: TreeProcess, cond_limit=GAMMA_COND_LIMIT) -> GammaFlow:
    driver = B.driver
    n = B.shape[-1]
    sq = driver.sqrt_dt
    eye = np.eye(n)
    mass = [np.broadcast_to(eye, (1, n, n)).copy()]
    resolvents = []
    path = [np.broadcast_to(eye, (1, n, n)).copy()]
    pathwise = True
    for k, res in _matrix_steps(driver, A, n):
        resolvents.append(res)
        B_k = np.broadcast_to(B[k], (driver.n_nodes(k), n, n))
        m_up = res @ (eye + sq * B_k)
        m_down = res @ (eye - sq * B_k)
        up, down = driver.children(k)
        nxt = np.zeros((driver.n_nodes(k + 1), n, n))
        np.add.at(nxt, up, 0.5 * mass[k] @ m_up)
        np.add.at(nxt, down, 0.5 * mass[k] @ m_down)
        mass.append(nxt)
        if pathwise:
            try:
                path.append(driver.forward(k, path[k] @ m_up, path[k] @ m_down, name="Gamma"))
            except DriverMismatch:
                pathwise = False
    gamma = gamma_inv = None
    if pathwise:
        conds = [np.linalg.cond(g) for g in path]
        worst = max(float(np.max(c)) for c in conds)
        if not np.isfinite(worst) or worst > cond_limit:
            raise SingularGamma(f"Gamma condition number {worst:.3e} exceeds {cond_limit:.1e}")
        gamma = TreeProcess(driver, path)
        gamma_inv = TreeProcess(driver, [np.linalg.inv(g) for g in path])
    return GammaFlow(tuple(mass), tuple(resolvents), gamma, gamma_inv)


def kd_matrices(flow: GammaFlow, C: TreeProcess | None, F: TreeProcess | None, dt: float):
    """K = E sum_k Gamma(k) (I - A dt)^{-1} C(k) dt and D likewise with F."""
    n = flow.mass[0].shape[-1]
    K = np.zeros((n, n))
    D = np.zeros(n)
    for k, res in enumerate(flow.resolvent):
        weight = flow.mass[k] @ res
        if C is not None:
            K += np.einsum("jab,jbc->ac", weight, np.broadcast_to(C[k], weight.shape)) * dt
        if F is not None:
            D += np.einsum("jab,jb->a", weight, np.broadcast_to(F[k], weight.shape[:2])) * dt
    return K, D


def small_horizon_bound(lipschitz, c_sup):
    """Largest T with int_0^T e^{beta s} c^2 ds < 1, beta = 16 (L^2 + 1)."""
    beta = 16.0 * (lipschitz**2 + 1.0)
    if c_sup <= 0:
        return np.inf
    return float(np.log1p(beta / c_sup**2) / beta)


def _sup_matrix_norm(proc):
    if proc is None:
        return 0.0
    if not isinstance(proc, TreeProcess):
        return float(np.linalg.norm(np.asarray(proc), 2))
    return max(float(np.max(np.linalg.norm(v, ord=2, axis=(-2, -1)), initial=0.0)) for v in proc.values)


@dataclass(frozen=True)
class LinearSystemVerdict:
    """Classification of (I - K) x = D."""

    kind: str                       # "unique" | "infinite" | "none"
    solution: np.ndarray            # unique solution or pseudoinverse representative
    kernel: np.ndarray              # columns span ker(I - K); empty when invertible
    singular_values: np.ndarray
    residual: float                 # ||(I-K) x - D|| for the returned x
    threshold: float


def classify_linear_system(K, D, rel_threshold=1e-8, residual_tol=1e-8):
    K = np.asarray(K, dtype=float)
    D = np.asarray(D, dtype=float)
    n = K.shape[0]
    M = np.eye(n) - K
    u, s, vt = np.linalg.svd(M)
    smax = float(s[0]) if s.size else 0.0
    cut = rel_threshold * max(smax, 1e-300)
    rank = int(np.sum(s > cut))
    if rank == n:
        x = np.linalg.solve(M, D)
        return LinearSystemVerdict("unique", x, np.zeros((n, 0)), s, float(np.linalg.norm(M @ x - D)), cut)
    s_inv = np.where(s > cut, 1.0 / np.where(s > cut, s, 1.0), 0.0)
    x = vt.T @ (s_inv * (u.T @ D))
    kernel = vt[rank:].T
    resid = float(np.linalg.norm(M @ x - D))
    scale = max(1.0, float(np.linalg.norm(D)))
    kind = "infinite" if resid <= residual_tol * scale else "none"
    return LinearSystemVerdict(kind, x, kernel, s, resid, cut)


@dataclass(frozen=True, eq=False)
class AnticipatedSolution:
    solution: BsdeSolution | None
    verdict: LinearSystemVerdict
    K: np.ndarray
    D: np.ndarray
    gamma_rep_h0: np.ndarray | None
    picard_h0: np.ndarray | None
    picard_iterations: int
    picard_converged: bool
    contraction_ratios: tuple
    lipschitz: float
    c_sup: float
    horizon_bound: float
    flow: GammaFlow = field(repr=False, default=None)

    @property
    def h0(self):
        return None if self.solution is None else self.solution.h0

    @property
    def max_contraction_ratio(self):
        return max(self.contraction_ratios) if self.contraction_ratios else 0.0


def _source(C, F, v, driver):
    if C is None:
        return F
    vals = []
    for k in range(driver.N):
        cv = np.einsum("...ij,j->...i", C[k], v)
        vals.append(cv if F is None else F[k] + cv)
    return TreeProcess(driver, vals)


def picard_iterate(A, B, C, F, tol=1e-10, max_iter=200, v0=None):
    """Fixed-point iteration v -> Y^v(0) for the anticipated BSDE.

    The first evaluation Y^{v0}(0) is the starting iterate; an iteration is one
    further application of the map. Returns (v, iterations, converged, ratios).
    """
    driver = B.driver
    n = B.shape[-1]
    zero = np.zeros(n)

    def phi(v):
        return solve_linear_bsde(driver, zero, a=A, b=B, g=_source(C, F, v, driver)).h0

    v = phi(zero if v0 is None else np.asarray(v0, dtype=float))
    prev_step = None
    ratios = []
    for it in range(1, max_iter + 1):
        nv = phi(v)
        step = float(np.linalg.norm(nv - v))
        if prev_step is not None and prev_step > RATIO_FLOOR * max(1.0, float(np.linalg.norm(v))):
            ratios.append(step / prev_step)
        v = nv
        if step <= tol:
            return v, it, True, tuple(ratios)
        if not np.all(np.isfinite(v)) or np.linalg.norm(v) > 1e100:
            break
        prev_step = step
    return v, max_iter, False, tuple(ratios)


def solve_anticipated_bsde(
    A,
    B: TreeProcess,
    C,
    F,
    tol=1e-10,
    max_iter=200,
    rel_threshold=1e-8,
    picard=True,
    strict_picard=False,
    lipschitz=None,
    c_sup=None,
) -> AnticipatedSolution:
    """Solve dh = -(A h + B eta + C h(0) + F) dt + eta dW, h(T) = 0, two ways.

    Gamma representation: K, D from the flow; when I - K is invertible,
    h(0) = (I - K)^{-1} D and h(t) = Gamma^{-1}(t) E_t[sum_{s>=t} Gamma(s) (I - A dt)^{-1} (C h(0) + F) dt].
    Picard: iterate v -> Y^v(0). A singular I - K is reported in ``verdict``
    (solution None) rather than raised; the caller decides what it means.
    ``lipschitz`` / ``c_sup`` default to the observed sup norms on the tree.
    """
    driver = B.driver
    n = B.shape[-1]
    flow = gamma_flow(A, B)
    K, D = kd_matrices(flow, C, F, driver.dt)
    verdict = classify_linear_system(K, D, rel_threshold)

    if lipschitz is None:
        lipschitz = max(1.0, _sup_matrix_norm(A), _sup_matrix_norm(B))
    if c_sup is None:
        c_sup = _sup_matrix_norm(C)
    bound = small_horizon_bound(lipschitz, c_sup)

    p_h0, p_it, p_ok, ratios = None, 0, False, ()
    if picard:
        p_h0, p_it, p_ok, ratios = picard_iterate(A, B, C, F, tol, max_iter)
        if not p_ok and strict_picard:
            raise PicardDiverged(f"Picard iteration did not converge in {max_iter} iterations")

    solution = None
    g_h0 = None
    if verdict.kind == "unique":
        g_h0 = verdict.solution
        solution = gamma_representation(driver, flow, C, F, g_h0, A, B)
    return AnticipatedSolution(
        solution=solution,
        verdict=verdict,
        K=K,
        D=D,
        gamma_rep_h0=g_h0,
        picard_h0=p_h0 if p_ok else None,
        picard_iterations=p_it,
        picard_converged=p_ok,
        contraction_ratios=ratios,
        lipschitz=float(lipschitz),
        c_sup=float(c_sup),
        horizon_bound=bound,
        flow=flow,
    )


def gamma_representation(driver, flow, C, F, h0, A=None, B=None) -> BsdeSolution:
    """Recover (h, eta) for a given consistent initial vector h0.

    Uses the pathwise flow when available; otherwise falls back to the backward
    scheme with source C h0 + F, which is the same object on the lattice.
    """
    source = _source(C, F, np.asarray(h0, dtype=float), driver)
    n = flow.mass[0].shape[-1]
    if flow.gamma is None:
        return solve_linear_bsde(driver, np.zeros(n), a=A, b=B, g=source)
    acc = [None] * (driver.N + 1)
    acc[driver.N] = np.zeros((driver.n_nodes(driver.N), n))
    for k in range(driver.N - 1, -1, -1):
        weight = flow.gamma[k] @ flow.resolvent[k]
        src = np.zeros((driver.n_nodes(k), n)) if source is None else np.broadcast_to(source[k], (driver.n_nodes(k), n))
        acc[k] = np.einsum("jab,jb->ja", weight, src) * driver.dt + driver.expect(k, acc[k + 1])
    h = [np.einsum("jab,jb->ja", flow.gamma_inv[k], acc[k]) for k in range(driver.N + 1)]
    h[driver.N] = np.zeros_like(h[driver.N])
    eta = [driver.martingale_integrand(k, h[k + 1]) for k in range(driver.N)]
    return BsdeSolution(TreeProcess(driver, h), TreeProcess(driver, eta))


@dataclass(frozen=True, eq=False)
class Moments:
    """Probability-weighted node moments of a forward process X.

    ``mass[k]``, ``m1[k]``, ``m2[k]`` hold P(node), E[X 1_node], E[X^2 1_node].
    Exact on either driver layout, even when X itself is path dependent.
    """

    mass: tuple
    m1: tuple
    m2: tuple

    def mean(self, k=-1):
        return float(np.sum(self.m1[k]))

    def second(self, k=-1):
        return float(np.sum(self.m2[k]))

    def variance(self, k=-1):
        return max(self.second(k) - self.mean(k) ** 2, 0.0)


def propagate_moments(driver: TreeDriver, x0, transition) -> Moments:
    """Propagate X(k+1) = alpha_eps X(k) + beta_eps forward.

    ``transition(k)`` returns (alpha_up, alpha_down, beta_up, beta_down) as
    node arrays (or scalars) for step k.
    """
    mass = [np.ones(1)]
    m1 = [np.full(1, float(x0))]
    m2 = [np.full(1, float(x0) ** 2)]
    for k in range(driver.N):
        au, ad, bu, bd = (np.broadcast_to(np.asarray(v, dtype=float), (driver.n_nodes(k),)) for v in transition(k))
        up, down = driver.children(k)
        m = driver.n_nodes(k + 1)
        nm, n1, n2 = np.zeros(m), np.zeros(m), np.zeros(m)
        for idx, a, b in ((up, au, bu), (down, ad, bd)):
            np.add.at(nm, idx, 0.5 * mass[k])
            np.add.at(n1, idx, 0.5 * (a * m1[k] + b * mass[k]))
            np.add.at(n2, idx, 0.5 * (a * a * m2[k] + 2 * a * b * m1[k] + b * b * mass[k]))
        mass.append(nm)
        m1.append(n1)
        m2.append(n2)
    return Moments(tuple(mass), tuple(m1), tuple(m2))


def forward_process(driver: TreeDriver, x0, transition, name="process") -> TreeProcess:
    """Pathwise forward recursion with the same ``transition`` convention.

    Raises DriverMismatch on a recombining driver if the result is path dependent.
    """
    x0 = np.asarray(x0, dtype=float)
    vals = [x0[None, ...].copy()]
    for k in range(driver.N):
        au, ad, bu, bd = transition(k)
        vals.append(driver.forward(k, au * vals[k] + bu, ad * vals[k] + bd, name=name))
    return TreeProcess(driver, vals)
