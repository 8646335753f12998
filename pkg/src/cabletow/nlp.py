"""Smooth constrained NLP solver: augmented Lagrangian outer loop over a
bound-constrained inner minimization.

Solves ``min f(z)  s.t.  c_eq(z) = 0,  c_ineq(z) <= 0,  lb <= z <= ub`` to a
local KKT point.  Inequalities use the Rockafellar shifted-penalty form, so
the same multiplier update serves both constraint kinds.  The inner
subproblem uses a damped projected-Newton method with a Gauss-Newton model
when the problem supplies constraint Jacobians and an objective Hessian
diagonal; otherwise it falls back to scipy's L-BFGS-B.  Both inners are
sequential and deterministic; everything outside them (penalty schedule,
multiplier updates, convergence tests, logging) lives here.

Multiplier sign convention: the reported multipliers are those of the
Lagrangian ``f + mu_eq . c_eq + mu_ineq . c_ineq`` with ``mu_ineq >= 0``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.sparse.linalg import splu


@dataclass
class NlpProblem:
    """Problem data; constraint callables may be omitted along with their dims.

    Jacobians are dense ``(m, n)`` arrays.  ``eq_vjp``/``ineq_vjp`` optionally
    provide transpose-Jacobian products ``v -> J(z)^T v``; when supplied the
    solver never assembles a dense Jacobian, which matters for the large
    collocation problems.
    """

    n: int
    objective: Callable[[np.ndarray], float]
    x0: np.ndarray
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    n_eq: int = 0
    eq_fn: Callable[[np.ndarray], np.ndarray] | None = None
    eq_jac: Callable[[np.ndarray], np.ndarray] | None = None
    eq_vjp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    n_ineq: int = 0
    ineq_fn: Callable[[np.ndarray], np.ndarray] | None = None
    ineq_jac: Callable[[np.ndarray], np.ndarray] | None = None
    ineq_vjp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    hess_diag: Callable[[np.ndarray], np.ndarray] | None = None
    col_scale: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        if self.x0.size != self.n:
            raise ValueError(f"x0 has size {self.x0.size}, expected {self.n}")
        self.lower = self._bound(self.lower, -np.inf)
        self.upper = self._bound(self.upper, np.inf)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if self.col_scale is not None:
            self.col_scale = np.asarray(self.col_scale, dtype=float).ravel()
            if self.col_scale.size != self.n:
                raise ValueError("col_scale size mismatch")
            if np.any(self.col_scale <= 0) or not np.all(np.isfinite(self.col_scale)):
                raise ValueError("col_scale entries must be positive and finite")
        if (self.n_eq > 0) != (self.eq_fn is not None):
            raise ValueError("n_eq and eq_fn must be given together")
        if (self.n_ineq > 0) != (self.ineq_fn is not None):
            raise ValueError("n_ineq and ineq_fn must be given together")
        if self.eq_fn is not None and self.eq_jac is None and self.eq_vjp is None:
            raise ValueError("equality constraints need eq_jac or eq_vjp")
        if self.ineq_fn is not None and self.ineq_jac is None and self.ineq_vjp is None:
            raise ValueError("inequality constraints need ineq_jac or ineq_vjp")

    def _bound(self, v, fill):
        if v is None:
            return np.full(self.n, fill)
        v = np.asarray(v, dtype=float).ravel()
        if v.size == 1:
            return np.full(self.n, float(v[0]))
        if v.size != self.n:
            raise ValueError("bound size mismatch")
        return v

    # transpose-Jacobian products, falling back to dense Jacobians
    def eq_jtv(self, z, v):
        if self.eq_vjp is not None:
            return self.eq_vjp(z, v)
        return self.eq_jac(z).T @ v

    def ineq_jtv(self, z, v):
        if self.ineq_vjp is not None:
            return self.ineq_vjp(z, v)
        return self.ineq_jac(z).T @ v

    def grad(self, z):
        if self.gradient is not None:
            return self.gradient(z)
        return _central_diff(self.objective, z)


def _central_diff(fn, z, h: float = 1e-7):
    z = np.asarray(z, dtype=float)
    g = np.empty(z.size)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (fn(zp) - fn(zm)) / (2 * h)
    return g


@dataclass
class SolverOptions:
    tol_kkt: float = 1e-6
    tol_feas: float = 1e-6
    max_iter: int = 400          # combined inner-iteration budget
    inner_max_iter: int = 100
    rho0: float = 10.0
    rho_factor: float = 10.0
    rho_max: float = 1e9
    omega_min: float = 1e-9      # floor on the inner stationarity target
    mu_max: float = 1e12         # multiplier safeguard
    lbfgs_memory: int = 30
    inner: str = "auto"          # auto | newton | lbfgs
    log_path: str | None = None


@dataclass
class NlpSolution:
    z: np.ndarray
    objective: float
    status: str                  # converged | max_iterations | failed
    kkt_residual: float
    max_violation: float
    eq_violation: float
    ineq_violation: float
    mu_eq: np.ndarray
    mu_ineq: np.ndarray
    iterations: int
    outer_iterations: int
    wall_time: float
    outer_trace: tuple = field(default=(), repr=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _violations(problem, ceq, cin):
    veq = float(np.max(np.abs(ceq))) if ceq.size else 0.0
    vin = float(np.max(np.maximum(cin, 0.0))) if cin.size else 0.0
    return veq, vin


def _newton_minimize(value_grad, value_fn, hess_fn, x0, lb, ub, gtol, maxiter):
    """Damped projected-Newton descent on a bound-constrained subproblem.

    Bounds are handled with an active-set reduction: variables pressed
    against a bound by the gradient are frozen, the Newton step solves the
    model on the free block, and a projected Armijo backtracking keeps every
    accepted point feasible and strictly decreasing.  Rejected trials use
    ``value_fn`` so the gradient is only computed at accepted points.
    Status codes mirror L-BFGS-B: 0 converged, 1 budget exhausted, 2 no
    descent possible.
    """
    w = np.asarray(x0, dtype=float).copy()
    f, g = value_grad(w)
    fixed = ~(ub > lb)
    nit = 0
    status, message = 1, "iteration budget exhausted"
    while True:
        pg = np.clip(w - g, lb, ub) - w
        if float(np.max(np.abs(pg), initial=0.0)) <= gtol:
            status, message = 0, "projected gradient within tolerance"
            break
        if nit >= maxiter:
            break
        nit += 1
        at_lo = (w - lb <= 1e-10) & (g > 0.0)
        at_hi = (ub - w <= 1e-10) & (g < 0.0)
        free = np.flatnonzero(~(at_lo | at_hi | fixed))
        step = np.zeros_like(w)
        if free.size:
            H = hess_fn(w)
            if sp.issparse(H):
                HFF = H[free][:, free].tocsc()
                gF = g[free]
                dmax = max(float(np.max(np.abs(HFF.diagonal()))), 1.0)
                gnorm = max(float(np.max(np.abs(gF))), 1.0)
                eye = sp.identity(free.size, format="csc")
                tau = 0.0
                while tau <= 1e12 * dmax:
                    try:
                        A = HFF if tau == 0.0 else HFF + tau * eye
                        lu = splu(A, permc_spec="MMD_AT_PLUS_A",
                                  options={"SymmetricMode": True,
                                           "DiagPivotThresh": 0.001})
                        d = lu.solve(-gF)
                        # a near-singular factor passes splu but returns junk;
                        # accept the direction only when it solves the system
                        if (np.all(np.isfinite(d)) and float(gF @ d) < 0.0
                                and float(np.max(np.abs(A @ d + gF)))
                                <= 1e-6 * gnorm):
                            step[free] = d
                            break
                    except RuntimeError:
                        pass
                    tau = 1e-8 * dmax if tau == 0.0 else 100.0 * tau
            else:
                HFF = H[np.ix_(free, free)]
                dmax = max(float(np.max(np.abs(np.diag(HFF)))), 1.0)
                tau = 0.0
                factor = None
                while factor is None and tau <= 1e12 * dmax:
                    try:
                        A = HFF if tau == 0.0 else HFF + tau * np.eye(free.size)
                        factor = cho_factor(A, lower=True, check_finite=False)
                    except np.linalg.LinAlgError:
                        tau = 1e-8 * dmax if tau == 0.0 else 100.0 * tau
                if factor is not None:
                    step[free] = -cho_solve(factor, g[free], check_finite=False)
        accepted = False
        if np.any(step):
            alpha = 1.0
            for _ in range(30):
                w_try = np.clip(w + alpha * step, lb, ub)
                d = w_try - w
                slope = float(g @ d)
                if slope < 0.0:
                    f_try = value_fn(w_try)
                    if f_try <= f + 1e-4 * slope:
                        accepted = True
                        break
                alpha *= 0.5
        if not accepted:
            # projected-gradient fallback keeps this a pure descent method
            alpha = 1.0
            for _ in range(40):
                w_try = np.clip(w - alpha * g, lb, ub)
                if np.any(w_try != w):
                    f_try = value_fn(w_try)
                    if f_try < f:
                        accepted = True
                        break
                alpha *= 0.5
        if not accepted:
            status, message = 2, "line search found no descent"
            break
        w = w_try
        f, g = value_grad(w)
        if not np.isfinite(f):
            status, message = 2, "subproblem value became non-finite"
            break
    return SimpleNamespace(x=w, fun=f, nit=nit, status=status, message=message)


def _scale_cols(J, s: np.ndarray):
    """Multiply Jacobian columns by s without densifying sparse inputs."""
    if sp.issparse(J):
        J = J.tocsr(copy=True)
        J.data *= s[J.indices]
        return J
    return J * s[None, :]


def solve(problem: NlpProblem, options: SolverOptions | None = None) -> NlpSolution:
    """Solve the NLP; deterministic for identical problem data and options.

    When ``col_scale`` is set the solver substitutes ``z = col_scale * w`` and
    optimizes over ``w``, which equilibrates variables of very different
    magnitudes (forces vs. positions); the returned solution is unscaled.
    """
    s = problem.col_scale
    if s is None:
        return _solve_core(problem, options)
    p = problem
    scaled = NlpProblem(
        n=p.n,
        objective=lambda w: p.objective(s * w),
        x0=p.x0 / s,
        gradient=(None if p.gradient is None
                  else lambda w: s * p.gradient(s * w)),
        lower=p.lower / s, upper=p.upper / s,
        n_eq=p.n_eq,
        eq_fn=None if p.eq_fn is None else lambda w: p.eq_fn(s * w),
        eq_jac=(None if p.eq_jac is None
                else lambda w: _scale_cols(p.eq_jac(s * w), s)),
        eq_vjp=None if p.eq_fn is None else lambda w, v: s * p.eq_jtv(s * w, v),
        n_ineq=p.n_ineq,
        ineq_fn=None if p.ineq_fn is None else lambda w: p.ineq_fn(s * w),
        ineq_jac=(None if p.ineq_jac is None
                  else lambda w: _scale_cols(p.ineq_jac(s * w), s)),
        ineq_vjp=(None if p.ineq_fn is None
                  else lambda w, v: s * p.ineq_jtv(s * w, v)),
        hess_diag=(None if p.hess_diag is None
                   else lambda w: s * s * p.hess_diag(s * w)),
        name=p.name)
    sol = _solve_core(scaled, options)
    sol.z = s * sol.z
    sol.outer_trace = tuple((s * zt, fv, vv) for zt, fv, vv in sol.outer_trace)
    return sol


def _solve_core(problem: NlpProblem, options: SolverOptions | None = None) -> NlpSolution:
    opt = options or SolverOptions()
    t0 = time.perf_counter()
    lb, ub = problem.lower, problem.upper
    z = np.clip(problem.x0, lb, ub)

    def c_eq(x):
        return problem.eq_fn(x) if problem.eq_fn else np.zeros(0)

    def c_in(x):
        return problem.ineq_fn(x) if problem.ineq_fn else np.zeros(0)

    f0 = problem.objective(z)
    ceq0, cin0 = c_eq(z), c_in(z)
    if ceq0.size != problem.n_eq or cin0.size != problem.n_ineq:
        raise ValueError("constraint dimension mismatch with declared sizes")
    if not (np.isfinite(f0) and np.all(np.isfinite(ceq0)) and np.all(np.isfinite(cin0))):
        return NlpSolution(z=z, objective=float(f0), status="failed",
                           kkt_residual=np.inf, max_violation=np.inf,
                           eq_violation=np.inf, ineq_violation=np.inf,
                           mu_eq=np.zeros(problem.n_eq),
                           mu_ineq=np.zeros(problem.n_ineq), iterations=0,
                           outer_iterations=0,
                           wall_time=time.perf_counter() - t0)

    mu_eq = np.zeros(problem.n_eq)
    mu_in = np.zeros(problem.n_ineq)
    rho = opt.rho0
    # the AL gradient with the current multipliers equals the Lagrangian
    # gradient with the first-order candidates, so an inner solve to below
    # tol_kkt is all the stationarity the outer test ever needs; without
    # constraints the outer loop is a single bound-constrained solve
    if problem.n_eq or problem.n_ineq:
        gtol = max(opt.omega_min, 0.3 * opt.tol_kkt)
    else:
        gtol = opt.tol_kkt
    total_inner = 0
    trace = []
    log_rows = []
    status = "max_iterations"
    kkt = np.inf
    z_prev = z.copy()
    eta = 0.1 / rho ** 0.1       # feasibility threshold gating multiplier updates

    def aug_value_grad(x):
        f = problem.objective(x)
        g = problem.grad(x)
        if problem.n_eq:
            ce = problem.eq_fn(x)
            ye = mu_eq + rho * ce
            f = f + float(mu_eq @ ce) + 0.5 * rho * float(ce @ ce)
            g = g + problem.eq_jtv(x, ye)
        if problem.n_ineq:
            ci = problem.ineq_fn(x)
            yi = np.maximum(0.0, mu_in + rho * ci)
            f = f + float(np.sum(yi * yi - mu_in * mu_in)) / (2 * rho)
            g = g + problem.ineq_jtv(x, yi)
        return f, g

    def aug_value(x):
        f = problem.objective(x)
        if problem.n_eq:
            ce = problem.eq_fn(x)
            f = f + float(mu_eq @ ce) + 0.5 * rho * float(ce @ ce)
        if problem.n_ineq:
            yi = np.maximum(0.0, mu_in + rho * problem.ineq_fn(x))
            f = f + float(np.sum(yi * yi - mu_in * mu_in)) / (2 * rho)
        return f

    def lagrangian_grad(x, me, mi):
        g = problem.grad(x)
        if problem.n_eq:
            g = g + problem.eq_jtv(x, me)
        if problem.n_ineq:
            g = g + problem.ineq_jtv(x, mi)
        return g

    def projected_residual(x, g):
        return float(np.max(np.abs(np.clip(x - g, lb, ub) - x))) if x.size else 0.0

    newton = opt.inner == "newton" or (
        opt.inner == "auto" and problem.hess_diag is not None
        and (problem.n_eq == 0 or problem.eq_jac is not None)
        and (problem.n_ineq == 0 or problem.ineq_jac is not None))
    if newton and problem.hess_diag is None:
        raise ValueError("newton inner needs hess_diag and constraint Jacobians")

    def aug_hess(x):
        # Gauss-Newton model of the AL Hessian: exact objective curvature
        # (diagonal), rho J^T J over equalities and active inequalities;
        # assembled sparse because the Jacobians couple only nearby knots
        H = sp.diags(problem.hess_diag(x), format="csc")
        blocks = []
        if problem.n_eq:
            blocks.append(sp.csr_matrix(problem.eq_jac(x)))
        if problem.n_ineq:
            act = (mu_in + rho * problem.ineq_fn(x)) > 0
            if np.any(act):
                blocks.append(sp.csr_matrix(problem.ineq_jac(x))[act])
        if blocks:
            J = blocks[0] if len(blocks) == 1 else sp.vstack(blocks, format="csr")
            H = (H + rho * (J.T @ J)).tocsc()
        return H

    outer = 0
    while total_inner < opt.max_iter:
        outer += 1
        budget = min(opt.inner_max_iter, opt.max_iter - total_inner)
        if newton:
            res = _newton_minimize(aug_value_grad, aug_value, aug_hess, z,
                                   lb, ub, gtol=gtol, maxiter=budget)
        else:
            res = minimize(aug_value_grad, z, jac=True, method="L-BFGS-B",
                           bounds=list(zip(lb, ub)),
                           options={"maxiter": budget, "gtol": gtol,
                                    "ftol": 1e-16, "maxls": 50,
                                    "maxcor": opt.lbfgs_memory})
        z = res.x
        total_inner += max(res.nit, 1)
        ceq, cin = c_eq(z), c_in(z)
        veq, vin = _violations(problem, ceq, cin)
        viol = max(veq, vin)
        # first-order multiplier estimates at the inner solution
        cand_eq = mu_eq + rho * ceq
        cand_in = np.maximum(0.0, mu_in + rho * cin)
        gL = lagrangian_grad(z, cand_eq, cand_in)
        kkt = projected_residual(z, gL)
        fval = float(problem.objective(z))
        step = float(np.max(np.abs(z - z_prev))) if z.size else 0.0
        log_rows.append((outer, fval, viol, step, rho, kkt, total_inner))
        trace.append((z.copy(), fval, viol))
        z_prev = z.copy()

        if viol <= opt.tol_feas and kkt <= opt.tol_kkt:
            mu_eq, mu_in = cand_eq, cand_in
            status = "converged"
            break
        if viol <= max(eta, opt.tol_feas):
            # feasibility beat the forcing threshold: take the first-order
            # multiplier update even when the inner ran out of budget, and
            # tighten the threshold for the next round
            mu_eq = np.clip(cand_eq, -opt.mu_max, opt.mu_max)
            mu_in = np.clip(cand_in, 0.0, opt.mu_max)
            eta = max(eta / rho ** 0.9, 0.01 * opt.tol_feas)
        else:
            rho = min(rho * opt.rho_factor, opt.rho_max)
            eta = 0.1 / rho ** 0.1
        if res.status == 2:
            break  # inner found no descent: keep best iterate
        if not np.all(np.isfinite(z)):
            status = "failed"
            break

    ceq, cin = c_eq(z), c_in(z)
    veq, vin = _violations(problem, ceq, cin)
    if opt.log_path:
        with open(opt.log_path, "w") as fh:
            fh.write("iteration,objective,violation,step_size,rho,kkt,inner_total\n")
            for row in log_rows:
                fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
    return NlpSolution(z=z, objective=float(problem.objective(z)), status=status,
                       kkt_residual=kkt, max_violation=max(veq, vin),
                       eq_violation=veq, ineq_violation=vin, mu_eq=mu_eq,
                       mu_ineq=mu_in, iterations=total_inner,
                       outer_iterations=outer,
                       wall_time=time.perf_counter() - t0,
                       outer_trace=tuple(trace))


def finite_diff_check(problem: NlpProblem, point: np.ndarray,
                      h: float = 1e-5) -> float:
    """Max relative error of supplied derivatives against central differences."""
    z = np.asarray(point, dtype=float)
    worst = 0.0

    def rel(analytic, fd):
        if sp.issparse(analytic):
            analytic = analytic.toarray()
        scale = max(1.0, float(np.max(np.abs(fd))))
        return float(np.max(np.abs(analytic - fd))) / scale

    if problem.gradient is not None:
        worst = max(worst, rel(problem.gradient(z), _central_diff(problem.objective, z, h)))

    def jac_fd(fn, m):
        J = np.empty((m, z.size))
        for i in range(z.size):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            J[:, i] = (fn(zp) - fn(zm)) / (2 * h)
        return J

    if problem.eq_fn is not None:
        Jfd = jac_fd(problem.eq_fn, problem.n_eq)
        if problem.eq_jac is not None:
            worst = max(worst, rel(problem.eq_jac(z), Jfd))
        else:
            JT = np.column_stack([problem.eq_vjp(z, e)
                                  for e in np.eye(problem.n_eq)])
            worst = max(worst, rel(JT.T, Jfd))
    if problem.ineq_fn is not None:
        Jfd = jac_fd(problem.ineq_fn, problem.n_ineq)
        if problem.ineq_jac is not None:
            worst = max(worst, rel(problem.ineq_jac(z), Jfd))
        else:
            JT = np.column_stack([problem.ineq_vjp(z, e)
                                  for e in np.eye(problem.n_ineq)])
            worst = max(worst, rel(JT.T, Jfd))
    return worst
