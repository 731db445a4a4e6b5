"""Smooth constrained NLP solver: augmented Lagrangian over bounded L-BFGS.

Problem form::

    minimize f(x)  s.t.  h(x) = 0,  c(x) <= 0,  lo <= x <= hi

The outer loop updates PHR multipliers and the penalty; each inner solve is
a projected quasi-Newton minimization of the augmented Lagrangian under the
simple bounds (scipy's L-BFGS-B). When the objective is given as a sum of
squares ``f = 0.5 |r(x)|^2``, the augmented Lagrangian is itself a sum of
squares and the inner solve uses a bounded Gauss-Newton trust region
(scipy's ``least_squares``) instead, which copes far better with the
curvature a large penalty introduces.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.optimize import least_squares, minimize


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    DIVERGED = "Diverged"


@dataclass
class NlpProblem:
    objective: Optional[Callable[[np.ndarray], float]]
    initial_point: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    eq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # Jacobians may return dense arrays or scipy sparse matrices
    eq_jac: Optional[Callable] = None
    ineq_jac: Optional[Callable] = None
    # optional least-squares form of the objective, f = 0.5 * |r(x)|^2
    residuals: Optional[Callable[[np.ndarray], np.ndarray]] = None
    residual_jac: Optional[Callable] = None

    def __post_init__(self):
        if self.objective is None and self.residuals is None:
            raise ValueError("either objective or residuals is required")
        self.initial_point = np.asarray(self.initial_point, dtype=float).copy()
        n = self.initial_point.size
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must match the dimension of initial_point")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        self.initial_point = np.clip(self.initial_point, self.lower, self.upper)

    @property
    def dimension(self) -> int:
        return self.initial_point.size

    def f(self, x) -> float:
        if self.objective is None:
            r = self.r(x)
            return 0.5 * float(r @ r)
        return float(self.objective(x))

    def grad(self, x) -> np.ndarray:
        if self.gradient is not None:
            return np.asarray(self.gradient(x), dtype=float)
        if self.objective is None:
            return _tmul(self.jr(x), self.r(x))
        return fd_jacobian(lambda y: np.atleast_1d(self.objective(y)), x)[0]

    def r(self, x) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.residuals(x), dtype=float))

    def jr(self, x):
        if self.residual_jac is not None:
            return self.residual_jac(x)
        return fd_jacobian(self.r, x)

    def h(self, x) -> np.ndarray:
        return np.zeros(0) if self.eq is None else np.atleast_1d(np.asarray(self.eq(x), dtype=float))

    def c(self, x) -> np.ndarray:
        return np.zeros(0) if self.ineq is None else np.atleast_1d(np.asarray(self.ineq(x), dtype=float))

    def jh(self, x):
        if self.eq is None:
            return np.zeros((0, self.dimension))
        if self.eq_jac is not None:
            return self.eq_jac(x)
        return fd_jacobian(self.h, x)

    def jc(self, x):
        if self.ineq is None:
            return np.zeros((0, self.dimension))
        if self.ineq_jac is not None:
            return self.ineq_jac(x)
        return fd_jacobian(self.c, x)


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_outer: int = 500
    max_inner: int = 500
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    # required ratio of infeasibility decrease before the penalty is left alone
    decrease_ratio: float = 0.5
    multiplier_cap: float = 1e8
    # give up once the penalty is maxed out and infeasibility stops improving
    stall_iterations: int = 5


@dataclass
class NlpSolution:
    point: np.ndarray
    objective_value: float
    max_constraint_violation: float
    status: Status
    iterations: int
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ineq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stationarity: float = math.inf
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


class KKTResiduals(NamedTuple):
    stationarity: float
    feasibility: float
    complementarity: float


def fd_jacobian(fun, x) -> np.ndarray:
    """Central-difference Jacobian with step 1e-6 * (1 + |x_i|)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2 * h)
    return jac


def _tmul(jac, v) -> np.ndarray:
    if v.size == 0:
        return 0.0
    return np.asarray(jac.T @ v).ravel()


def max_violation(problem: NlpProblem, x) -> float:
    h = problem.h(x)
    c = problem.c(x)
    v = 0.0
    if h.size:
        v = max(v, float(np.abs(h).max()))
    if c.size:
        v = max(v, float(np.maximum(c, 0.0).max()))
    v = max(v, float(np.maximum(problem.lower - x, 0).max(initial=0.0)),
            float(np.maximum(x - problem.upper, 0).max(initial=0.0)))
    return v


def kkt_residuals(problem: NlpProblem, point, multipliers=None) -> KKTResiduals:
    """Stationarity, feasibility and complementarity residuals at ``point``.

    ``multipliers`` is ``(eq_multipliers, ineq_multipliers)`` for the
    Lagrangian ``f + lam.h + mu.c``; missing entries default to zero.
    Stationarity is the infinity norm of the projected Lagrangian gradient
    step, which absorbs the multipliers of the simple bounds.
    """
    x = np.asarray(point, dtype=float)
    if x.shape != (problem.dimension,):
        raise ValueError("point has the wrong dimension")
    h = problem.h(x)
    c = problem.c(x)
    lam, mu = multipliers if multipliers is not None else (None, None)
    lam = np.zeros(h.size) if lam is None else np.atleast_1d(np.asarray(lam, dtype=float))
    mu = np.zeros(c.size) if mu is None else np.atleast_1d(np.asarray(mu, dtype=float))
    g = problem.grad(x) + _tmul(problem.jh(x), lam) + _tmul(problem.jc(x), mu)
    stat = float(np.abs(x - np.clip(x - g, problem.lower, problem.upper)).max(initial=0.0))
    feas = max_violation(problem, x)
    comp = 0.0
    if c.size:
        comp = float(max(np.abs(mu * c).max(), np.maximum(-mu, 0.0).max()))
    return KKTResiduals(stat, feas, comp)


def solve(problem: NlpProblem, options: SolverOptions = SolverOptions(), trace_path=None) -> NlpSolution:
    """Solve ``problem``; deterministic for a fixed problem and options."""
    lo, hi = problem.lower, problem.upper
    bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))
    x = problem.initial_point.copy()
    lam = np.zeros(problem.h(x).size)
    mu = np.zeros(problem.c(x).size)
    rho = options.rho0
    trace = []

    f0 = problem.f(x)
    if not np.isfinite(f0):
        return NlpSolution(x, f0, math.inf, Status.DIVERGED, 0, lam, mu, trace=trace)
    progress_prev = math.inf
    best_viol = math.inf
    stalled = 0

    def merit(y, lam, mu, rho):
        f = problem.f(y)
        g = problem.grad(y)
        val = f
        if lam.size:
            h = problem.h(y)
            val += lam @ h + 0.5 * rho * (h @ h)
            g = g + _tmul(problem.jh(y), lam + rho * h)
        if mu.size:
            c = problem.c(y)
            s = np.maximum(mu + rho * c, 0.0)
            val += (s @ s - mu @ mu) / (2 * rho)
            g = g + _tmul(problem.jc(y), s)
        return val, g

    status = Status.MAX_ITERATIONS
    stat = math.inf
    it = 0
    for it in range(1, options.max_outer + 1):
        start_val, _ = merit(x, lam, mu, rho)
        gtol = max(0.1 * options.opt_tol, 10.0 ** -(it + 1))
        with np.errstate(all="ignore"):
            if problem.residuals is not None:
                x_new = _inner_least_squares(problem, x, lam, mu, rho, options, gtol)
            else:
                res = minimize(merit, x, args=(lam, mu, rho), jac=True, method="L-BFGS-B",
                               bounds=bounds,
                               options={"maxiter": options.max_inner, "gtol": gtol,
                                        "ftol": 1e-15, "maxcor": 20})
                x_new = res.x
        x_new = np.clip(x_new, lo, hi)
        f_new = problem.f(x_new)
        if not np.isfinite(f_new) or not np.all(np.isfinite(x_new)):
            status = Status.DIVERGED
            break
        end_val, _ = merit(x_new, lam, mu, rho)
        if end_val <= start_val:
            x = x_new
        else:
            end_val = start_val
        h = problem.h(x)
        c = problem.c(x)
        # infeasibility/complementarity measure driving the penalty update
        progress = max(float(np.abs(h).max(initial=0.0)),
                       float(np.abs(np.minimum(-c, mu / rho)).max(initial=0.0)))
        cap = options.multiplier_cap
        if lam.size:
            lam = np.clip(lam + rho * h, -cap, cap)
        if mu.size:
            mu = np.clip(mu + rho * c, 0.0, cap)
        viol = max_violation(problem, x)
        stat, _, comp = kkt_residuals(problem, x, (lam, mu))
        trace.append({"iteration": it, "objective": problem.f(x), "violation": viol,
                      "stationarity": stat, "merit_start": start_val, "merit_end": end_val,
                      "penalty": rho})
        if viol <= options.feas_tol and stat <= options.opt_tol:
            status = Status.CONVERGED
            break
        if progress > options.decrease_ratio * progress_prev and viol > options.feas_tol:
            rho = min(rho * options.rho_growth, options.rho_max)
        progress_prev = progress
        if viol < 0.99 * best_viol:
            best_viol = viol
            stalled = 0
        elif rho >= options.rho_max:
            stalled += 1
            if stalled >= options.stall_iterations:
                break

    if trace_path is not None:
        write_trace(trace, trace_path)
    return NlpSolution(x, problem.f(x), max_violation(problem, x), status, it, lam, mu, stat, trace)


def _dense(jac) -> np.ndarray:
    if hasattr(jac, "toarray"):
        return jac.toarray()
    return np.asarray(jac, dtype=float)


def _inner_least_squares(problem: NlpProblem, x, lam, mu, rho, options, gtol) -> np.ndarray:
    """Minimize the augmented Lagrangian written as one stacked residual.

    f + lam.h + rho/2 |h|^2 + |max(0, mu + rho c)|^2 / (2 rho) equals, up to
    a constant, 0.5 * |[r, sqrt(rho) (h + lam/rho), max(0, mu + rho c)/sqrt(rho)]|^2.
    """
    sr = math.sqrt(rho)
    lo, hi = problem.lower, problem.upper

    def fun(y):
        parts = [problem.r(y)]
        if lam.size:
            parts.append(sr * (problem.h(y) + lam / rho))
        if mu.size:
            parts.append(np.maximum(mu + rho * problem.c(y), 0.0) / sr)
        return np.concatenate(parts)

    def jac(y):
        parts = [_dense(problem.jr(y))]
        if lam.size:
            parts.append(sr * _dense(problem.jh(y)))
        if mu.size:
            active = (mu + rho * problem.c(y)) > 0
            parts.append(sr * _dense(problem.jc(y)) * active[:, None])
        return np.vstack(parts)

    # least_squares wants a strictly interior start
    span = hi - lo
    pad = np.where(np.isfinite(span), np.minimum(1e-10 * (1 + np.abs(x)), 0.25 * span), 0.0)
    x0 = np.clip(x, lo + pad, hi - pad)
    x0 = np.where(span > 0, x0, x)
    if np.any(span <= 0):
        # fixed variables are not supported; widen them by a hair
        lo = np.where(span > 0, lo, lo - 1e-12)
        hi = np.where(span > 0, hi, hi + 1e-12)
    res = least_squares(fun, x0, jac=jac, bounds=(lo, hi), method="trf",
                        x_scale="jac", gtol=gtol, ftol=1e-15, xtol=1e-15,
                        max_nfev=options.max_inner)
    return res.x


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "violation"])
        for row in trace:
            w.writerow([row["iteration"], repr(row["objective"]), repr(row["violation"])])
