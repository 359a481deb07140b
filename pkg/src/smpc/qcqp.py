"""Convex QP with a single convex quadratic constraint.

Solves::

    min_m  m^T H m + 2 h^T m + j0
    s.t.   m^T G m + 2 g^T m + c_const <= eps

with ``H`` positive definite and ``G`` positive semidefinite. If the
unconstrained minimiser is feasible it is returned; otherwise the
multiplier ``lam`` is the root of ``phi(lam) = c(m(lam)) - eps`` with
``m(lam) = -(H + lam G)^{-1} (h + lam g)``.

``H`` and ``G`` are diagonalised simultaneously once per problem, so every
evaluation of ``phi`` and its derivative is a handful of vector operations.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from . import linalg
from .constraint import build_constraint, chebyshev_sum, nominal_trajectory
from .errors import Infeasible, NonConvergence, NotPositiveDefinite

MAXITER = 200
ROOT_TOL = 1e-9
FEAS_TOL = 1e-12
GRAZE_TOL = 1e-9
PINV_TOL = 1e-12
NEAR_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class QcqpProblem:
    H: np.ndarray
    h: np.ndarray
    j0: float
    G: np.ndarray
    g: np.ndarray
    c_const: float
    eps: float
    basis: tuple = None  # optional cached (T, d) from generalized_basis(H, G)
    # optional evaluator of the same constraint in a better-conditioned form
    constraint_fn: object = None

    def objective(self, m):
        return float(m @ self.H @ m + 2.0 * self.h @ m + self.j0)

    def constraint(self, m):
        if self.constraint_fn is not None:
            return float(self.constraint_fn(m))
        return float(m @ self.G @ m + 2.0 * self.g @ m + self.c_const)


@dataclass(frozen=True, eq=False)
class MpcSolution:
    m_star: np.ndarray
    J_star: float
    lambda_star: float
    constraint_value: float
    active: bool
    eps: float
    iterations: int = 0
    xbar_star: np.ndarray = None  # (N+1, nx), filled by solve_mpc

    def kkt_residuals(self, p):
        """Stationarity, primal excess, and complementarity residuals."""
        m, lam = self.m_star, self.lambda_star
        stat = np.linalg.norm((p.H + lam * p.G) @ m + (p.h + lam * p.g))
        return {
            "stationarity": float(stat),
            "stationarity_tol": 1e-8 * (1.0 + np.linalg.norm(p.h)),
            "primal": float(self.constraint_value - p.eps) if np.isfinite(p.eps) else -np.inf,
            "complementarity": float(abs(lam * (self.constraint_value - p.eps))) if lam > 0 else 0.0,
            "dual": float(lam),
        }


def generalized_basis(H, G):
    """``T`` and ``d >= 0`` with ``T^T H T = I`` and ``T^T G T = diag(d)``."""
    try:
        L = linalg.cholesky(H)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(f"objective Hessian is not positive definite: {exc}") from None
    Li_G = scipy.linalg.solve_triangular(L, G, lower=True)
    S = scipy.linalg.solve_triangular(L, Li_G.T, lower=True)
    d, V = np.linalg.eigh(0.5 * (S + S.T))
    T = scipy.linalg.solve_triangular(L.T, V, lower=False)
    return T, np.clip(d, 0.0, None)


def min_constraint_value(p):
    """Infimum of the constraint over all ``m`` (pseudo-inverse on the range of ``G``)."""
    G = np.asarray(p.G, dtype=float)
    m = -np.linalg.pinv(G, rcond=PINV_TOL, hermitian=True) @ p.g
    return p.constraint(m)


def solve(p, maxiter=MAXITER):
    """Global minimiser of the convex problem with its multiplier.

    Raises:
        Infeasible: the constraint minimum exceeds ``eps`` by more than 1e-9.
        NonConvergence: the safeguarded root search exhausted ``maxiter``.
    """
    T, d = p.basis if p.basis is not None else generalized_basis(p.H, p.G)
    a = T.T @ p.h
    b = T.T @ p.g
    cc = p.c_const
    eps = p.eps

    y = -a
    c_u = p.constraint(T @ y)
    if c_u <= eps + GRAZE_TOL:
        return _finish(p, T, y, 0.0, False, 0)

    pos = d > PINV_TOL * max(float(d.max(initial=0.0)), 1e-300)
    c_inf = float(cc - np.sum(b[pos] ** 2 / d[pos]))
    if c_inf > eps + GRAZE_TOL:
        raise Infeasible(
            f"constraint minimum {c_inf:.12g} exceeds budget {eps:.12g}", min_value=c_inf
        )

    r = b - d * a  # phi'(lam) = -2 sum r^2 / (1 + lam d)^3

    def phi(lam):
        s = 1.0 + lam * d
        yy = -(a + lam * b) / s
        f = float(d @ (yy * yy) + 2.0 * b @ yy) + cc - eps
        if abs(f) <= near:
            # the diagonal form loses digits to cancellation; decide termination
            # on the value in original coordinates
            f = p.constraint(T @ yy) - eps
        return f, float(-2.0 * (r * r / s**3).sum()), yy

    tol_lo = ROOT_TOL * max(1.0, abs(eps))
    tol_hi = FEAS_TOL * max(1.0, abs(eps))
    near = NEAR_TOL * max(1.0, abs(eps))
    it = 0

    # bracket: phi(lo) > 0 >= phi(hi)
    lo, hi = 0.0, 1.0
    f_hi, _, y_hi = phi(hi)
    while f_hi > 0.0:
        it += 1
        if it >= maxiter:
            raise NonConvergence(f"no bracketing multiplier found after {it} doublings")
        lo, hi = hi, 2.0 * hi
        f_hi, _, y_hi = phi(hi)
    if -tol_lo <= f_hi:  # f_hi <= 0 here
        return _finish(p, T, y_hi, hi, True, it)

    lam = lo
    while it < maxiter:
        it += 1
        f, df, yy = phi(lam)
        if -tol_lo <= f <= 0.0:
            return _finish(p, T, yy, lam, True, it)
        if 0.0 < f <= tol_hi and df < 0.0:
            # Newton iterates on a convex decreasing phi approach the root from
            # the infeasible side; a doubled step lands just past it
            lam2 = lam - 2.0 * f / df
            f2, _, y2 = phi(lam2)
            if -tol_lo <= f2 <= 0.0:
                return _finish(p, T, y2, lam2, True, it)
        if f > 0.0:
            lo = lam
        else:
            hi = lam
        step = lam - f / df if df < 0.0 else np.inf
        lam = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 4.0 * np.finfo(float).eps * hi:
            f, _, yy = phi(hi)
            return _finish(p, T, yy, hi, True, it)
    raise NonConvergence(f"multiplier search did not converge in {maxiter} iterations")


def _finish(p, T, y, lam, active, it):
    m = T @ y
    return MpcSolution(
        m_star=m,
        J_star=p.objective(m),
        lambda_star=float(lam),
        constraint_value=p.constraint(m),
        active=active,
        eps=float(p.eps),
        iterations=it,
    )


@lru_cache(maxsize=16)
def _cached_basis(condensed):
    return generalized_basis(condensed.H, condensed.G)


def build_problem(x_k, eps, pre, model):
    """Condensed MPC problem at state ``x_k`` with budget ``eps``."""
    terms = build_constraint(x_k, pre, model)
    cd = pre.condensed
    x = terms.x
    return QcqpProblem(
        H=cd.H,
        h=cd.H_x @ x + cd.h_0,
        j0=float(x @ cd.J_xx @ x + 2.0 * cd.j_x @ x + cd.j_0),
        G=terms.G,
        g=terms.g,
        c_const=terms.c0 + terms.const_part,
        eps=float(eps),
        basis=_cached_basis(cd),
        constraint_fn=lambda m: chebyshev_sum(nominal_trajectory(x, m, pre, model), pre, model),
    )


def solve_mpc(x_k, eps, pre, model):
    """Solve the online problem and attach the optimal nominal trajectory."""
    p = build_problem(x_k, eps, pre, model)
    sol = solve(p)
    traj = nominal_trajectory(x_k, sol.m_star, pre, model)
    return MpcSolution(
        m_star=sol.m_star,
        J_star=sol.J_star,
        lambda_star=sol.lambda_star,
        constraint_value=sol.constraint_value,
        active=sol.active,
        eps=sol.eps,
        iterations=sol.iterations,
        xbar_star=traj,
    )
