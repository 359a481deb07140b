"""Moment-based discounted chance constraint and the budget update.

Each predicted violation probability is bounded by Chebyshev's inequality,
``P(||C x_i|| >= t) <= (tr(C^T C X_i) + ||C xbar_i||^2) / t^2``, and the
infinite discounted tail beyond the horizon is summed in closed form by the
terminal term. The resulting constraint is one convex quadratic in the
stacked nominal input sequence.
"""

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DimensionMismatch, MissingPreviousSolution
from .model import terminal_matrices


def _vec(x, n, what):
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (n,):
        raise DimensionMismatch(f"{what} has length {x.size}, expected {n}")
    return x


def terminal_f(xbar_N, pre, model):
    """Closed-form discounted Chebyshev tail from step ``N`` onwards.

    Equals ``sum_{i>=N} gamma^i (tr(C^T C Xhat_i) + ||C xbar_i||^2) / t^2`` when the
    nominal state follows ``xbar_{i+1} - x_ref = Phi (xbar_i - x_ref)`` after ``N``.
    """
    d = _vec(xbar_N, model.nx, "xbar_N") - model.x_ref
    return float(pre.tail_const + pre.tail_scale * (d @ pre.P_tilde @ d + 2.0 * pre.cross_vec @ d))


def chebyshev_sum(traj, pre, model):
    """Constraint scalar for an explicit nominal trajectory ``xbar_0..xbar_N``."""
    traj = np.asarray(traj, dtype=float)
    N = model.N
    if traj.shape != (N + 1, model.nx):
        raise DimensionMismatch(f"trajectory has shape {traj.shape}, expected {(N + 1, model.nx)}")
    Cx = traj[:N] @ model.C.T
    head = pre.disc @ (pre.tr_CCX[:N] + (Cx * Cx).sum(axis=1)) / model.t**2
    return float(head + terminal_f(traj[N], pre, model))


def nominal_trajectory(x, m, pre, model):
    """Predicted mean states ``xbar_0..xbar_N`` as an ``(N+1, nx)`` array."""
    x = _vec(x, model.nx, "x")
    m = _vec(m, model.nu * model.N, "m")
    return (pre.Gamma_pred @ x + pre.Theta_pred @ m).reshape(model.N + 1, model.nx)


@dataclass(frozen=True, eq=False)
class ChebyshevTerms:
    """``c(m) = m^T G m + 2 g^T m + c0 + const_part`` for a fixed current state."""

    const_part: float
    G: np.ndarray
    g: np.ndarray
    c0: float
    x: np.ndarray
    pre: object
    model: object

    def value(self, m):
        m = np.asarray(m, dtype=float)
        return float(m @ self.G @ m + 2.0 * self.g @ m + self.c0 + self.const_part)

    def beta_lower(self, m):
        """Per-step Chebyshev bounds ``beta_i`` for ``i < N`` implied by ``m``."""
        traj = nominal_trajectory(self.x, m, self.pre, self.model)
        Cx = traj[: self.model.N] @ self.model.C.T
        return (self.pre.tr_CCX[: self.model.N] + np.sum(Cx * Cx, axis=1)) / self.model.t**2


def build_constraint(x_k, pre, model):
    x = _vec(x_k, model.nx, "x_k")
    cd = pre.condensed
    return ChebyshevTerms(
        const_part=cd.const_part,
        G=cd.G,
        g=cd.G_x @ x + cd.g_0,
        c0=float(x @ cd.C_xx @ x + 2.0 * cd.c_x @ x),
        x=x,
        pre=pre,
        model=model,
    )


def reconstruct_disturbance(x_next, prev, model):
    """Disturbance realised over the last step, recovered from the measured state."""
    x_next = _vec(x_next, model.nx, "x_next")
    x_prev = prev.xbar_star[0]
    u_prev = prev.m_star[: model.nu]
    return x_next - model.A @ x_prev - model.B @ u_prev


def shifted_trajectory(prev, w, pre, model):
    """Nominal trajectory of the shifted sequence: ``xbar*_{i+1} + Phi^i w`` for ``i = 0..N``."""
    xs = np.asarray(prev.xbar_star)
    N = model.N
    out = np.empty((N + 1, model.nx))
    out[:N] = xs[1:] + pre.Phi_pow[:N] @ w
    x_N1 = pre.Phi @ (xs[N] - model.x_ref) + model.x_ref
    out[N] = x_N1 + pre.Phi_pow[N] @ w
    return out


def shifted_sequence(prev, w, pre, model):
    """Previous optimiser advanced one step and corrected for the realised disturbance.

    The last element uses the terminal feedback law on ``xbar*_N``.
    """
    nu, N = model.nu, model.N
    m_prev = np.asarray(prev.m_star).reshape(N, nu)
    m_N = model.K @ (np.asarray(prev.xbar_star)[N] - model.x_ref) + model.u_ref
    tail = np.vstack([m_prev[1:], m_N[None, :]])
    corr = np.einsum("ij,kjl,l->ki", model.K, pre.Phi_pow[:N], w)
    return (tail + corr).ravel()


def update_epsilon(x_next, prev, pre, model):
    """Budget for the next step that keeps the shifted sequence exactly feasible."""
    if prev is None:
        raise MissingPreviousSolution("no previous solution; the initial budget must be supplied")
    w = reconstruct_disturbance(x_next, prev, model)
    return chebyshev_sum(shifted_trajectory(prev, w, pre, model), pre, model)


def expected_next_epsilon(sol, pre, model):
    """Conditional mean of the next budget given the current solution.

    The updated budget is quadratic in the next disturbance with Hessian
    ``P_tilde / t^2``, so its mean is the zero-disturbance value plus
    ``tr(W P_tilde) / t^2``.
    """
    xs = np.asarray(sol.xbar_star)
    x_nom = model.A @ xs[0] + model.B @ np.asarray(sol.m_star)[: model.nu]
    eps0 = update_epsilon(x_nom, sol, pre, model)
    return eps0 + float(np.trace(model.W @ pre.P_tilde)) / model.t**2


def discounted_output_energy(x0, gain, model):
    """``sum_k gamma^k E||C x_k||^2 / t^2`` under ``u = gain (x - x_ref) + u_ref`` from ``x0``.

    Uses the same closed forms as the terminal term, taken over the whole
    horizon with zero initial covariance.
    """
    Phi = model.A + model.B @ gain
    nx = model.nx
    g, t2 = model.gamma, model.t**2
    CtC = model.C.T @ model.C
    P_t, S_t = terminal_matrices(Phi, model.C, model.W, g, 0, np.zeros((nx, nx)))
    d = _vec(x0, nx, "x0") - model.x_ref
    xr = model.x_ref
    cross = linalg.solve_linear((np.eye(nx) - g * Phi).T, CtC @ xr)
    return float(
        (np.trace(CtC @ S_t) + d @ P_t @ d + xr @ CtC @ xr / (1.0 - g) + 2.0 * cross @ d) / t2
    )
