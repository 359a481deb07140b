"""System data, assumption checks and offline precomputation.

A :class:`SystemModel` bundles the plant, disturbance second moment, the
discounted chance-constraint parameters, the quadratic cost and the
prediction feedback gain. :func:`precompute` derives everything the online
controller needs: the covariance ladder of the predicted state, the three
terminal matrices and the condensed prediction/cost matrices.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import (
    DimensionMismatch,
    DimensionOverflow,
    LyapunovFailure,
    RiccatiNonConvergence,
)

STEADY_STATE_TOL = 1e-9
RANK_TOL = 1e-9
LYAP_FP_TOL = 1e-12
LYAP_FP_MAXITER = 100_000
DARE_TOL = 1e-12
DARE_MAXITER = 10_000


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Linear plant ``x+ = A x + B u + w`` with ``E[w w^T] = W``.

    The chance constraint is ``sum_k gamma^k P(||C x_k|| >= t) <= e`` and the
    stage cost is ``||x - x_ref||_Q^2 + ||u - u_ref||_R^2``. ``K`` is the
    feedback gain used in predictions, ``N`` the prediction horizon.
    """

    A: np.ndarray
    B: np.ndarray
    W: np.ndarray
    C: np.ndarray
    t: float
    e: float
    gamma: float
    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    K: np.ndarray
    N: int

    def __post_init__(self):
        for name in ("A", "B", "W", "C", "Q", "R", "K"):
            arr = linalg.as_matrix(getattr(self, name)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("x_ref", "u_ref"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel().copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "e", float(self.e))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "N", int(self.N))

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    def replace(self, **changes):
        d = {name: getattr(self, name) for name in _FIELDS}
        d.update(changes)
        return SystemModel(**d)

    def to_dict(self):
        out = {}
        for name in _FIELDS:
            v = getattr(self, name)
            out[name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def digest(self):
        """Short SHA-256 of the canonical JSON form, for run metadata."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FIELDS = ("A", "B", "W", "C", "t", "e", "gamma", "Q", "R", "x_ref", "u_ref", "K", "N")


def from_dict(d):
    """Build a model from a JSON-style mapping.

    ``K`` may be omitted, in which case the LQ-optimal gain for ``(A, B, Q, R)``
    is substituted.
    """
    missing = [k for k in _FIELDS if k != "K" and k not in d]
    if missing:
        raise KeyError(f"model is missing keys: {', '.join(missing)}")
    kw = {k: d[k] for k in _FIELDS if k in d}
    A = linalg.as_matrix(kw["A"])
    B = linalg.as_matrix(kw["B"])
    if B.shape[0] != A.shape[0] and B.shape[1] == A.shape[0]:
        # a flat list for a single-input B
        B = B.T
    kw["B"] = B
    if kw.get("K") is None:
        kw["K"] = np.zeros((B.shape[1], A.shape[0]))
        model = SystemModel(**kw)
        _check_dimensions(model)
        K_lq, _ = lq_gain(model)
        return model.replace(K=K_lq)
    return SystemModel(**kw)


def load_model(path):
    with open(path) as fh:
        return from_dict(json.load(fh))


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def benchmark_model():
    """Two-state, single-input example with Gaussian-scale disturbance.

    ``K`` is the prescribed (not LQ-optimal) prediction gain.
    """
    C = np.array([[0.6, 0.52]])
    return SystemModel(
        A=np.array([[1.0, 2.0], [1.5, 0.5]]),
        B=np.array([[1.2], [1.5]]),
        W=0.2 * np.eye(2),
        C=C,
        t=1.0,
        e=3.5,
        gamma=0.9,
        Q=C.T @ C,
        R=np.eye(1),
        x_ref=np.array([0.72, 0.36]),
        u_ref=np.array([-0.6]),
        K=np.array([[-0.92, -0.85]]),
        N=7,
    )


# --------------------------------------------------------------------------
# validation


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failed(self):
        return [c for c in self.checks if not c.passed]

    def add(self, name, passed, value, detail=""):
        self.checks.append(Check(name, bool(passed), float(value), detail))

    def format(self):
        lines = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"[{tag}] {c.name}: {c.value:.6g}  {c.detail}".rstrip())
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def _check_dimensions(model):
    nx, nu = model.A.shape[0], model.B.shape[1]
    problems = []
    if model.A.shape != (nx, nx):
        problems.append(f"A must be square, got {model.A.shape}")
    if model.B.shape[0] != nx:
        problems.append(f"B has {model.B.shape[0]} rows, expected {nx}")
    if model.W.shape != (nx, nx):
        problems.append(f"W has shape {model.W.shape}, expected {(nx, nx)}")
    if model.C.shape[1] != nx:
        problems.append(f"C has {model.C.shape[1]} columns, expected {nx}")
    if model.Q.shape != (nx, nx):
        problems.append(f"Q has shape {model.Q.shape}, expected {(nx, nx)}")
    if model.R.shape != (nu, nu):
        problems.append(f"R has shape {model.R.shape}, expected {(nu, nu)}")
    if model.K.shape != (nu, nx):
        problems.append(f"K has shape {model.K.shape}, expected {(nu, nx)}")
    if model.x_ref.shape != (nx,):
        problems.append(f"x_ref has length {model.x_ref.size}, expected {nx}")
    if model.u_ref.shape != (nu,):
        problems.append(f"u_ref has length {model.u_ref.size}, expected {nu}")
    if problems:
        raise DimensionMismatch("; ".join(problems))


def controllability_matrix(A, B):
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def validate(model):
    """Check the standing assumptions on ``model``.

    Raises DimensionMismatch before any assumption is examined; every other
    problem is reported as a failed check.
    """
    _check_dimensions(model)
    rep = ValidationReport()
    nx = model.nx

    rep.add("gamma in (0,1)", 0.0 < model.gamma < 1.0, model.gamma)
    rep.add("t > 0", model.t > 0.0, model.t)
    rep.add("e > 0", model.e > 0.0, model.e)
    rep.add("N >= 1", model.N >= 1, model.N)

    for name in ("W", "Q"):
        M = getattr(model, name)
        sym = linalg.is_symmetric(M)
        lam = linalg.min_eigenvalue(M)
        rep.add(f"{name} symmetric PSD", sym and lam >= -1e-12, lam, "min eigenvalue")
    lam_r = linalg.min_eigenvalue(model.R)
    rep.add("R symmetric PD", linalg.is_symmetric(model.R) and lam_r > 0.0, lam_r, "min eigenvalue")

    resid = np.linalg.norm((np.eye(nx) - model.A) @ model.x_ref - model.B @ model.u_ref)
    rep.add("steady state (I-A)x_ref = B u_ref", resid <= STEADY_STATE_TOL, resid, "residual norm")
    cx = np.linalg.norm(model.C @ model.x_ref)
    rep.add("||C x_ref|| < t", cx < model.t, cx, f"t = {model.t:g}")

    Phi = model.A + model.B @ model.K
    rho = linalg.spectral_radius(Phi)
    rep.add("A + B K strictly stable", rho < 1.0, rho, "spectral radius")

    rank_c = linalg.numerical_rank(controllability_matrix(model.A, model.B), RANK_TOL)
    rep.add("(A, B) controllable", rank_c == nx, rank_c, f"rank of {nx}")
    Qh = linalg.psd_sqrt(model.Q)
    rank_o = linalg.numerical_rank(controllability_matrix(model.A.T, Qh.T), RANK_TOL)
    rep.add("(A, Q^1/2) observable", rank_o == nx, rank_o, f"rank of {nx}")
    return rep


# --------------------------------------------------------------------------
# matrix equations


def solve_stein(A, Q, tol=LYAP_FP_TOL, maxiter=LYAP_FP_MAXITER):
    """Solve ``X = A X A^T + Q``.

    Uses the Kronecker-vectorized system while ``n^2`` fits under the
    ``linalg.KRON_CAP`` limit and falls back to fixed-point iteration above it.
    """
    A = linalg.as_matrix(A)
    Q = linalg.as_matrix(Q)
    n = A.shape[0]
    try:
        AA = linalg.kron(A, A)
    except DimensionOverflow:
        return _stein_fixed_point(A, Q, tol, maxiter)
    try:
        x = linalg.solve_linear(np.eye(n * n) - AA, Q.reshape(-1))
    except linalg.SingularMatrix as exc:
        raise LyapunovFailure(f"Kronecker system is singular: {exc}") from None
    X = x.reshape(n, n)
    return 0.5 * (X + X.T) if linalg.is_symmetric(Q) else X


def _stein_fixed_point(A, Q, tol, maxiter):
    X = Q.copy()
    for _ in range(maxiter):
        X_new = A @ X @ A.T + Q
        if np.max(np.abs(X_new - X)) <= tol:
            return X_new
        X = X_new
    raise LyapunovFailure(f"fixed-point Lyapunov iteration did not converge in {maxiter} steps")


def dare(A, B, Q, R, tol=DARE_TOL, maxiter=DARE_MAXITER):
    """Stabilizing DARE solution by value iteration from ``P = Q``.

    Stops when the elementwise change is at most ``tol * max(1, max|P|)``;
    an absolute threshold is below the rounding floor once ``P`` is large.
    """
    P = Q.copy()
    for _ in range(maxiter):
        BtP = B.T @ P
        P_new = A.T @ P @ A - (BtP @ A).T @ linalg.solve_linear(R + BtP @ B, BtP @ A) + Q
        P_new = 0.5 * (P_new + P_new.T)
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, float(np.max(np.abs(P_new)))):
            return P_new
        P = P_new
    raise RiccatiNonConvergence(f"Riccati iteration did not converge in {maxiter} steps")


def lq_gain(model):
    """Unconstrained LQ-optimal gain and the matching Riccati solution.

    Returns:
        (K_lq, P_dare) with ``K_lq = -(R + B^T P B)^{-1} B^T P A``.
    """
    A, B, R = model.A, model.B, model.R
    P = dare(A, B, model.Q, R)
    K = -linalg.solve_linear(R + B.T @ P @ B, B.T @ P @ A)
    return K, P


def dare_residual(A, B, Q, R, P):
    BtP = B.T @ P
    return A.T @ P @ A - (BtP @ A).T @ np.linalg.solve(R + BtP @ B, BtP @ A) + Q - P


# --------------------------------------------------------------------------
# precomputation


@dataclass(frozen=True, eq=False)
class Condensed:
    """Objective and constraint quadratics in the stacked input sequence.

    For the current state ``x`` the objective is ``m^T H m + 2 h^T m + j0`` with
    ``h = H_x x + h_0`` and ``j0 = x^T J_xx x + 2 j_x^T x + j_0``; the
    constraint scalar is ``m^T G m + 2 g^T m + c0 + const_part`` with
    ``g = G_x x + g_0`` and ``c0 = x^T C_xx x + 2 c_x^T x``.
    """

    H: np.ndarray
    H_x: np.ndarray
    h_0: np.ndarray
    J_xx: np.ndarray
    j_x: np.ndarray
    j_0: float
    G: np.ndarray
    G_x: np.ndarray
    g_0: np.ndarray
    C_xx: np.ndarray
    c_x: np.ndarray
    const_part: float
    # weight blocks on the stacked nominal trajectory (i = 0..N)
    M_stack: np.ndarray
    l_stack: np.ndarray


@dataclass(frozen=True, eq=False)
class Precomputed:
    Phi: np.ndarray
    Xhat: np.ndarray  # shape (N+1, nx, nx), Xhat[0] = 0
    P: np.ndarray
    P_tilde: np.ndarray
    S_tilde: np.ndarray
    K_lq: np.ndarray
    P_dare: np.ndarray
    Gamma_pred: np.ndarray  # ((N+1) nx, nx), block i = A^i
    Theta_pred: np.ndarray  # ((N+1) nx, N nu)
    trWP: float
    Phi_pow: np.ndarray  # shape (N+1, nx, nx)
    tr_CCX: np.ndarray  # trace(C^T C Xhat[i]) for i = 0..N
    cross_vec: np.ndarray  # (I - gamma Phi)^{-T} C^T C x_ref
    tail_const: float  # terminal term at xbar_N = x_ref
    tail_scale: float  # gamma^N / t^2
    disc: np.ndarray  # gamma^i for i = 0..N-1
    condensed: Condensed


def covariance_ladder(Phi, W, N):
    n = Phi.shape[0]
    X = np.zeros((N + 1, n, n))
    for i in range(N):
        X[i + 1] = Phi @ X[i] @ Phi.T + W
    return X


def prediction_matrices(A, B, N):
    """Stacked maps with ``xbar = Gamma x0 + Theta m`` over steps ``0..N``."""
    nx, nu = B.shape
    Gamma = np.zeros(((N + 1) * nx, nx))
    Theta = np.zeros(((N + 1) * nx, N * nu))
    Ak = np.eye(nx)
    for i in range(N + 1):
        Gamma[i * nx:(i + 1) * nx] = Ak
        Ak = A @ Ak
    # block (i, j) = A^{i-1-j} B for j < i
    AjB = [B]
    for _ in range(N - 1):
        AjB.append(A @ AjB[-1])
    for i in range(1, N + 1):
        for j in range(i):
            Theta[i * nx:(i + 1) * nx, j * nu:(j + 1) * nu] = AjB[i - 1 - j]
    return Gamma, Theta


def terminal_matrices(Phi, C, W, gamma, N, Xhat_N):
    """Solve for the discounted output-energy and tail-covariance matrices.

    Returns ``(P_tilde, S_tilde)`` with
    ``P_tilde = gamma Phi^T P_tilde Phi + C^T C`` and
    ``S_tilde = gamma Phi S_tilde Phi^T + gamma^(N+1)/(1-gamma) W + gamma^N Xhat_N``.
    """
    sg = np.sqrt(gamma)
    P_tilde = solve_stein(sg * Phi.T, C.T @ C)
    rhs = gamma ** (N + 1) / (1.0 - gamma) * W + gamma**N * Xhat_N
    S_tilde = solve_stein(sg * Phi, rhs)
    return P_tilde, S_tilde


def precompute(model):
    """Offline quantities for the online controller (see :class:`Precomputed`)."""
    _check_dimensions(model)
    A, B, C, K, W = model.A, model.B, model.C, model.K, model.W
    N, gamma, t2 = model.N, model.gamma, model.t**2
    nx, nu = model.nx, model.nu
    CtC = C.T @ C

    Phi = A + B @ K
    Xhat = covariance_ladder(Phi, W, N)
    P = solve_stein(Phi.T, model.Q + K.T @ model.R @ K)
    P_tilde, S_tilde = terminal_matrices(Phi, C, W, gamma, N, Xhat[N])
    K_lq, P_dare = lq_gain(model)
    Gamma, Theta = prediction_matrices(A, B, N)

    Phi_pow = np.empty((N + 1, nx, nx))
    Phi_pow[0] = np.eye(nx)
    for i in range(N):
        Phi_pow[i + 1] = Phi @ Phi_pow[i]
    tr_CCX = np.array([np.trace(CtC @ X) for X in Xhat])
    try:
        cross_vec = linalg.solve_linear((np.eye(nx) - gamma * Phi).T, CtC @ model.x_ref)
    except linalg.SingularMatrix as exc:
        raise LyapunovFailure(f"I - gamma Phi is singular: {exc}") from None
    xr = model.x_ref
    gN = gamma**N
    # terminal term at xbar_N = x_ref
    tail_const = np.trace(CtC @ S_tilde) / t2 + gN / t2 * (xr @ CtC @ xr) / (1.0 - gamma)

    # stacked weights on xbar_0..xbar_N
    M_stack = np.zeros(((N + 1) * nx, (N + 1) * nx))
    Q_stack = np.zeros_like(M_stack)
    l_stack = np.zeros((N + 1) * nx)
    for i in range(N):
        s = slice(i * nx, (i + 1) * nx)
        M_stack[s, s] = gamma**i * CtC / t2
        Q_stack[s, s] = model.Q
    s = slice(N * nx, (N + 1) * nx)
    M_stack[s, s] = gN * P_tilde / t2
    Q_stack[s, s] = P
    l_stack[s] = gN / t2 * (cross_vec - P_tilde @ xr)
    R_stack = np.kron(np.eye(N), model.R)
    X_r = np.tile(xr, N + 1)
    U_r = np.tile(model.u_ref, N)

    ThQ = Theta.T @ Q_stack
    H = ThQ @ Theta + R_stack
    ThM = Theta.T @ M_stack
    G = ThM @ Theta
    const_part = float(
        np.sum(gamma ** np.arange(N) * tr_CCX[:N]) / t2
        + tail_const
        + gN / t2 * (xr @ P_tilde @ xr - 2.0 * cross_vec @ xr)
    )
    condensed = Condensed(
        H=0.5 * (H + H.T),
        H_x=ThQ @ Gamma,
        h_0=-ThQ @ X_r - R_stack @ U_r,
        J_xx=Gamma.T @ Q_stack @ Gamma,
        j_x=-Gamma.T @ Q_stack @ X_r,
        j_0=float(X_r @ Q_stack @ X_r + U_r @ R_stack @ U_r),
        G=0.5 * (G + G.T),
        G_x=ThM @ Gamma,
        g_0=Theta.T @ l_stack,
        C_xx=Gamma.T @ M_stack @ Gamma,
        c_x=Gamma.T @ l_stack,
        const_part=const_part,
        M_stack=M_stack,
        l_stack=l_stack,
    )
    for arr in (Phi, Xhat, P, P_tilde, S_tilde, K_lq, P_dare, Gamma, Theta, Phi_pow, tr_CCX, cross_vec):
        arr.setflags(write=False)

    return Precomputed(
        Phi=Phi,
        Xhat=Xhat,
        P=P,
        P_tilde=P_tilde,
        S_tilde=S_tilde,
        K_lq=K_lq,
        P_dare=P_dare,
        Gamma_pred=Gamma,
        Theta_pred=Theta,
        trWP=float(np.trace(W @ P)),
        Phi_pow=Phi_pow,
        tr_CCX=tr_CCX,
        cross_vec=cross_vec,
        tail_const=float(tail_const),
        tail_scale=gN / t2,
        disc=gamma ** np.arange(N),
        condensed=condensed,
    )


def residuals(model, pre):
    """Max-abs residuals of the five defining matrix equations."""
    Phi, K = pre.Phi, model.K
    g = model.gamma
    N = model.N
    CtC = model.C.T @ model.C
    ladder = max(
        (np.max(np.abs(pre.Xhat[i + 1] - Phi @ pre.Xhat[i] @ Phi.T - model.W)) for i in range(N)),
        default=0.0,
    )
    return {
        "covariance": float(ladder),
        "P": float(np.max(np.abs(pre.P - Phi.T @ pre.P @ Phi - K.T @ model.R @ K - model.Q))),
        "P_tilde": float(np.max(np.abs(pre.P_tilde - g * Phi.T @ pre.P_tilde @ Phi - CtC))),
        "S_tilde": float(
            np.max(
                np.abs(
                    pre.S_tilde
                    - g * Phi @ pre.S_tilde @ Phi.T
                    - g ** (N + 1) / (1 - g) * model.W
                    - g**N * pre.Xhat[N]
                )
            )
        ),
        "dare": float(np.max(np.abs(dare_residual(model.A, model.B, model.Q, model.R, pre.P_dare)))),
    }
