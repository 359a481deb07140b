import numpy as np
import pytest

from smpc.model import SystemModel, benchmark_model, lq_gain, precompute

X0_B = np.array([-1.1130, 1.1156])


@pytest.fixture(scope="session")
def bench():
    return benchmark_model()


@pytest.fixture(scope="session")
def bench_pre(bench):
    return precompute(bench)


def random_stable_model(rng, nx=None, nu=None, N=None, gamma=None):
    """Random controllable plant with K = K_lq so that A + B K is stable."""
    nx = nx or int(rng.integers(2, 5))
    nu = nu or int(rng.integers(1, nx + 1))
    A = rng.normal(size=(nx, nx))
    A *= rng.uniform(0.5, 1.3) / max(abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(nx, nu))
    G = rng.normal(size=(nx, nx))
    W = 0.1 * (G @ G.T) + 0.05 * np.eye(nx)
    C = rng.normal(size=(int(rng.integers(1, 3)), nx))
    F = rng.normal(size=(nx, nx))
    Q = F @ F.T + 0.1 * np.eye(nx)
    R = np.eye(nu) * rng.uniform(0.5, 2.0)
    u_ref = rng.normal(size=nu) * 0.1
    x_ref = np.linalg.solve(np.eye(nx) - A, B @ u_ref)
    t = 2.0 * np.linalg.norm(C @ x_ref) + 1.0
    m = SystemModel(
        A=A, B=B, W=W, C=C, t=t, e=3.0, gamma=gamma or float(rng.uniform(0.5, 0.95)),
        Q=Q, R=R, x_ref=x_ref, u_ref=u_ref, K=np.zeros((nu, nx)), N=N or int(rng.integers(1, 6)),
    )
    K, _ = lq_gain(m)
    return m.replace(K=K)


def random_qcqp(rng, n, kappa_max=None, active_bias=0.8):
    """Random convex single-constraint instance with a known feasible region.

    The constraint is ``(m - a)^T G (m - a) + c_min``, so its infimum is
    ``c_min``; ``eps`` is set between ``c_min`` and the value at the
    unconstrained minimiser most of the time, which makes the constraint active.
    """
    from smpc.qcqp import QcqpProblem

    Q_, _ = np.linalg.qr(rng.normal(size=(n, n)))
    if kappa_max is None:
        ev = np.exp(rng.uniform(-3, 3, size=n))
    else:
        ev = rng.uniform(1.0, kappa_max, size=n)
    H = Q_ @ np.diag(ev) @ Q_.T
    H = 0.5 * (H + H.T)
    rank = int(rng.integers(1, n + 1))
    F = rng.normal(size=(n, rank))
    G = F @ F.T
    a = rng.normal(size=n)
    c_min = float(rng.uniform(0.0, 1.0))
    h = rng.normal(size=n) * 3
    m_u = -np.linalg.solve(H, h)
    c_u = float((m_u - a) @ G @ (m_u - a) + c_min)
    if rng.uniform() < active_bias:
        eps = c_min + rng.uniform(0.01, 0.9) * (c_u - c_min)
    else:
        eps = c_u + rng.uniform(0.0, 2.0)
    return QcqpProblem(H=H, h=h, j0=float(h @ np.linalg.solve(H, h)), G=G, g=-G @ a,
                       c_const=float(a @ G @ a + c_min), eps=float(eps))


def ellipsoid_projection(z, G, a, r2):
    """Euclidean projection of ``z`` onto ``{m : (m-a)^T G (m-a) <= r2}`` by bisection on the multiplier."""
    d = z - a
    if d @ G @ d <= r2:
        return z.copy()
    w, V = np.linalg.eigh(G)
    w = np.clip(w, 0.0, None)
    dv = V.T @ d
    q = lambda mu: float(np.sum(w * (dv / (1 + mu * w)) ** 2))  # noqa: E731
    lo, hi = 0.0, 1.0
    while q(hi) > r2:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if q(mid) > r2:
            lo = mid
        else:
            hi = mid
    return a + V @ (dv / (1 + hi * w))


def projected_gradient(p, iters=200_000, tol=1e-14):
    """Projected gradient descent with constant step 1/L on a random instance from random_qcqp."""
    a = np.linalg.lstsq(p.G, -p.g, rcond=None)[0]
    r2 = p.eps - (p.c_const - a @ p.G @ a)
    L = 2 * np.linalg.eigvalsh(p.H).max()
    m = ellipsoid_projection(np.zeros_like(p.h), p.G, a, r2)
    for _ in range(iters):
        grad = 2 * (p.H @ m + p.h)
        m_new = ellipsoid_projection(m - grad / L, p.G, a, r2)
        if np.max(np.abs(m_new - m)) < tol:
            m = m_new
            break
        m = m_new
    return m


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
