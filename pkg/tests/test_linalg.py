import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smpc import linalg
from smpc.errors import DimensionOverflow, NotPositiveDefinite, SingularMatrix
from smpc.model import benchmark_model


def test_solve_identity_and_diagonal():
    np.testing.assert_array_equal(linalg.solve_linear(np.eye(2), [3.0, 4.0]), [3.0, 4.0])
    np.testing.assert_allclose(linalg.solve_linear([[2, 0], [0, 4]], [2, 8]), [1, 2])


def test_solve_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        M = rng.normal(size=(5, 5)) + 5 * np.eye(5)
        x = rng.normal(size=5)
        b = M @ x
        got = linalg.solve_linear(M, b)
        np.testing.assert_allclose(got, x, atol=1e-9)
        assert np.linalg.norm(M @ got - b) <= 1e-10 * (1 + np.linalg.norm(b))


def test_solve_singular():
    with pytest.raises(SingularMatrix):
        linalg.solve_linear([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0])


def test_cholesky_examples():
    np.testing.assert_allclose(linalg.cholesky(4 * np.eye(2)), 2 * np.eye(2))
    np.testing.assert_allclose(linalg.cholesky(benchmark_model().W), np.sqrt(0.2) * np.eye(2))


def test_cholesky_reconstructs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        G = rng.normal(size=(4, 4))
        M = G @ G.T + 1e-6 * np.eye(4)
        L = linalg.cholesky(M)
        assert np.allclose(np.triu(L, 1), 0)
        np.testing.assert_allclose(L @ L.T, M, atol=1e-10)


def test_cholesky_rejects_indefinite_and_singular():
    with pytest.raises(NotPositiveDefinite):
        linalg.cholesky([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NotPositiveDefinite):
        linalg.cholesky(np.zeros((2, 2)))
    with pytest.raises(NotPositiveDefinite):
        linalg.cholesky([[1.0, 0.5], [0.4, 1.0]])


def test_spectral_radius_examples():
    assert linalg.spectral_radius(np.diag([0.5, -0.25])) == pytest.approx(0.5, rel=1e-8)
    assert linalg.spectral_radius([[0.0, 1.0], [-0.25, 0.0]]) == pytest.approx(0.5, rel=1e-8)
    m = benchmark_model()
    rho = linalg.spectral_radius(m.A + m.B @ m.K)
    # eigenvalues of [[-0.104, 0.98], [0.12, -0.775]]
    tr, det = -0.104 - 0.775, -0.104 * -0.775 - 0.98 * 0.12
    roots = np.roots([1.0, -tr, det])
    assert rho == pytest.approx(np.max(np.abs(roots)), rel=1e-10)
    assert rho < 1


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-5, 5, allow_nan=False), seed=st.integers(0, 10_000))
def test_spectral_radius_homogeneous(c, seed):
    M = np.random.default_rng(seed).normal(size=(3, 3))
    assert linalg.spectral_radius(c * M) == pytest.approx(abs(c) * linalg.spectral_radius(M), rel=1e-8, abs=1e-12)


def test_kron_examples():
    np.testing.assert_array_equal(linalg.kron(np.eye(2), np.eye(2)), np.eye(4))
    np.testing.assert_array_equal(linalg.kron([[1, 2]], [[3], [4]]), [[3, 6], [4, 8]])


def test_kron_mixed_product():
    rng = np.random.default_rng(2)
    for _ in range(20):
        Ma, Mb = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        x, y = rng.normal(size=2), rng.normal(size=2)
        lhs = linalg.kron(Ma, Mb) @ np.kron(x, y)
        np.testing.assert_allclose(lhs, np.kron(Ma @ x, Mb @ y), atol=1e-12)


def test_kron_cap():
    with pytest.raises(DimensionOverflow):
        linalg.kron(np.eye(70), np.eye(70))
    assert linalg.kron(np.eye(64), np.eye(64)).shape == (4096, 4096)
