import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_continuous_lyapunov
from scipy.special import lambertw

from conftest import scalar_plant, stable_random_plant
from delaysparse.errors import DimensionError, SingularLyapunov, Unstable
from delaysparse.model import SparsityPattern, random_plant
from delaysparse.spectral import (LyapunovSolver, build_augmented, chebyshev_grid,
                                  differentiation_blocks, evaluate, h2_gradient, h2_norm,
                                  hessian_vector, lyapunov_solve, newton_direction, select_order)


def test_grid_endpoints_and_order():
    g = chebyshev_grid(0.3, 9)
    assert g.theta[0] == -0.3 and g.theta[-1] == 0.0
    assert np.all(np.diff(g.theta) > 0)
    with pytest.raises(ValueError):
        chebyshev_grid(0.0, 5)


@settings(max_examples=25)
@given(st.integers(3, 16), st.floats(0.05, 3.0), st.integers(0, 10_000))
def test_differentiation_exact_on_polynomials(N, tau, seed):
    g = chebyshev_grid(tau, N)
    coef = np.random.default_rng(seed).standard_normal(N)
    # monomials in the scaled variable keep the values well conditioned
    u = g.theta / tau
    f = np.polynomial.polynomial.polyval(u, coef)
    df = np.polynomial.polynomial.polyval(u, np.polynomial.polynomial.polyder(coef)) / tau
    D = differentiation_blocks(g)
    assert np.allclose(D @ f, df, atol=1e-8 * N ** 2 * (1 + np.abs(df).max()))
    assert np.allclose(D.sum(axis=1), 0.0, atol=1e-12 * N ** 2 / tau)


def test_lyapunov_scalar():
    assert lyapunov_solve([[-1.0]], [[1.0]])[0, 0] == pytest.approx(0.5)


def test_lyapunov_two_by_two():
    X = lyapunov_solve([[-1.0, 1.0], [0.0, -2.0]], np.eye(2))
    assert np.allclose(X, [[7 / 12, 1 / 12], [1 / 12, 1 / 4]], atol=1e-14)


@settings(max_examples=25)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_lyapunov_matches_scipy(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n)) - 2.5 * np.sqrt(n) * np.eye(n)
    W = rng.standard_normal((n, n))
    W = W @ W.T
    X = lyapunov_solve(M, W)
    assert np.allclose(X, solve_continuous_lyapunov(M, -W), atol=1e-10 * (1 + np.abs(X).max()))


def test_lyapunov_adjoint_and_reuse():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((5, 5)) - 4 * np.eye(5)
    s = LyapunovSolver(M)
    W = np.eye(5)
    X = s.solve(W)
    Y = s.solve_adjoint(W)
    assert np.allclose(M @ X + X @ M.T, -W, atol=1e-12)
    assert np.allclose(M.T @ Y + Y @ M, -W, atol=1e-12)
    assert s.abscissa == pytest.approx(np.linalg.eigvals(M).real.max(), abs=1e-12)


def test_lyapunov_errors():
    with pytest.raises(SingularLyapunov):
        lyapunov_solve([[1.0, 0.0], [0.0, -1.0]], np.eye(2))
    with pytest.raises(DimensionError):
        lyapunov_solve(np.eye(2), np.eye(3))


def test_rightmost_eigenvalue_matches_characteristic_root():
    # lambda + 1 + 0.5 exp(-0.1 lambda) = 0 solved with the Lambert W function
    root = -1.0 + 10.0 * lambertw(-0.05 * np.exp(0.1), 0)
    sysm = build_augmented(scalar_plant(), [[0.5]], 0.1, 8)
    ev = np.linalg.eigvals(sysm.Acal)
    right = ev[np.argmax(ev.real)]
    assert abs(right - root) < 1e-8


def test_scalar_h2_is_delay_free_value():
    J = evaluate(scalar_plant(), [[0.5]], 1e-6, 8).J
    assert J == pytest.approx(5 / 12, rel=1e-5)


def test_primal_and_dual_costs_agree(rng):
    P = random_plant(3, rng=rng)
    from conftest import lqr_gain
    ev = evaluate(P, lqr_gain(P), 0.05, 16)
    assert ev.J == pytest.approx(ev.J_dual, rel=1e-9)


def test_delay_free_limit_matches_lyapunov(rng):
    for _ in range(5):
        P = stable_random_plant(4, rng)
        K = 0.1 * rng.standard_normal((4, 4))
        Acl = P.A - P.B @ K
        if np.linalg.eigvals(Acl).real.max() > -0.05:
            continue
        X = solve_continuous_lyapunov(Acl.T, -(P.Q + K.T @ P.R @ K))
        J_ref = np.trace(P.Bw.T @ X @ P.Bw)
        assert h2_norm(P, K, 1e-7) == pytest.approx(J_ref, rel=1e-6)


def test_tail_weighting_converges_to_same_value():
    P = scalar_plant(a=-1.0)
    head = evaluate(P, [[0.5]], 0.5, 24).J
    tail = evaluate(P, [[0.5]], 0.5, 200, effort_block="tail").J
    assert tail == pytest.approx(head, rel=5e-3)


def test_order_selection_converges():
    P = scalar_plant(a=-1.0)
    N = select_order(P, [[0.5]], 0.4)
    J1 = evaluate(P, [[0.5]], 0.4, N).J
    J2 = evaluate(P, [[0.5]], 0.4, 2 * N).J
    assert abs(J1 - J2) <= 1e-6 * J2


def test_unstable_loop_raises():
    P = scalar_plant(a=0.0)
    with pytest.raises(Unstable):
        evaluate(P, [[1.0]], 2.0, 20)


def _fd_gradient(P, K, tau, N, h=1e-6):
    G = np.zeros_like(K)
    for idx in np.ndindex(K.shape):
        E = np.zeros_like(K)
        E[idx] = h
        G[idx] = (evaluate(P, K + E, tau, N).J - evaluate(P, K - E, tau, N).J) / (2 * h)
    return G


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    P = stable_random_plant(3, rng, m=2)
    K = 0.2 * rng.standard_normal((2, 3))
    tau = float(rng.uniform(0.05, 0.5))
    g = evaluate(P, K, tau, 16).gradient()
    g_fd = _fd_gradient(P, K, tau, 16)
    assert np.linalg.norm(g - g_fd) <= 1e-5 * np.linalg.norm(g_fd)


def test_gradient_wrapper_matches(rng):
    P = stable_random_plant(2, rng)
    K = 0.1 * np.ones((2, 2))
    assert np.allclose(h2_gradient(P, K, 0.2, 16), evaluate(P, K, 0.2, 16).gradient())


def test_hessian_vector_matches_gradient_differences(rng):
    P = stable_random_plant(3, rng)
    K = 0.1 * rng.standard_normal((3, 3))
    tau, N, h = 0.3, 16, 1e-6
    V = rng.standard_normal((3, 3))
    ev = evaluate(P, K, tau, N)
    Hv = hessian_vector(ev, V)
    fd = (evaluate(P, K + h * V, tau, N).gradient()
          - evaluate(P, K - h * V, tau, N).gradient()) / (2 * h)
    assert np.linalg.norm(Hv - fd) <= 1e-5 * np.linalg.norm(fd)


def test_scalar_newton_step_matches_second_difference():
    P = scalar_plant()
    K, tau, N, h = np.array([[0.5]]), 0.2, 16, 1e-4
    J = [evaluate(P, K + d, tau, N).J for d in (-h, 0.0, h)]
    g = (J[2] - J[0]) / (2 * h)
    H = (J[2] - 2 * J[1] + J[0]) / h ** 2
    step = newton_direction(P, K, tau, N)
    assert step[0, 0] == pytest.approx(-g / H, rel=1e-4)


def test_newton_direction_respects_pattern(rng):
    P = stable_random_plant(3, rng)
    mask = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 1]], bool)
    K = np.where(mask, 0.2, 0.0)
    D, info = newton_direction(P, K, 0.2, 16, pattern=SparsityPattern(mask), return_info=True)
    assert np.all(D[~mask] == 0)
    assert info.converged
    with pytest.raises(ValueError):
        newton_direction(P, np.full((3, 3), 0.2), 0.2, 16, pattern=SparsityPattern(mask))
