"""Chebyshev collocation of the delayed closed loop and its H2 calculus.

The delayed loop ``dx/dt = A x(t) - B K x(t - tau) + Bw w(t)`` is replaced by
an ODE on the history samples ``x(t + theta_i)`` taken at ``N`` Chebyshev
extremal points ``theta_i`` in ``[-tau, 0]``.  The first ``N - 1`` blocks
evolve by spectral differentiation in ``theta``; the last block, the present
state, obeys the plant equation with the feedback read from the first block
(the oldest sample, ``theta = -tau``).

Throughout, the delayed block is called the *tail* and the present block the
*head* of the augmented state.

The control-effort penalty ``|R^(1/2) K x(t - tau)|^2`` integrates to the same
value as ``|R^(1/2) K x(t)|^2`` over an impulse response that starts from a
zero history, so it may be weighted on either block.  Weighting the head block
(the default) keeps the integrand smooth on the collocation grid and gives
spectral convergence in ``N``; weighting the tail block converges like
``1/N`` because the delayed sample sees the impulse as a travelling jump.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, schur

from .errors import DimensionError, SingularLyapunov, Unstable
from .model import HURWITZ_TOL, LtiPlant, SparsityPattern

__all__ = [
    "DEFAULT_ORDER",
    "MAX_ORDER",
    "ChebyshevGrid",
    "AugmentedSystem",
    "LyapunovSolver",
    "H2Evaluation",
    "NewtonInfo",
    "chebyshev_grid",
    "differentiation_blocks",
    "build_augmented",
    "lyapunov_solve",
    "evaluate",
    "select_order",
    "h2_norm",
    "h2_gradient",
    "hessian_vector",
    "newton_direction",
]

log = logging.getLogger(__name__)

DEFAULT_ORDER = 20
MAX_ORDER = 80
ORDER_RTOL = 1e-6


@dataclass(frozen=True, eq=False)
class ChebyshevGrid:
    tau: float
    N: int
    theta: np.ndarray


def chebyshev_grid(tau: float, N: int) -> ChebyshevGrid:
    """Chebyshev extremal points mapped onto ``[-tau, 0]``, increasing."""
    if not tau > 0:
        raise ValueError("tau must be positive for the collocation grid")
    if N < 2:
        raise ValueError("grid needs at least two points")
    i = np.arange(N)
    theta = 0.5 * tau * (np.cos(np.pi - i * np.pi / (N - 1)) - 1.0)
    theta[0], theta[-1] = -tau, 0.0
    theta.setflags(write=False)
    return ChebyshevGrid(tau=float(tau), N=int(N), theta=theta)


def differentiation_blocks(grid: ChebyshevGrid) -> np.ndarray:
    """Barycentric differentiation matrix on the grid.

    Row ``i`` holds the weights ``q_j(theta_i)`` such that
    ``sum_j D[i, j] f(theta_j) = f'(theta_i)`` for every polynomial of degree
    at most ``N - 1``.
    """
    N, x = grid.N, grid.theta
    # closed-form barycentric weights of the Chebyshev extremal points
    w = (-1.0) ** np.arange(N)
    w[0] *= 0.5
    w[-1] *= 0.5
    dx = x[:, None] - x[None, :]
    np.fill_diagonal(dx, 1.0)
    D = (w[None, :] / w[:, None]) / dx
    np.fill_diagonal(D, 0.0)
    # negative-sum trick keeps rows summing to zero to machine precision
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    """State-space data of the collocated loop.

    ``Acal`` is ``(N n) x (N n)``, ``Bcal`` is ``(N n) x p`` and ``CtC`` is the
    output weight ``C^T C`` of the H2 cost.
    """

    Acal: np.ndarray
    Bcal: np.ndarray
    CtC: np.ndarray
    n: int
    N: int
    grid: ChebyshevGrid
    effort_block: str = "head"

    @property
    def effort(self) -> slice:
        return self.head if self.effort_block == "head" else self.tail

    @property
    def tail(self) -> slice:
        return slice(0, self.n)

    @property
    def head(self) -> slice:
        return slice((self.N - 1) * self.n, self.N * self.n)

    def selector(self, block: int) -> np.ndarray:
        """Block selector ``M_i``: ``(N n) x n`` with identity in block ``i``."""
        M = np.zeros((self.N * self.n, self.n))
        M[block * self.n:(block + 1) * self.n, :] = np.eye(self.n)
        return M


def build_augmented(plant: LtiPlant, K, tau: float, N: int,
                    effort_block: str = "head") -> AugmentedSystem:
    if effort_block not in ("head", "tail"):
        raise ValueError("effort_block must be 'head' or 'tail'")
    K = plant.check_gain(K)
    grid = chebyshev_grid(tau, N)
    n = plant.n
    D = differentiation_blocks(grid)
    Acal = np.zeros((N * n, N * n))
    Acal[:(N - 1) * n, :] = np.kron(D[:-1, :], np.eye(n))
    head = slice((N - 1) * n, N * n)
    Acal[head, head] = plant.A
    Acal[head, :n] -= plant.B @ K
    Bcal = np.zeros((N * n, plant.p))
    Bcal[head, :] = plant.Bw
    CtC = np.zeros((N * n, N * n))
    CtC[head, head] = plant.Q
    effort = head if effort_block == "head" else slice(0, n)
    CtC[effort, effort] += K.T @ plant.R @ K
    return AugmentedSystem(Acal=Acal, Bcal=Bcal, CtC=CtC, n=n, N=N, grid=grid,
                           effort_block=effort_block)


# below this size the quasi-triangular solve goes straight to LAPACK
_LEAF = 32


def _trsyl(A, B, C, adjoint: bool) -> np.ndarray:
    Y, scale, info = lapack.dtrsyl(A, B, C, trana="T" if adjoint else "N",
                                   tranb="N" if adjoint else "T")
    if info != 0 or not np.isfinite(Y).all():
        raise SingularLyapunov("Lyapunov operator is singular or nearly so")
    return Y / scale


def _split(T: np.ndarray) -> int:
    k = T.shape[0] // 2
    # never cut through a 2x2 block of the real Schur form
    return k + 1 if T[k, k - 1] != 0.0 else k


def _lyap_triangular(T: np.ndarray, C: np.ndarray, adjoint: bool) -> np.ndarray:
    """Solve ``T X + X T^T = C`` (``T^T X + X T = C`` if adjoint) for symmetric ``C``.

    Recursive halving of the quasi-triangular ``T``: two half-size Lyapunov
    solves and one Sylvester solve for the off-diagonal block, whose
    transpose gives the other by symmetry.  The updates are matrix products,
    so most of the work runs in level-3 BLAS.
    """
    n = T.shape[0]
    if n <= _LEAF:
        return _trsyl(T, T, C, adjoint)
    k = _split(T)
    T11, T12, T22 = T[:k, :k], T[:k, k:], T[k:, k:]
    if adjoint:
        X11 = _lyap_triangular(T11, C[:k, :k], True)
        X12 = _trsyl(T11, T22, C[:k, k:] - X11 @ T12, True)
        X22 = _lyap_triangular(T22, C[k:, k:] - T12.T @ X12 - X12.T @ T12, True)
    else:
        X22 = _lyap_triangular(T22, C[k:, k:], False)
        X12 = _trsyl(T11, T22, C[:k, k:] - T12 @ X22, False)
        X11 = _lyap_triangular(T11, C[:k, :k] - T12 @ X12.T - X12 @ T12.T, False)
    return np.block([[X11, X12], [X12.T, X22]])


class LyapunovSolver:
    """Bartels-Stewart solver with the real Schur form of ``M`` cached.

    ``solve(W)`` returns ``X`` with ``M X + X M^T = -W``; ``solve_adjoint(W)``
    returns ``X`` with ``M^T X + X M = -W``.  ``W`` must be symmetric.  Each
    call costs two orthogonal similarity transforms and one recursive
    quasi-triangular solve.
    """

    def __init__(self, M: np.ndarray):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DimensionError("Lyapunov operator needs a square matrix")
        self.M = M
        self.T, self.Z = schur(M, output="real")
        # LAPACK standardizes 2x2 blocks to equal diagonals, so the diagonal
        # carries the real parts of all eigenvalues
        self.abscissa = float(np.max(np.diag(self.T)))

    def _solve(self, W: np.ndarray, adjoint: bool) -> np.ndarray:
        Z = self.Z
        C = -(Z.T @ W @ Z)
        Y = _lyap_triangular(self.T, 0.5 * (C + C.T), adjoint)
        if not np.isfinite(Y).all():
            raise SingularLyapunov("Lyapunov operator is singular or nearly so")
        X = Z @ Y @ Z.T
        return 0.5 * (X + X.T)

    def solve(self, W: np.ndarray) -> np.ndarray:
        return self._solve(np.asarray(W, dtype=float), adjoint=False)

    def solve_adjoint(self, W: np.ndarray) -> np.ndarray:
        return self._solve(np.asarray(W, dtype=float), adjoint=True)


def lyapunov_solve(M, W) -> np.ndarray:
    """Solve ``M X + X M^T = -W`` for symmetric ``X``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape != M.shape:
        raise DimensionError("W must match M in shape")
    ev = np.linalg.eigvals(M)
    sums = np.abs(ev[:, None] + ev[None, :])
    if sums.min() <= 1e-12 * max(1.0, np.abs(ev).max()):
        raise SingularLyapunov("eigenvalue pair of M sums to zero")
    return LyapunovSolver(M).solve(W)


@dataclass(eq=False)
class H2Evaluation:
    """Everything needed for the cost, its gradient and Hessian products."""

    plant: LtiPlant
    K: np.ndarray
    system: AugmentedSystem
    solver: LyapunovSolver
    L: np.ndarray
    P: np.ndarray
    J: float
    J_dual: float

    @property
    def tau(self) -> float:
        return self.system.grid.tau

    @property
    def N(self) -> int:
        return self.system.N

    def gradient(self) -> np.ndarray:
        sysm, pl = self.system, self.plant
        tail, head, eff = sysm.tail, sysm.head, sysm.effort
        PL_head_tail = self.P[head, :] @ self.L[:, tail]
        return 2.0 * (pl.R @ self.K @ self.L[eff, eff] - pl.B.T @ PL_head_tail)


def evaluate(plant: LtiPlant, K, tau: float, N: int = DEFAULT_ORDER,
             hurwitz_tol: float = HURWITZ_TOL, effort_block: str = "head") -> H2Evaluation:
    """Solve both Gramian equations at ``(K, tau)``; raises ``Unstable``."""
    K = plant.check_gain(K)
    sysm = build_augmented(plant, K, tau, N, effort_block)
    solver = LyapunovSolver(sysm.Acal)
    if not solver.abscissa < -hurwitz_tol:
        raise Unstable(f"collocated loop not Hurwitz (abscissa {solver.abscissa:.3e})")
    L = solver.solve(sysm.Bcal @ sysm.Bcal.T)
    P = solver.solve_adjoint(sysm.CtC)
    J = float(np.trace(sysm.Bcal.T @ P @ sysm.Bcal))
    J_dual = float(np.sum(sysm.CtC * L))
    return H2Evaluation(plant=plant, K=K, system=sysm, solver=solver,
                        L=L, P=P, J=J, J_dual=J_dual)


def select_order(plant: LtiPlant, K, tau: float, N0: int = DEFAULT_ORDER,
                 cap: int = MAX_ORDER, rtol: float = ORDER_RTOL) -> int:
    """Smallest order in the doubling sequence whose cost is converged."""
    N = N0
    J = evaluate(plant, K, tau, N).J
    while N < cap:
        N2 = min(2 * N, cap)
        J2 = evaluate(plant, K, tau, N2).J
        if abs(J - J2) < rtol * abs(J2):
            return N
        N, J = N2, J2
    log.debug("order selection hit the cap N=%d", cap)
    return cap


def h2_norm(plant: LtiPlant, K, tau: float, N: int | None = None) -> float:
    """Squared H2 norm of the delayed loop from ``w`` to the weighted output."""
    if N is None:
        N = select_order(plant, K, tau)
    return evaluate(plant, K, tau, N).J


def h2_gradient(plant: LtiPlant, K, tau: float, N: int | None = None) -> np.ndarray:
    """Gradient of the cost with respect to the gain matrix."""
    if N is None:
        N = select_order(plant, K, tau)
    return evaluate(plant, K, tau, N).gradient()


def hessian_vector(ev: H2Evaluation, Kt) -> np.ndarray:
    """Second derivative of the cost applied to the direction ``Kt``.

    The directional derivatives ``Z1 = dL[Kt]`` and ``Z2 = dP[Kt]`` come from
    two Lyapunov solves with the cached Schur form.
    """
    pl, sysm = ev.plant, ev.system
    Kt = np.asarray(Kt, dtype=float)
    tail, head, eff = sysm.tail, sysm.head, sysm.effort
    NN = sysm.N * sysm.n
    G1 = np.zeros((NN, NN))
    G1[head, :] = pl.B @ Kt @ ev.L[tail, :]
    Z1 = ev.solver.solve(-(G1 + G1.T))
    G2 = np.zeros((NN, NN))
    G2[:, tail] = ev.P[:, head] @ pl.B @ Kt
    G2[eff, eff] -= ev.K.T @ pl.R @ Kt
    Z2 = ev.solver.solve_adjoint(-(G2 + G2.T))
    cross = Z2[head, :] @ ev.L[:, tail] + ev.P[head, :] @ Z1[:, tail]
    return 2.0 * (pl.R @ Kt @ ev.L[eff, eff] + pl.R @ ev.K @ Z1[eff, eff]
                  - pl.B.T @ cross)


@dataclass(frozen=True)
class NewtonInfo:
    iterations: int
    residual: float
    converged: bool
    fallback: bool


def _newton_cg(ev: H2Evaluation, mask: np.ndarray, rtol: float, maxiter: int | None):
    g = np.where(mask, ev.gradient(), 0.0)
    gnorm = np.linalg.norm(g)
    if gnorm == 0.0:
        return np.zeros_like(g), NewtonInfo(0, 0.0, True, False)
    maxiter = 2 * int(mask.sum()) + 10 if maxiter is None else maxiter
    x = np.zeros_like(g)
    r = -g
    d = r.copy()
    rr = float(np.sum(r * r))
    for it in range(maxiter):
        Hd = np.where(mask, hessian_vector(ev, d), 0.0)
        curv = float(np.sum(d * Hd))
        if curv <= 1e-14 * float(np.sum(d * d)):
            if it == 0:
                return -g, NewtonInfo(it, gnorm, False, True)
            return x, NewtonInfo(it, np.sqrt(rr), False, False)
        alpha = rr / curv
        x = x + alpha * d
        r = r - alpha * Hd
        rr_new = float(np.sum(r * r))
        if np.sqrt(rr_new) <= rtol * gnorm:
            return x, NewtonInfo(it + 1, np.sqrt(rr_new), True, False)
        d = r + (rr_new / rr) * d
        rr = rr_new
    log.warning("Newton CG stopped at iteration cap, residual %.3e", np.sqrt(rr))
    if float(np.sum(x * g)) >= 0:
        return -g, NewtonInfo(maxiter, np.sqrt(rr), False, True)
    return x, NewtonInfo(maxiter, np.sqrt(rr), False, False)


def newton_direction(plant: LtiPlant, K, tau: float, N: int | None = None,
                     pattern: SparsityPattern | None = None, rtol: float = 1e-8,
                     maxiter: int | None = None, return_info: bool = False,
                     evaluation: H2Evaluation | None = None):
    """Pattern-restricted Newton step by conjugate gradients.

    Solves ``H[Kt] = -grad`` on the entries allowed by ``pattern``.  When the
    restricted Hessian shows nonpositive curvature on the first CG direction
    the steepest-descent direction is returned instead.
    """
    K = plant.check_gain(K)
    mask = np.ones(K.shape, bool) if pattern is None else pattern.mask
    if np.any(K[~mask] != 0):
        raise ValueError("K does not conform to the pattern")
    if evaluation is None:
        if N is None:
            N = select_order(plant, K, tau)
        evaluation = evaluate(plant, K, tau, N)
    Kt, info = _newton_cg(evaluation, mask, rtol, maxiter)
    return (Kt, info) if return_info else Kt
