"""Stability of the delayed loop ``dx/dt = A x(t) - B K x(t - tau)``.

Spectral stability tests on the collocated system, imaginary-axis crossings
from a frequency sweep, delay margins (with a Pade cross-check), stable delay
intervals, and a Lyapunov-Krasovskii certificate posed as an LMI.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from scipy.optimize import brentq, linear_sum_assignment

from .conic import FeasibilityProblem, solve_feasibility
from .errors import Infeasible, NotDelayFreeStable, NumericalFailure
from .model import HURWITZ_TOL, LtiPlant, closed_loop_delay_free
from .spectral import DEFAULT_ORDER, MAX_ORDER, build_augmented

__all__ = [
    "LMI_VARIABLES",
    "Crossing",
    "CrossingSet",
    "StableIntervals",
    "LmiCertificate",
    "spectral_abscissa",
    "is_stable",
    "zero_crossings",
    "delay_margin",
    "pade_margin",
    "stable_intervals",
    "interior_delay",
    "certificate_eigs",
    "lmi_variables",
    "lmi_matrices",
    "lmi_coupling",
    "lmi_certificate",
]

log = logging.getLogger(__name__)

THETA_SAMPLES = 2048
LMI_MARGIN = 1e-6
LMI_VARIABLES = ("P", "Q0", "Q1", "S0", "S1", "R00", "R01", "R11")
SYMMETRIC_VARIABLES = {"P", "S0", "S1", "R00", "R11"}


# -- spectral tests ----------------------------------------------------------

def spectral_abscissa(plant: LtiPlant, K, tau: float, N: int = DEFAULT_ORDER) -> float:
    if tau == 0:
        Acl, _ = closed_loop_delay_free(plant, K)
        return float(np.linalg.eigvals(Acl).real.max())
    Acal = build_augmented(plant, K, tau, N).Acal
    return float(np.linalg.eigvals(Acal).real.max())


def is_stable(plant: LtiPlant, K, tau: float, N: int | None = None,
              hurwitz_tol: float = HURWITZ_TOL) -> bool:
    """Spectral-abscissa test of the collocated loop.

    Without an explicit ``N`` the order is doubled from the default until the
    rightmost eigenvalue settles to ``1e-6`` relative, capped at the maximum
    order.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0:
        return closed_loop_delay_free(plant, K, hurwitz_tol)[1]
    if N is not None:
        return spectral_abscissa(plant, K, tau, N) < -hurwitz_tol
    N = DEFAULT_ORDER
    a = spectral_abscissa(plant, K, tau, N)
    while N < MAX_ORDER:
        N2 = min(2 * N, MAX_ORDER)
        a2 = spectral_abscissa(plant, K, tau, N2)
        if abs(a - a2) <= 1e-6 * (1.0 + abs(a2)):
            return a2 < -hurwitz_tol
        N, a = N2, a2
    return a < -hurwitz_tol


# -- crossings and margins ---------------------------------------------------

@dataclass(frozen=True)
class Crossing:
    omega: float
    theta: float
    nu: float
    residual: float


@dataclass(frozen=True)
class CrossingSet:
    crossings: tuple
    degenerate: bool = False

    @property
    def count(self) -> int:
        return len(self.crossings)

    @property
    def nu(self) -> np.ndarray:
        return np.array([c.nu for c in self.crossings])

    def delays(self, tau_max: float) -> np.ndarray:
        """All delays ``(theta + 2 pi k) / omega`` up to ``tau_max``."""
        out = []
        for c in self.crossings:
            k = 0
            while True:
                d = (c.theta + 2 * np.pi * k) / c.omega
                if d > tau_max:
                    break
                out.append(d)
                k += 1
        return np.unique(np.array(out, dtype=float))


def _sweep_eigs(A, BK, thetas):
    return np.array([np.linalg.eigvals(A - BK * np.exp(-1j * th)) for th in thetas])


def _track(E):
    """Reorder the eigenvalue rows so that columns follow continuous branches."""
    E = E.copy()
    for k in range(1, len(E)):
        cost = np.abs(E[k - 1][:, None] - E[k][None, :])
        _, col = linear_sum_assignment(cost)
        E[k] = E[k][col]
    return E


def zero_crossings(plant: LtiPlant, K, theta_grid_size: int = THETA_SAMPLES,
                   re_tol: float = 1e-10) -> CrossingSet:
    """Imaginary-axis crossings of ``eig(A - B K exp(-j theta))``, ``theta`` in ``[0, 2 pi)``.

    A crossing at ``j omega`` (``omega > 0``) for parameter ``theta`` means the
    delayed loop has a root on the imaginary axis at delays
    ``(theta + 2 pi k) / omega``.
    """
    K = plant.check_gain(K)
    A, BK = plant.A, plant.B @ K
    thetas = np.linspace(0.0, 2 * np.pi, theta_grid_size + 1)
    E = _track(_sweep_eigs(A, BK, thetas))
    scale = (1.0 + np.linalg.norm(A, 2) + np.linalg.norm(BK, 2)) ** plant.n

    def branch_eig(th, target):
        ev = np.linalg.eigvals(A - BK * np.exp(-1j * th))
        return ev[np.argmin(np.abs(ev - target))]

    found = []
    re = E.real
    for b in range(E.shape[1]):
        for k in range(theta_grid_size):
            r0, r1 = re[k, b], re[k + 1, b]
            if r0 == 0.0:
                th = thetas[k]
            elif r0 * r1 < 0:
                e0, e1 = E[k, b], E[k + 1, b]
                t0, t1 = thetas[k], thetas[k + 1]

                def f(th):
                    frac = (th - t0) / (t1 - t0)
                    return branch_eig(th, e0 + frac * (e1 - e0)).real

                try:
                    th = brentq(f, t0, t1, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
                except ValueError:
                    continue
            else:
                continue
            frac = (th - thetas[k]) / (thetas[k + 1] - thetas[k])
            lam = branch_eig(th, E[k, b] + frac * (E[k + 1, b] - E[k, b]))
            omega = lam.imag
            if omega <= 1e-12 or abs(lam.real) > max(re_tol, 1e-8 * abs(lam)):
                continue
            th = th % (2 * np.pi)
            jw = 1j * omega
            resid = abs(np.linalg.det(jw * np.eye(plant.n) - A + BK * np.exp(-1j * th)))
            found.append(Crossing(omega=float(omega), theta=float(th), nu=float(th / omega),
                                  residual=float(resid / scale)))
    found.sort(key=lambda c: (c.nu, c.omega))
    unique = []
    for c in found:
        if unique and abs(c.nu - unique[-1].nu) <= 1e-9 * max(1.0, c.nu) \
                and abs(c.omega - unique[-1].omega) <= 1e-7 * max(1.0, c.omega):
            continue
        unique.append(c)
    nus = np.array([c.nu for c in unique])
    degenerate = bool(len(nus) > 1 and np.min(np.diff(nus)) < 1e-8)
    if degenerate:
        log.warning("clustered crossing delays detected; repeated crossings are not resolved")
    return CrossingSet(crossings=tuple(unique), degenerate=degenerate)


def delay_margin(plant: LtiPlant, K, theta_grid_size: int = THETA_SAMPLES,
                 crossings: CrossingSet | None = None) -> float:
    """Smallest delay at which a root reaches the imaginary axis."""
    _, hurwitz = closed_loop_delay_free(plant, K)
    if not hurwitz:
        raise NotDelayFreeStable("A - B K is not Hurwitz; the delay margin is undefined")
    cs = zero_crossings(plant, K, theta_grid_size) if crossings is None else crossings
    if cs.count == 0:
        return math.inf
    return float(cs.nu.min())


def _pade_coefficients(order: int):
    """Numerator coefficients (ascending powers) of the diagonal Pade approximant of ``exp(-x)``."""
    f = math.factorial
    return np.array([(-1) ** k * f(2 * order - k) * f(order)
                     / (f(2 * order) * f(k) * f(order - k)) for k in range(order + 1)])


def _pade_loop_matrix(plant: LtiPlant, K, tau: float, order: int) -> np.ndarray:
    from scipy.signal import tf2ss

    num = _pade_coefficients(order) * tau ** np.arange(order + 1)
    den = np.abs(_pade_coefficients(order)) * tau ** np.arange(order + 1)
    a, b, c, d = tf2ss(num[::-1], den[::-1])
    Im = np.eye(plant.m)
    Ap, Bp, Cp, Dp = np.kron(Im, a), np.kron(Im, b), np.kron(Im, c), np.kron(Im, d)
    # u = delayed(-K x): xi' = Ap xi + Bp (-K x), u = Cp xi + Dp (-K x)
    top = np.hstack([plant.A - plant.B @ Dp @ K, plant.B @ Cp])
    bot = np.hstack([-Bp @ K, Ap])
    return np.vstack([top, bot])


def pade_margin(plant: LtiPlant, K, order: int = 8, tau_hi: float | None = None,
                growth: float = 1.01) -> float:
    """Delay margin of the loop with the delay replaced by a Pade approximant.

    Scans delays geometrically until the rational loop loses stability, then
    bisects.  Returns ``inf`` if no loss of stability is found below ``tau_hi``.
    """
    K = plant.check_gain(K)
    _, hurwitz = closed_loop_delay_free(plant, K)
    if not hurwitz:
        raise NotDelayFreeStable("A - B K is not Hurwitz")
    size = np.linalg.norm(plant.A, 2) + np.linalg.norm(plant.B @ K, 2)
    if tau_hi is None:
        tau_hi = 1e3 * 2 * np.pi / max(size, 1e-12)

    def stable(t):
        M = _pade_loop_matrix(plant, K, t, order)
        return np.linalg.eigvals(M).real.max() < 0

    lo = 1e-4 / max(size, 1e-12)
    if not stable(lo):
        return lo
    hi = lo * growth
    while hi <= tau_hi and stable(hi):
        lo, hi = hi, hi * growth
    if hi > tau_hi:
        return math.inf
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if stable(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class StableIntervals:
    intervals: tuple
    boundaries: tuple = field(default=())

    def contains(self, tau: float) -> bool:
        return any(lo <= tau <= hi for lo, hi in self.intervals)

    def interval_of(self, tau: float):
        for lo, hi in self.intervals:
            if lo <= tau <= hi:
                return (lo, hi)
        return None


def stable_intervals(plant: LtiPlant, K, tau_max: float,
                     theta_grid_size: int = THETA_SAMPLES,
                     crossings: CrossingSet | None = None) -> StableIntervals:
    """Partition ``[0, tau_max]`` at crossing delays and keep the stable cells."""
    if not tau_max > 0:
        raise ValueError("tau_max must be positive")
    cs = zero_crossings(plant, K, theta_grid_size) if crossings is None else crossings
    cuts = [d for d in cs.delays(tau_max) if 0.0 < d < tau_max]
    edges = [0.0] + cuts + [float(tau_max)]
    cells = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo <= 0:
            continue
        if is_stable(plant, K, 0.5 * (lo + hi)):
            if cells and cells[-1][1] == lo:
                cells[-1] = (cells[-1][0], hi)
            else:
                cells.append((lo, hi))
    return StableIntervals(intervals=tuple(cells), boundaries=tuple(cuts))


def interior_delay(plant: LtiPlant, K, edge: float, toward: float,
                   offset: float = 1e-8) -> float | None:
    """Stable delay just inside an interval edge, stepping towards ``toward``.

    Tries ``edge +- offset`` and grows the offset tenfold (12 tries) while
    staying strictly between ``edge`` and ``toward``.  Returns ``None`` when no
    stable point is found.
    """
    step = offset * max(1.0, abs(edge))
    sign = 1.0 if toward > edge else -1.0
    for _ in range(12):
        t = edge + sign * step
        if abs(t - edge) >= abs(toward - edge):
            break
        if t > 0 and is_stable(plant, K, t):
            return t
        step *= 10
    return None


# -- Lyapunov-Krasovskii certificate -----------------------------------------

def _bmat(rows):
    if any(isinstance(b, cp.Expression) for row in rows for b in row):
        return cp.bmat(rows)
    return np.block(rows)


def lmi_matrices(A, B, K, tau, X):
    """Assemble the two certificate matrices ``(Phi, Psi)``.

    ``X`` maps the names in ``LMI_VARIABLES`` to numeric arrays or cvxpy
    expressions.  Every term is linear in ``X``; ``Phi`` is affine in ``tau``
    and, through ``-B K``, in ``K``.
    """
    A1 = -(B @ K)
    P, Q0, Q1, S0, S1, R00, R01, R11 = (X[k] for k in LMI_VARIABLES)
    n = A.shape[0]
    h = 0.5 * tau
    Z = np.zeros((n, n))
    D0 = -P @ A - A.T @ P - Q0 - Q0.T - S0
    D1 = Q1 - P @ A1
    D2 = tau * (R00 - R11) + (S0 - S1)
    D3 = 3 * (S0 - S1)
    Da0 = h * (A.T @ (Q0 + Q1)) + h * (R00 + R01) - (Q0 - Q1)
    Da1 = h * (A1.T @ (Q0 + Q1)) - h * (R01.T + R11)
    Db0 = -h * (A.T @ (Q0 - Q1)) - h * (R00 - R01)
    Db1 = -h * (A1.T @ (Q0 - Q1)) + h * (R01.T - R11)
    Phi = _bmat([[D0, D1, -Da0, -Db0],
                 [D1.T, S1, -Da1, -Db1],
                 [-Da0.T, -Da1.T, D2, Z],
                 [-Db0.T, -Db1.T, Z, D3]])
    Psi = _bmat([[P, Q0, Q1],
                 [Q0.T, R00 + S0 / tau, R01],
                 [Q1.T, R01.T, R11 + S1 / tau]])
    return Phi, Psi


def lmi_coupling(tau, X):
    """Matrix ``C`` with ``Phi = (K-free part) + C F + F^T C^T`` and ``F = diag(B K, ...)``.

    Only the second block column of ``C`` is nonzero, so ``C F`` equals ``C[:, 1] (B K)``
    placed in that column.
    """
    P, Q0, Q1 = X["P"], X["Q0"], X["Q1"]
    n = P.shape[0]
    Z = np.zeros((n, n))
    h = 0.5 * tau
    return _bmat([[Z, P, Z, Z],
                  [Z, Z, Z, Z],
                  [Z, h * (Q0 + Q1).T, Z, Z],
                  [Z, -h * (Q0 - Q1).T, Z, Z]])


@dataclass(frozen=True, eq=False)
class LmiCertificate:
    P: np.ndarray
    Q0: np.ndarray
    Q1: np.ndarray
    S0: np.ndarray
    S1: np.ndarray
    R00: np.ndarray
    R01: np.ndarray
    R11: np.ndarray
    phi_min_eig: float
    psi_min_eig: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in LMI_VARIABLES}

    def scaled(self, c: float) -> "LmiCertificate":
        d = {k: c * v for k, v in self.as_dict().items()}
        return LmiCertificate(**d, phi_min_eig=c * self.phi_min_eig,
                              psi_min_eig=c * self.psi_min_eig)


def certificate_eigs(plant: LtiPlant, K, tau: float, X: dict):
    Phi, Psi = lmi_matrices(plant.A, plant.B, plant.check_gain(K), tau, X)
    Phi = 0.5 * (Phi + Phi.T)
    Psi = 0.5 * (Psi + Psi.T)
    return float(np.linalg.eigvalsh(Phi).min()), float(np.linalg.eigvalsh(Psi).min())


def lmi_variables(prob: FeasibilityProblem, n: int, prefix: str = "") -> dict:
    return {k: prob.variable(prefix + k, (n, n), symmetric=k in SYMMETRIC_VARIABLES)
            for k in LMI_VARIABLES}


def lmi_certificate(plant: LtiPlant, K, tau: float, margin: float = LMI_MARGIN,
                    tol: float = 1e-7) -> LmiCertificate:
    """Search for a certificate with both matrices ``>= margin * I``.

    The matrices are homogeneous in the unknowns, so the search maximizes the
    smallest eigenvalue ``t`` over a unit box and rescales afterwards.  The
    rescaled certificate is accepted only if a dense eigenvalue check confirms
    the margin.  ``Infeasible`` means *inconclusive*: the condition is
    sufficient only.
    """
    if not tau > 0:
        raise ValueError("the certificate needs tau > 0")
    K = plant.check_gain(K)
    n = plant.n
    prob = FeasibilityProblem()
    X = lmi_variables(prob, n)
    t = prob.variable("t", ())
    Phi, Psi = lmi_matrices(plant.A, plant.B, K, tau, X)
    prob.add_psd(Phi - t * np.eye(4 * n), name="Phi")
    prob.add_psd(Psi - t * np.eye(3 * n), name="Psi")
    prob.add_linear(1 - t)
    for v in X.values():
        prob.add_linear(1 - v)
        prob.add_linear(1 + v)
    prob.minimize(-t)
    try:
        sol = solve_feasibility(prob, tol=tol)
    except NumericalFailure as exc:
        raise Infeasible(f"certificate search inconclusive: {exc}") from exc
    tstar = float(sol["t"])
    if not tstar > 10 * tol:
        raise Infeasible(f"no certificate found (best margin {tstar:.3e})")
    vals = {k: sol[k] for k in LMI_VARIABLES}
    for k in SYMMETRIC_VARIABLES:
        vals[k] = 0.5 * (vals[k] + vals[k].T)
    c = max(1.0, 2.0 * margin / tstar)
    vals = {k: c * v for k, v in vals.items()}
    e_phi, e_psi = certificate_eigs(plant, K, tau, vals)
    if min(e_phi, e_psi) < margin:
        raise Infeasible(f"certificate failed re-verification (min eig {min(e_phi, e_psi):.3e})")
    return LmiCertificate(**vals, phi_min_eig=e_phi, psi_min_eig=e_psi)
