"""Joint adjustment of a stabilizing gain and the delay it must tolerate.

Starting from a gain that is stable without delay, the loop raises the delay
towards the delay implied by the network while keeping a Lyapunov-Krasovskii
certificate valid.  Each step solves a convex inner approximation of the
(bilinear) certificate around the current certified point, inside a trust
region on the delay.  If the loop stalls before the network delay is
tolerated, the delay is snapped to the edge of the current stable interval and
the bandwidth is re-sized so that the network delay matches it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .conic import FeasibilityProblem, solve_feasibility
from .errors import (Infeasible, NoStabilizingPair, NotDelayFreeStable, NumericalFailure,
                     StepInfeasible)
from .model import LtiPlant, NetworkModel, cardinality, closed_loop_delay_free, link_delay
from .stability import (LMI_VARIABLES, SYMMETRIC_VARIABLES, certificate_eigs, delay_margin,
                        interior_delay, is_stable, lmi_certificate, lmi_coupling, lmi_matrices,
                        lmi_variables, stable_intervals)

__all__ = [
    "RelaxationPoint",
    "PreconditionResult",
    "TraceRow",
    "certify",
    "assemble_relaxation",
    "project_auxiliaries",
    "trust_region_step",
    "precondition",
]

log = logging.getLogger(__name__)

EPS = 1e-6


@dataclass(frozen=True, eq=False)
class RelaxationPoint:
    """A gain, a delay and certificate matrices valid at that pair."""

    K: np.ndarray
    tau: float
    aux: dict
    phi_min_eig: float = float("nan")
    psi_min_eig: float = float("nan")

    def is_certified(self, plant: LtiPlant, eps: float = EPS) -> bool:
        e_phi, e_psi = certificate_eigs(plant, self.K, self.tau, self.aux)
        return min(e_phi, e_psi) >= eps * (1 - 1e-9)


@dataclass(frozen=True)
class TraceRow:
    k: int
    tau: float
    card: int
    accepted: bool


@dataclass(frozen=True, eq=False)
class PreconditionResult:
    K_prime: np.ndarray
    tau_prime: float
    c_final: float
    trace: tuple
    fast_path: bool = False
    snap: str | None = None
    network: NetworkModel | None = field(default=None)


def _normalized(aux: dict) -> dict:
    scale = max(float(np.abs(v).max()) for v in aux.values())
    return {k: v / scale for k, v in aux.items()}


def _symmetric_parts(aux: dict) -> dict:
    return {k: (0.5 * (v + v.T) if k in SYMMETRIC_VARIABLES else v) for k, v in aux.items()}


def certify(plant: LtiPlant, K, tau: float, eps: float = EPS) -> RelaxationPoint:
    """Certificate at ``(K, tau)`` normalized to unit largest entry."""
    cert = lmi_certificate(plant, K, tau, margin=eps)
    aux = cert.as_dict()
    scale = max(float(np.abs(v).max()) for v in aux.values())
    if cert.phi_min_eig / scale >= eps and cert.psi_min_eig / scale >= eps:
        aux = _normalized(aux)
    e_phi, e_psi = certificate_eigs(plant, K, tau, aux)
    return RelaxationPoint(K=np.array(K, float), tau=float(tau), aux=aux,
                           phi_min_eig=e_phi, psi_min_eig=e_psi)


def _stacked_norm_cap(prob, blocks, bound, name):
    """Cap the norm of a vertical stack by the Euclidean norm of its block norms.

    Sound because ``||[M_1; ...; M_k]||^2 = ||sum M_i^T M_i|| <= sum ||M_i||^2``.
    """
    ts = [prob.variable(f"{name}_block{i}", ()) for i in range(len(blocks))]
    for M, t in zip(blocks, ts):
        prob.add_norm_cap(M, t)
    prob.add_norm_cap(cp.hstack(ts), bound)


@dataclass
class _Relaxation:
    problem: FeasibilityProblem
    dK: cp.Variable
    dtau: cp.Variable
    dX: dict


def assemble_relaxation(plant: LtiPlant, base: RelaxationPoint, gamma: float, eta: float,
                        eps: float = EPS, T: float | None = None, offset: float = 0.0,
                        room: float | None = None, check_base: bool = True) -> _Relaxation:
    """Convex inner approximation of the certificate around ``base``.

    Unknowns are the perturbations ``dK``, ``dtau`` and ``dX`` of the gain,
    delay and certificate matrices.  The first-order part of the certificate
    matrix must exceed ``alpha I`` where ``alpha`` dominates a norm bound on
    every product of perturbations, so that any feasible point yields a valid
    certificate at ``(K + dK, tau + dtau)``.  The ``1/tau`` entries are
    replaced by their tangent line, a lower bound because the ``S`` blocks are
    positive definite whenever the first matrix is.

    With ``T`` given, the objective is the model
    ``-2 (T - tau_k) s + s^2`` of ``(T - tau)^2`` with ``s = offset + dtau``
    the distance from the trust-region centre ``tau_k``.
    """
    if not gamma > 0 or not eta > 0 or not eps > 0:
        raise ValueError("gamma, eta and eps must be positive")
    if check_base and not base.is_certified(plant, eps):
        raise ValueError("relaxation base point is not certified")
    A, B = plant.A, plant.B
    K0, tau0, X0 = base.K, base.tau, base.aux
    n, m = plant.n, plant.m
    nB = float(np.linalg.norm(B, 2))

    prob = FeasibilityProblem()
    dK = prob.variable("dK", (m, n))
    dtau = prob.variable("dtau", ())
    dX = lmi_variables(prob, n, prefix="d")
    dX = {k: dX[k] for k in LMI_VARIABLES}
    alpha = prob.variable("alpha", ())
    beta = prob.variable("beta", ())
    nrm1 = prob.variable("norm_coupling", ())
    nrm23 = prob.variable("norm_delay", ())
    nrm4 = prob.variable("norm_cross", ())
    nrmC = prob.variable("norm_psi", ())

    Phi_o, _ = lmi_matrices(A, B, K0, tau0, X0)
    Phi_dX, _ = lmi_matrices(A, B, K0, tau0, dX)
    Phi_dK, _ = lmi_matrices(A, B, K0 + dK, tau0, X0)
    # the first matrix and the coupling are affine in tau; slopes by exact differences
    Phi_t2, _ = lmi_matrices(A, B, K0, 2 * tau0, X0)
    Phi0 = Phi_o + Phi_dX + (Phi_dK - Phi_o) + (dtau / tau0) * (Phi_t2 - Phi_o)

    c1 = slice(n, 2 * n)
    Ctau_X0 = (lmi_coupling(2 * tau0, X0) - lmi_coupling(tau0, X0)) / tau0
    B1 = lmi_coupling(tau0, dX)[:, c1] + dtau * Ctau_X0[:, c1]
    B23 = (lmi_matrices(A, B, K0, 2 * tau0, dX)[0] - Phi_dX) / tau0
    B4 = ((lmi_coupling(2 * tau0, dX) - lmi_coupling(tau0, dX)) / tau0)[:, c1]

    prob.add_psd(Phi0 - alpha * np.eye(4 * n), name="Phi0")
    # B1 and B4 are block columns; bound them through their n x n blocks
    _stacked_norm_cap(prob, [B1[r * n:(r + 1) * n, :] for r in (0, 2, 3)], nrm1, "coupling")
    _stacked_norm_cap(prob, [B4[r * n:(r + 1) * n, :] for r in (2, 3)], nrm4, "cross")
    prob.add_norm_cap(B23, nrm23, symmetric=True)
    prob.add_linear(alpha - 2 * nB * eta * nrm1 - gamma * nrm23
                    - 2 * nB * eta * gamma * nrm4 - eps, name="alpha_bound")

    Z = np.zeros((n, n))

    def psi_s(X):
        return cp.bmat([[Z, Z, Z], [Z, X["S0"], Z], [Z, Z, X["S1"]]]) \
            if isinstance(X["S0"], cp.Expression) else \
            np.block([[Z, Z, Z], [Z, X["S0"], Z], [Z, Z, X["S1"]]])

    Xsum = {k: X0[k] + dX[k] for k in LMI_VARIABLES}
    _, Psi_lin = lmi_matrices(A, B, K0, tau0, Xsum)
    Psi_lin = Psi_lin - (dtau / tau0 ** 2) * psi_s(X0)
    prob.add_psd(Psi_lin - beta * np.eye(3 * n), name="Psi0")
    # the block-diagonal norm is the larger of the two block norms
    prob.add_norm_cap(dX["S0"] / tau0 ** 2, nrmC, symmetric=True)
    prob.add_norm_cap(dX["S1"] / tau0 ** 2, nrmC, symmetric=True)
    prob.add_linear(beta - gamma * nrmC - eps, name="beta_bound")

    prob.add_norm_cap(dK, eta)
    prob.add_linear(dtau)
    cap = gamma if room is None else min(gamma, room)
    prob.add_linear(cap - dtau)

    reg = 1e-8 * (cp.sum_squares(dK) + sum(cp.sum_squares(v) for v in dX.values()))
    if T is not None:
        s = offset + dtau
        prob.minimize(-2 * (T - (base.tau - offset)) * s + cp.square(s) + reg)
    else:
        prob.minimize(reg)
    return _Relaxation(problem=prob, dK=dK, dtau=dtau, dX=dX)


def project_auxiliaries(plant: LtiPlant, K, tau: float, anchor: dict,
                        eps: float = EPS) -> RelaxationPoint:
    """Certificate at ``(K, tau)`` closest to ``anchor`` in the Frobenius sense.

    When ``anchor`` itself satisfies the constraints it is the minimizer and
    is returned without a solve.
    """
    anchor = _symmetric_parts(anchor)
    e_phi, e_psi = certificate_eigs(plant, K, tau, anchor)
    if min(e_phi, e_psi) >= 2 * eps:
        return RelaxationPoint(K=np.array(K, float), tau=float(tau), aux=anchor,
                               phi_min_eig=e_phi, psi_min_eig=e_psi)
    prob = FeasibilityProblem()
    X = lmi_variables(prob, plant.n)
    Phi, Psi = lmi_matrices(plant.A, plant.B, K, tau, X)
    prob.add_psd(Phi, margin=2 * eps, name="Phi")
    prob.add_psd(Psi, margin=2 * eps, name="Psi")
    prob.minimize(sum(cp.sum_squares(X[k] - anchor[k]) for k in LMI_VARIABLES))
    try:
        sol = solve_feasibility(prob)
    except (Infeasible, NumericalFailure) as exc:
        raise StepInfeasible(f"auxiliary projection failed: {exc}") from exc
    aux = _symmetric_parts({k: sol[k] for k in LMI_VARIABLES})
    e_phi, e_psi = certificate_eigs(plant, K, tau, aux)
    if min(e_phi, e_psi) < eps:
        raise StepInfeasible("projected auxiliaries fail re-verification")
    return RelaxationPoint(K=np.array(K, float), tau=float(tau), aux=aux,
                           phi_min_eig=e_phi, psi_min_eig=e_psi)


def _solve_relaxation(plant, point, T, offset, room, gamma, eta, eps):
    rel = assemble_relaxation(plant, point, gamma, eta, eps, T=T, offset=offset, room=room,
                              check_base=False)
    try:
        solve_feasibility(rel.problem)
    except (Infeasible, NumericalFailure) as exc:
        raise StepInfeasible(f"relaxation infeasible at gamma={gamma:.3e}, eta={eta:.3e}") from exc
    dtau = max(0.0, float(rel.dtau.value))
    K_new = point.K + np.asarray(rel.dK.value, float)
    X_new = _symmetric_parts({k: point.aux[k] + np.asarray(rel.dX[k].value, float)
                              for k in LMI_VARIABLES})
    return K_new, dtau, X_new


def trust_region_step(plant: LtiPlant, current: RelaxationPoint, T: float, Delta: float,
                      gamma: float, eta: float, eps: float = EPS, max_inner: int = 5,
                      grad_tol: float = 1e-12) -> RelaxationPoint:
    """One trust-region iteration on ``f(tau) = (T - tau)^2``.

    Scalar conjugate-gradient (Steihaug) iterations on the quadratic model;
    each line search along the CG direction is the convex relaxation, which
    also moves the gain and re-centres the certificate.  Stops at the
    trust-region boundary, at a stationary model, or when no progress is made.
    """
    tau_k = current.tau
    g = 2.0 * (T - tau_k)
    if g <= grad_tol * max(1.0, abs(T)):
        return current
    point = current
    grad_prev = -g
    for j in range(max_inner):
        offset = point.tau - tau_k
        room = min(Delta - offset, T - point.tau)
        if room <= 0:
            break
        try:
            K_new, dtau, X_new = _solve_relaxation(plant, point, T, offset, room, gamma, eta, eps)
        except StepInfeasible:
            if j == 0:
                raise
            break
        if dtau <= 1e-14 * max(1.0, tau_k):
            break
        z = point.tau + dtau
        new = project_auxiliaries(plant, K_new, z, X_new, eps)
        if not is_stable(plant, new.K, new.tau):
            log.warning("certified step failed the spectral check; step rejected")
            break
        point = new
        if z - tau_k >= Delta * (1 - 1e-12):
            break
        grad = -2.0 * (T - tau_k) + 2.0 * (z - tau_k)
        if abs(grad) <= grad_tol * max(1.0, abs(T)):
            break
        g = -grad + (grad ** 2 / grad_prev ** 2) * g
        grad_prev = grad
        if g <= 0:
            break
    return point


def _largest_certified_delay(plant, K, hi, eps, iters=8):
    """Bisection for the largest delay below ``hi`` with a certificate."""
    try:
        return certify(plant, K, hi, eps)
    except Infeasible:
        pass
    lo_pt = None
    lo, up = 0.0, hi
    for _ in range(iters):
        mid = 0.5 * (lo + up) if lo > 0 else up / 2
        try:
            lo_pt = certify(plant, K, mid, eps)
            lo = mid
        except Infeasible:
            up = mid
    if lo_pt is None:
        raise NoStabilizingPair("no certified delay found for the initial gain")
    return lo_pt


def precondition(plant: LtiPlant, net: NetworkModel, K_o, *, eps: float = EPS,
                 max_iter: int = 40, delta_frac: float = 0.2, tau_tol: float | None = None,
                 max_halvings: int = 6, tau_max: float | None = None) -> PreconditionResult:
    """Find ``(K', tau')`` stable with ``tau'`` equal to the network delay of ``K'``.

    Returns immediately when ``K_o`` already tolerates its own network delay.
    """
    K_o = plant.check_gain(K_o)
    m, n = plant.m, plant.n
    card0 = cardinality(K_o)
    tau_star = link_delay(card0, net)
    trace = []
    if is_stable(plant, K_o, tau_star):
        log.info("initial gain tolerates its network delay %.6g s", tau_star)
        return PreconditionResult(K_prime=K_o, tau_prime=tau_star, c_final=net.c,
                                  trace=(),
                                  fast_path=True, network=net)
    _, hurwitz = closed_loop_delay_free(plant, K_o)
    if not hurwitz:
        raise NotDelayFreeStable("initial gain must stabilize the delay-free loop")

    T = link_delay(m * n, net)
    tau_tol = 1e-9 * max(1.0, T) if tau_tol is None else tau_tol
    margin = delay_margin(plant, K_o)
    start = min(margin, T) * (1 - 1e-3)
    point = _largest_certified_delay(plant, K_o, start, eps)
    log.info("certified start delay %.6g s (margin %.6g s, target %.6g s)", point.tau, margin, T)
    trace.append(TraceRow(0, point.tau, cardinality(point.K), True))

    gamma = 1e-2 * point.tau
    eta = 1e-2 * max(float(np.linalg.norm(point.K)), 1e-12)
    for k in range(1, max_iter + 1):
        card_k = cardinality(point.K)
        tau_star = link_delay(card_k, net)
        if is_stable(plant, point.K, tau_star):
            return PreconditionResult(K_prime=point.K, tau_prime=tau_star, c_final=net.c,
                                      trace=tuple(trace), network=net)
        Delta = delta_frac * point.tau
        new = None
        g, e = gamma, eta
        for _ in range(max_halvings + 1):
            try:
                new = trust_region_step(plant, point, T, Delta, g, e, eps)
                break
            except StepInfeasible:
                g, e = 0.5 * g, 0.5 * e
        if new is None:
            log.info("relaxation infeasible for every (gamma, eta) at iteration %d", k)
            break
        dtau = new.tau - point.tau
        trace.append(TraceRow(k, new.tau, cardinality(new.K), dtau > 0))
        log.info("iteration %d: tau %.6g -> %.6g", k, point.tau, new.tau)
        point = new
        # grow the perturbation budget after a full step, shrink after a clipped one
        if dtau >= 0.9 * min(g, Delta):
            gamma = min(2 * g, Delta)
            eta = 2 * e
        else:
            gamma, eta = g, e
        if dtau <= tau_tol:
            break

    return _snap(plant, net, point, trace, tau_max)


def _snap(plant, net, point, trace, tau_max):
    """Move the delay to an edge of the current stable interval and re-size the bandwidth."""
    K = point.K
    card = cardinality(K)
    if card == 0:
        raise NoStabilizingPair("empty gain cannot be re-sized")
    tau_star = link_delay(card, net)
    if tau_max is None:
        tau_max = 4 * max(link_delay(plant.m * plant.n, net), point.tau, tau_star)
    ivs = stable_intervals(plant, K, tau_max)
    iv = ivs.interval_of(point.tau)
    if iv is None:
        raise NoStabilizingPair("iterate is not inside a stable interval")
    lo, hi = iv
    if lo <= tau_star <= hi and is_stable(plant, K, tau_star):
        tau_p, kind = tau_star, None
    elif tau_star > hi:
        tau_p, kind = interior_delay(plant, K, hi, point.tau), "right"
    else:
        tau_p, kind = interior_delay(plant, K, lo, point.tau), "left"
    if tau_p is None:
        tau_p, kind = point.tau, "iterate"
    if tau_p <= net.tau_p:
        raise NoStabilizingPair("stable delay does not exceed the propagation delay")
    c_final = net.c if kind is None else net.kappa * card / (tau_p - net.tau_p)
    net_f = net.with_bandwidth(c_final)
    tau_final = link_delay(card, net_f)
    log.info("snap %s: tau' = %.9g s, bandwidth %.6g -> %.6g", kind, tau_final, net.c, c_final)
    return PreconditionResult(K_prime=K, tau_prime=tau_final, c_final=c_final,
                              trace=tuple(trace), snap=kind, network=net_f)
