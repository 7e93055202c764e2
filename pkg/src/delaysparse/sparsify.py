"""Sparsity-promoting design of delayed state feedback.

A sweep over the l1 weight runs, for each weight, a few reweighted ADMM
rounds.  Each round alternates an H2-minimizing gain update (Anderson-Moore
iterations), entrywise or block soft-thresholding and a dual update, then
fixes the resulting pattern, moves the delay to the one the sparser gain
needs, and polishes the gain on its pattern with Newton steps.

Two delay modes are supported: ``"adaptive"`` lets the delay follow the number
of links, ``"fixed"`` keeps the initial delay throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_sylvester

from .errors import LostStability, NoStableInterval, Unstable
from .model import (LtiPlant, NetworkModel, SparsityPattern, apply_pattern, cardinality,
                    link_delay)
from .spectral import evaluate, newton_direction, select_order
from .stability import interior_delay, is_stable, stable_intervals

__all__ = [
    "AdmmState",
    "TraceRecord",
    "SparsifyTrace",
    "BoundReport",
    "kmin",
    "gmin",
    "admm",
    "update_tau",
    "polish",
    "reweight",
    "lambda_schedule",
    "sparsify_run",
]

log = logging.getLogger(__name__)

EPS1 = 1e-4
ARMIJO_C = 1e-4
MIN_STEP = 1e-10


def _blocks_as_masks(blocks, shape):
    if blocks is None:
        return None
    masks = []
    for b in blocks:
        mask = np.zeros(shape, bool)
        if isinstance(b, np.ndarray) and b.dtype == bool:
            mask = b.copy()
        else:
            rows, cols = b
            mask[np.ix_(np.atleast_1d(rows), np.atleast_1d(cols))] = True
        masks.append(mask)
    total = np.sum(masks, axis=0)
    if np.any(total > 1):
        raise ValueError("blocks must not overlap")
    # entries outside all declared blocks form singleton blocks
    for idx in zip(*np.nonzero(total == 0)):
        mask = np.zeros(shape, bool)
        mask[idx] = True
        masks.append(mask)
    return masks


@dataclass
class AdmmState:
    K: np.ndarray
    G: np.ndarray
    Lambda: np.ndarray
    rho: float
    W: np.ndarray
    lambda_reg: float
    iterations: int = 0
    converged: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be nonnegative")


# -- K step ------------------------------------------------------------------

def _proximal_value(J, K, V, rho):
    return J + 0.5 * rho * float(np.sum((K - V) ** 2))


def kmin(plant: LtiPlant, tau: float, N: int, G, Lambda, rho: float, K_init,
         gtol: float | None = None, max_iter: int = 200) -> np.ndarray:
    """Minimize ``J(K) + (rho/2) ||K - V||_F^2`` with ``V = G - Lambda / rho``.

    Each Anderson-Moore sweep holds both Gramians at the current gain and
    solves the resulting Sylvester equation
    ``(rho/2) R^-1 K+ + K+ L_ee = R^-1 (B^T (P L)_ht + (rho/2) V)``
    for the next candidate; the step along ``K+ - K`` is chosen by Armijo
    backtracking.  ``rho = 0`` gives the plain delayed-H2 minimizer.
    """
    K = plant.check_gain(K_init)
    G = np.asarray(G, float)
    Lambda = np.asarray(Lambda, float)
    V = G - Lambda / rho if rho > 0 else np.zeros_like(K)
    try:
        ev = evaluate(plant, K, tau, N)
    except Unstable as exc:
        raise LostStability("kmin started from an unstable gain") from exc
    R = plant.R
    Rinv = np.linalg.inv(R)
    phi = _proximal_value(ev.J, K, V, rho)
    if gtol is None:
        gtol = 1e-6 * (1.0 + ev.J)
    for it in range(max_iter):
        grad = ev.gradient() + rho * (K - V)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= gtol:
            break
        sysm = ev.system
        L_ee = ev.L[sysm.effort, sysm.effort]
        PL = ev.P[sysm.head, :] @ ev.L[:, sysm.tail]
        rhs = Rinv @ (plant.B.T @ PL + 0.5 * rho * V)
        K_plus = solve_sylvester(0.5 * rho * Rinv, L_ee, rhs)
        D = K_plus - K
        slope = float(np.sum(grad * D))
        if not slope < 0:
            D, slope = -grad, -gnorm ** 2
        s, accepted = 1.0, False
        unstable_only = True
        while s >= MIN_STEP:
            Kt = K + s * D
            try:
                ev_t = evaluate(plant, Kt, tau, N)
            except Unstable:
                s *= 0.5
                continue
            unstable_only = False
            phi_t = _proximal_value(ev_t.J, Kt, V, rho)
            if phi_t <= phi + ARMIJO_C * s * slope:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            if unstable_only:
                raise LostStability("line search could not keep the loop stable")
            log.debug("kmin line search stalled at iteration %d, |grad| %.3e", it, gnorm)
            break
        K, ev, phi = Kt, ev_t, phi_t
    return K


# -- G step ------------------------------------------------------------------

def gmin(K, Lambda, rho: float, lambda_reg: float, W, blocks=None) -> np.ndarray:
    """Weighted soft-thresholding of ``U = Lambda + rho K``.

    Entrywise ``G = (1 - lambda W / |U|) U / rho`` where ``|U| > lambda W`` and
    zero elsewhere.  With ``blocks`` (list of boolean masks or
    ``(rows, cols)`` index pairs) the block Frobenius norm replaces ``|U|``
    and ``W`` is read at any entry of the block.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    K = np.asarray(K, float)
    U = np.asarray(Lambda, float) + rho * K
    thr = lambda_reg * np.asarray(W, float)
    masks = _blocks_as_masks(blocks, K.shape)
    if masks is None:
        absU = np.abs(U)
        scale = np.where(absU > thr, 1.0 - thr / np.where(absU > 0, absU, 1.0), 0.0)
        return scale * U / rho
    G = np.zeros_like(U)
    for mask in masks:
        nrm = float(np.linalg.norm(U[mask]))
        t = float(thr[mask].max())
        if nrm > t:
            G[mask] = (1.0 - t / nrm) * U[mask] / rho
    return G


def reweight(G, eps1: float = EPS1, blocks=None) -> np.ndarray:
    """Weights ``1 / (|G| + eps1)``; per block with the block Frobenius norm."""
    if not eps1 > 0:
        raise ValueError("eps1 must be positive")
    G = np.asarray(G, float)
    masks = _blocks_as_masks(blocks, G.shape)
    if masks is None:
        return 1.0 / (np.abs(G) + eps1)
    W = np.empty_like(G)
    for mask in masks:
        W[mask] = 1.0 / (np.linalg.norm(G[mask]) + eps1)
    return W


def admm(plant: LtiPlant, tau: float, N: int, state: AdmmState, max_iter: int = 100,
         eps_pri: float | None = None, eps_dual: float | None = None, blocks=None,
         kmin_iter: int = 5, eps_rel: float = 1e-3,
         rho_min: float | None = None) -> AdmmState:
    """Alternate the K step, the G step and the dual update.

    Stops when ``||K - G||_F <= eps_pri + eps_rel max(||K||, ||G||)`` and
    ``rho ||G+ - G||_F <= eps_dual + eps_rel ||Lambda||``, the usual
    absolute-plus-relative test.  At the iteration cap the last iterate is
    returned with ``converged=False``.

    With ``rho_min`` set the penalty is balanced against the residuals:
    halved (down to ``rho_min``) when the dual residual exceeds ten times
    the primal one, doubled in the opposite case.  ``Lambda`` is unscaled so
    it needs no correction.
    """
    mn = state.K.size
    eps_pri = 1e-4 * np.sqrt(mn) if eps_pri is None else eps_pri
    eps_dual = 1e-4 * np.sqrt(mn) if eps_dual is None else eps_dual
    K, G, Lam, rho = state.K, state.G, state.Lambda, state.rho
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        K = kmin(plant, tau, N, G, Lam, rho, K, max_iter=kmin_iter)
        G_new = gmin(K, Lam, rho, state.lambda_reg, state.W, blocks)
        Lam = Lam + rho * (K - G_new)
        r_pri = float(np.linalg.norm(K - G_new))
        r_dual = rho * float(np.linalg.norm(G_new - G))
        G = G_new
        tol_pri = eps_pri + eps_rel * max(np.linalg.norm(K), np.linalg.norm(G))
        tol_dual = eps_dual + eps_rel * np.linalg.norm(Lam)
        if r_pri <= tol_pri and r_dual <= tol_dual:
            converged = True
            break
        if rho_min is not None:
            if r_dual > 10.0 * r_pri and rho > rho_min:
                rho = max(0.5 * rho, rho_min)
            elif r_pri > 10.0 * r_dual:
                rho = 2.0 * rho
    if not converged:
        log.debug("ADMM hit the iteration cap (lambda %.3e)", state.lambda_reg)
    return replace(state, K=K, G=G, Lambda=Lam, rho=rho, iterations=it, converged=converged)


# -- delay update and polishing ---------------------------------------------

def update_tau(plant: LtiPlant, K_next, tau_prev: float, net: NetworkModel,
               tau_max: float | None = None):
    """Delay for the sparser gain and the case that produced it.

    Returns ``(tau, "4-1")`` when the gain tolerates its own network delay
    ``tau*``.  Otherwise the left edge of the nearest stable interval to the
    right of ``tau*`` is used (``"4-2a"``); if none is located in the search
    range the left edge of the interval containing ``tau_prev`` is used
    (``"4-2b"``).  Edges are nudged inward to a point that passes
    ``is_stable``.
    """
    K_next = plant.check_gain(K_next)
    tau_star = link_delay(cardinality(K_next), net)
    if is_stable(plant, K_next, tau_star):
        return tau_star, "4-1"
    if tau_max is None:
        tau_max = 2.0 * max(tau_prev, tau_star) + 1e-12
    ivs = stable_intervals(plant, K_next, tau_max)
    right = [iv for iv in ivs.intervals if iv[0] >= tau_star]
    if right:
        lo, hi = right[0]
        t = interior_delay(plant, K_next, lo, hi)
        if t is not None:
            return t, "4-2a"
    iv = ivs.interval_of(tau_prev)
    if iv is not None and iv[0] > tau_star:
        t = interior_delay(plant, K_next, iv[0], iv[1])
        if t is not None:
            return t, "4-2b"
    raise NoStableInterval(f"no stable delay at or above {tau_star:.6g} s")


def polish(plant: LtiPlant, K, tau: float, N: int, pattern: SparsityPattern | None = None,
           gtol: float | None = None, max_iter: int = 50) -> np.ndarray:
    """Newton refinement of ``K`` restricted to ``pattern``.

    Armijo backtracking keeps the cost nonincreasing; unstable trial points
    are rejected by halving.  If the step underflows the current gain is
    returned.
    """
    K = plant.check_gain(K)
    pattern = SparsityPattern.of(K) if pattern is None else pattern
    mask = pattern.mask
    K = apply_pattern(K, pattern)
    try:
        ev = evaluate(plant, K, tau, N)
    except Unstable as exc:
        raise LostStability("polish needs a stable starting gain") from exc
    if gtol is None:
        gtol = 1e-6 * (1.0 + ev.J)
    for _ in range(max_iter):
        g = np.where(mask, ev.gradient(), 0.0)
        if np.linalg.norm(g) <= gtol:
            break
        D = newton_direction(plant, K, tau, N, pattern=pattern, evaluation=ev)
        slope = float(np.sum(g * D))
        if not slope < 0:
            D, slope = -g, -float(np.sum(g * g))
        s, accepted = 1.0, False
        while s >= MIN_STEP:
            Kt = apply_pattern(K + s * D, pattern)
            try:
                ev_t = evaluate(plant, Kt, tau, N)
            except Unstable:
                s *= 0.5
                continue
            if ev_t.J <= ev.J + ARMIJO_C * s * slope:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        K, ev = Kt, ev_t
    return K


# -- the main sweep ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TraceRecord:
    i: int
    lambda_reg: float
    tau: float
    card: int
    s: int
    J: float
    J_unpolished: float
    stable: bool
    snap_case: str
    tau_star: float
    K: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class BoundReport:
    """Delay gap at the end of a run against its a-priori bound.

    ``bound = kappa (Card0 - Cardf) / c_f - eps r_max`` with
    ``eps = max_i (tau*_i - tau_i)``.  ``eps <= 0`` whenever snaps only move
    right, which makes the ``- eps r_max`` term loosen the bound;
    ``sign_anomaly`` flags that case.
    """

    gap: float
    bound: float
    eps: float
    r_max: int
    holds: bool
    sign_anomaly: bool
    has_snap: bool


@dataclass(frozen=True, eq=False)
class SparsifyTrace:
    records: tuple
    K_f: np.ndarray
    tau_f: float
    tau_star_f: float
    c_f: float
    bound: BoundReport
    delay_mode: str
    N: int

    def best_per_level(self) -> dict:
        """Lowest-cost record for each sparsity level ``s``."""
        best = {}
        for r in self.records:
            if r.s not in best or r.J < best[r.s].J:
                best[r.s] = r
        return dict(sorted(best.items()))


def lambda_schedule(J_dense: float, mn: int, count: int = 20, lo: float = 1e-4,
                    hi: float = 1e1) -> np.ndarray:
    """Logarithmic sweep of the l1 weight scaled by ``J_dense / (m n)``."""
    return np.logspace(np.log10(lo), np.log10(hi), count) * J_dense / mn


def sparsify_run(plant: LtiPlant, net: NetworkModel, K_prime, tau_prime: float,
                 lambda_schedule_=None, r_max: int = 5, *, delay_mode: str = "adaptive",
                 N: int | None = None, rho_factor: float = 100.0, rho_floor: float = 1.0,
                 eps1: float = EPS1,
                 blocks=None, warm_start: bool = True, admm_iter: int = 100,
                 kmin_iter: int = 5, polish_iter: int = 50,
                 balance_rho: bool = True) -> SparsifyTrace:
    """Sweep the l1 weight and record every accepted reweighting round.

    Each round: ADMM at the current delay, hard-threshold ``K`` to the pattern
    of ``G`` (nested in the previous pattern), move the delay with
    :func:`update_tau` (``"adaptive"``) or keep it (``"fixed"``), polish on
    the pattern, and reweight.  A round that loses stability, finds no stable
    delay, or would raise the delay is rolled back and ends the current weight.
    """
    if delay_mode not in ("adaptive", "fixed"):
        raise ValueError("delay_mode must be 'adaptive' or 'fixed'")
    if r_max < 1:
        raise ValueError("r_max must be at least 1")
    K0 = plant.check_gain(K_prime)
    tau0 = float(tau_prime)
    if not is_stable(plant, K0, tau0):
        raise LostStability("initial pair is not stable")
    if N is None:
        N = select_order(plant, K0, tau0)
    mn = K0.size
    card0 = cardinality(K0)
    J0 = evaluate(plant, K0, tau0, N).J
    if lambda_schedule_ is None:
        lambda_schedule_ = lambda_schedule(J0, mn)
    lambdas = [float(v) for v in lambda_schedule_]
    full = SparsityPattern(np.abs(K0) > 0)

    records = []
    K_stage, tau_stage, pat_stage = K0, tau0, full
    step = 0
    for lam in lambdas:
        K, tau, pat = (K_stage, tau_stage, pat_stage) if warm_start else (K0, tau0, full)
        W = np.ones_like(K)
        # the floor keeps the penalty near the curvature of J so ADMM converges
        rho_min = rho_floor * J0 / mn
        rho = max(rho_factor * lam, rho_min)
        for i in range(r_max):
            state = AdmmState(K=K, G=K.copy(), Lambda=np.zeros_like(K), rho=rho, W=W,
                              lambda_reg=lam)
            try:
                state = admm(plant, tau, N, state, max_iter=admm_iter, blocks=blocks,
                             kmin_iter=kmin_iter, rho_min=rho_min if balance_rho else None)
            except LostStability:
                log.info("lambda %.3e round %d: ADMM lost stability, rolled back", lam, i)
                break
            new_pat = SparsityPattern((state.G != 0) & pat.mask) if lam > 0 else pat
            if new_pat.card == 0:
                log.info("lambda %.3e round %d: empty pattern, rolled back", lam, i)
                break
            K_thr = apply_pattern(state.K, new_pat)
            if delay_mode == "adaptive":
                try:
                    tau_new, case = update_tau(plant, K_thr, tau, net)
                except NoStableInterval:
                    log.info("lambda %.3e round %d: no stable delay, rolled back", lam, i)
                    break
                if tau_new > tau * (1 + 1e-12):
                    log.info("lambda %.3e round %d: delay would increase, rolled back", lam, i)
                    break
            else:
                tau_new, case = tau, "none"
                if not is_stable(plant, K_thr, tau_new):
                    log.info("lambda %.3e round %d: unstable at fixed delay, rolled back", lam, i)
                    break
            try:
                J_thr = evaluate(plant, K_thr, tau_new, N).J
                K_pol = polish(plant, K_thr, tau_new, N, new_pat, max_iter=polish_iter)
            except (Unstable, LostStability):
                log.info("lambda %.3e round %d: polish failed, rolled back", lam, i)
                break
            J_pol = evaluate(plant, K_pol, tau_new, N).J
            if J_pol > J_thr or not is_stable(plant, K_pol, tau_new):
                K_pol, J_pol = K_thr, J_thr
            card = new_pat.card
            step += 1
            records.append(TraceRecord(
                i=step, lambda_reg=lam, tau=tau_new, card=card, s=mn - card, J=J_pol,
                J_unpolished=J_thr, stable=True, snap_case=case,
                tau_star=link_delay(card, net), K=K_pol))
            log.info("lambda %.3e round %d: card %d, tau %.6g, J %.6g (%s), ADMM %d its%s",
                     lam, i, card, tau_new, J_pol, case, state.iterations,
                     "" if state.converged else " (cap)")
            K, tau, pat = K_pol, tau_new, new_pat
            W = reweight(state.G, eps1, blocks)
        K_stage, tau_stage, pat_stage = K, tau, pat

    K_f, tau_f = (records[-1].K, records[-1].tau) if records else (K0, tau0)
    card_f = cardinality(K_f)
    tau_star_f = link_delay(card_f, net)
    bound = _bound_report(records, card0, card_f, tau_f, tau_star_f, net, r_max)
    return SparsifyTrace(records=tuple(records), K_f=K_f, tau_f=tau_f, tau_star_f=tau_star_f,
                         c_f=net.c, bound=bound, delay_mode=delay_mode, N=N)


def _bound_report(records, card0, card_f, tau_f, tau_star_f, net, r_max):
    gaps = [r.tau_star - r.tau for r in records]
    eps = max(gaps) if gaps else 0.0
    bound = net.kappa * (card0 - card_f) / net.c - eps * r_max
    gap = tau_f - tau_star_f
    tol = 1e-12 * max(1.0, abs(bound))
    return BoundReport(gap=gap, bound=bound, eps=eps, r_max=r_max, holds=gap <= bound + tol,
                       sign_anomaly=eps <= 0,
                       has_snap=any(r.snap_case.startswith("4-2") for r in records))
