"""Fair division of a link budget among users sharing one network.

Each user has a performance-ratio curve ``r_i(s_i)`` over the number of
removed links ``s_i``.  The allocator minimizes the variance of the ratios
plus a small multiple of their sum, subject to ``sum_i s_i`` being fixed.

The curves are made piecewise affine and spiked between breakpoints so that
minima sit on breakpoints; the spiked curves admit an exact big-M
mixed-integer encoding.  The concave part of the variance is linearized at
the current allocation (convex-concave procedure), and each linearized
problem is solved exactly over breakpoint vectors by branch-and-bound on the
segment selectors with Lagrangian relaxation bounds.

Arithmetic is generic: curves built from ``fractions.Fraction`` data keep
every curve value, encoding row and decoded value exact.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import CapExceeded, MiqpInfeasible

__all__ = [
    "PerfCurve",
    "ModifiedCurve",
    "MilpEncoding",
    "CcpRecord",
    "AllocationResult",
    "variance_objective",
    "modify_curves",
    "encode_milp",
    "ccp_step",
    "allocate",
    "enumerate_oracle",
    "initial_allocation",
    "build_curve",
]

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 1e-2
ORACLE_CAP = 10 ** 6
LEAF_ENUMERATION = 256


def _is_exact(x) -> bool:
    return isinstance(x, (int, Fraction)) and not isinstance(x, bool)


@dataclass(frozen=True)
class PerfCurve:
    """Ratios of one user at its achievable sparsity levels.

    ``breakpoints`` are strictly increasing integers; ``ratios`` are at least
    one with the minimum exactly one.  Between breakpoints the curve is the
    affine interpolant.  ``size`` is the number of gain entries ``m n`` (used
    for proportional starting allocations).
    """

    user: int
    breakpoints: tuple
    ratios: tuple
    J_nominal: float | None = None
    size: int | None = None

    def __post_init__(self):
        bp = tuple(int(b) for b in self.breakpoints)
        if any(b != o for b, o in zip(bp, self.breakpoints)):
            raise ValueError("breakpoints must be integers")
        rt = tuple(self.ratios)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "ratios", rt)
        if self.user < 1:
            raise ValueError("user ids start at 1")
        if len(bp) < 2:
            raise ValueError("a curve needs at least two breakpoints")
        if len(rt) != len(bp):
            raise ValueError("one ratio per breakpoint")
        if any(b >= c for b, c in zip(bp[:-1], bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if min(rt) != 1:
            raise ValueError("ratios must attain their minimum value 1")

    @property
    def p(self) -> int:
        return len(self.breakpoints)

    @property
    def exact(self) -> bool:
        return all(_is_exact(r) for r in self.ratios)

    def knots(self):
        """Breakpoints as Fractions for exact curves, floats otherwise."""
        conv = Fraction if self.exact else float
        return tuple(conv(b) for b in self.breakpoints)

    def pieces(self):
        """Slopes and intercepts ``(a_j, b_j)`` of the affine pieces."""
        return _pieces(self.knots(), self.ratios)

    def ratio_at(self, s):
        """Ratio at a breakpoint."""
        try:
            return self.ratios[self.breakpoints.index(int(s))]
        except ValueError:
            raise ValueError(f"{s} is not a breakpoint of user {self.user}") from None

    def value(self, s):
        """Affine interpolant at any ``s`` in range."""
        bp = self.breakpoints
        if s < bp[0] or s > bp[-1]:
            raise ValueError("s outside the curve range")
        j = min(max(0, _bisect_right(bp, s) - 1), self.p - 2)
        a, b = self.pieces()[j]
        return a * s + b


def _div(a, n):
    """``a / n`` that stays exact for integer or Fraction ``a``."""
    return Fraction(a) / n if _is_exact(a) else a / n


def _bisect_right(seq, x):
    lo, hi = 0, len(seq)
    while lo < hi:
        mid = (lo + hi) // 2
        if x < seq[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def variance_objective(ratios, sigma=DEFAULT_SIGMA):
    """Return ``(H, F)``: sample variance of ``ratios`` and ``H + sigma sum(r)``."""
    r = list(ratios)
    N = len(r)
    if N == 0:
        raise ValueError("need at least one ratio")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    tot = sum(r)
    H = _div(sum(x * x for x in r), N) - _div(tot * tot, N * N)
    return H, H + sigma * tot


# -- curve modification ------------------------------------------------------

@dataclass(frozen=True)
class ModifiedCurve:
    """Spiked piecewise-affine curve with knots ``x`` and values ``y``.

    Every base interval ``[s_j, s_j+1]`` is split at ``s_j + eps`` and
    ``s_j+1 - eps`` where the curve takes the value ``user * D``.
    """

    base: PerfCurve
    eps: object
    D: object
    x: tuple
    y: tuple
    breakpoint_index: tuple

    @property
    def spike(self):
        return self.base.user * self.D

    @property
    def P(self) -> int:
        return len(self.x)

    def pieces(self):
        out = []
        for k in range(self.P - 1):
            a = (self.y[k + 1] - self.y[k]) / (self.x[k + 1] - self.x[k])
            out.append((a, self.y[k] - a * self.x[k]))
        return out

    def value(self, s):
        if s < self.x[0] or s > self.x[-1]:
            raise ValueError("s outside the curve range")
        k = min(max(0, _bisect_right(self.x, s) - 1), self.P - 2)
        a, b = self.pieces()[k]
        return a * s + b

    def segments(self):
        """Sub-interval labels 1, 2, 3 of every piece in order."""
        return tuple((k % 3) + 1 for k in range(self.P - 1))


def modify_curves(curves, sigma=DEFAULT_SIGMA, eps=None, D=None):
    """Spike every curve between its breakpoints.

    ``eps = min(sigma, 1/N) / 2`` and ``D = 2 N^3 r_max^2 / eps`` by default.
    If some breakpoint gap is not longer than ``2 eps``, ``eps`` is reduced
    to a quarter of the smallest gap (logged).
    """
    curves = list(curves)
    N = len(curves)
    if N == 0:
        raise ValueError("need at least one curve")
    ids = [c.user for c in curves]
    if sorted(ids) != list(range(1, N + 1)):
        raise ValueError("user ids must be 1..N")
    exact = all(_is_exact(v) for c in curves for v in c.ratios) and _is_exact(sigma)
    one = Fraction(1) if exact else 1.0
    if eps is None:
        eps = min(sigma * one, one / N) / 2
    min_gap = min(b - a for c in curves for a, b in zip(c.breakpoints[:-1], c.breakpoints[1:]))
    if not min_gap > 2 * eps:
        new = min_gap * one / 4
        log.info("eps reduced from %s to %s to fit the smallest breakpoint gap", eps, new)
        eps = new
    r_max = max(max(c.ratios) for c in curves)
    if D is None:
        D = 2 * N ** 3 * r_max * r_max / eps
    out = []
    for c in curves:
        spike = c.user * D
        xs, ys, idx = [], [], []
        for j in range(c.p - 1):
            s0, s1 = c.breakpoints[j], c.breakpoints[j + 1]
            xs += [s0 * one, s0 + eps, s1 - eps]
            ys += [c.ratios[j], spike, spike]
            idx += [j, -1, -1]
        xs.append(c.breakpoints[-1] * one)
        ys.append(c.ratios[-1])
        idx.append(c.p - 1)
        out.append(ModifiedCurve(base=c, eps=eps, D=D, x=tuple(xs), y=tuple(ys),
                                 breakpoint_index=tuple(idx)))
    return out


# -- big-M encoding ----------------------------------------------------------

@dataclass(frozen=True)
class MilpEncoding:
    """Rows ``G v <= g`` for one curve with ``v = [zt, z_1..z_{P-2}, s, d_1..d_{P-2}]``.

    ``d_j = 1`` exactly when ``s >= x_{j+1}``; ``z_1`` carries the first or
    second piece, ``z_j`` (``j >= 2``) carries the change of piece at knot
    ``x_{j+1}``, and ``zt = sum z_j`` is the curve value.
    """

    x: tuple
    y: tuple
    rows: tuple
    rhs: tuple
    d_max: object
    d_min: object
    eps_gap: object
    t: tuple
    ordering: str
    names: tuple = field(repr=False)

    @property
    def P(self) -> int:
        return len(self.x)

    @property
    def nbin(self) -> int:
        return max(self.P - 2, 0)

    @property
    def nvar(self) -> int:
        return 2 * self.P - 2 if self.P > 2 else 2

    @property
    def s_index(self) -> int:
        return self.P - 1 if self.P > 2 else 1

    def delta_index(self, j: int) -> int:
        """Position of ``d_j`` (1-based ``j``) in ``v``."""
        return self.P - 1 + j

    def z_index(self, j: int) -> int:
        return j

    def dense(self):
        """``(G, g)`` as float arrays."""
        G = np.zeros((len(self.rows), self.nvar))
        for r, row in enumerate(self.rows):
            for c, v in row.items():
                G[r, c] = float(v)
        return G, np.array([float(v) for v in self.rhs])

    def residuals(self, v):
        """``g - G v`` row by row, in the arithmetic of ``v``."""
        return [b - sum(coef * v[c] for c, coef in row.items())
                for row, b in zip(self.rows, self.rhs)]

    def is_feasible(self, v) -> bool:
        return all(r >= 0 for r in self.residuals(v))

    def assignment(self, s, delta=None):
        """Assignment implied by ``s`` (and optionally a chosen ``delta``)."""
        P = self.P
        pieces = _pieces(self.x, self.y)
        if P == 2:
            a, b = pieces[0]
            return [a * s + b, s]
        if delta is None:
            delta = [1 if s >= self.x[j] else 0 for j in range(1, P - 1)]
        z = []
        a1, b1 = pieces[0]
        a2, b2 = pieces[1]
        z.append(a2 * s + b2 if delta[0] else a1 * s + b1)
        for j in range(2, P - 1):
            (ap, bp), (an, bn) = pieces[j - 1], pieces[j]
            z.append((an - ap) * s + (bn - bp) if delta[j - 1] else 0 * s)
        return [sum(z)] + z + [s] + list(delta)

    def feasible_deltas(self, s):
        """All 0/1 vectors meeting the selector and ordering rows at ``s``."""
        nb = self.nbin
        out = []
        sel_rows = [(row, b) for row, b, nm in zip(self.rows, self.rhs, self.names)
                    if nm.startswith(("sel", "ord", "sbound"))]
        for bits in itertools.product((0, 1), repeat=nb):
            v = [0] * self.nvar
            v[self.s_index] = s
            for j, bit in enumerate(bits, start=1):
                v[self.delta_index(j)] = bit
            if all(b - sum(coef * v[c] for c, coef in row.items()) >= 0 for row, b in sel_rows):
                out.append(bits)
        return out

    def pinned_value(self, s, delta):
        """Interval ``[lo, hi]`` allowed for ``zt`` once ``s`` and ``delta`` are fixed.

        Each selector-value row contains exactly one ``z`` entry, so the
        ``z`` intervals are read off row by row; the aggregation rows then
        bound ``zt``.
        """
        nb = self.nbin
        fixed = {self.s_index: s}
        for j in range(1, nb + 1):
            fixed[self.delta_index(j)] = delta[j - 1]
        zidx = [0] if self.P == 2 else list(range(1, nb + 1))
        lo = {i: None for i in zidx}
        hi = {i: None for i in zidx}
        for row, b, nm in zip(self.rows, self.rhs, self.names):
            if not nm.startswith("val"):
                continue
            (c,) = [k for k in row if k not in fixed]
            rest = b - sum(coef * fixed[k] for k, coef in row.items() if k != c)
            bound = rest / row[c]
            if row[c] > 0:
                hi[c] = bound if hi[c] is None else min(hi[c], bound)
            else:
                lo[c] = bound if lo[c] is None else max(lo[c], bound)
        if any(lo[i] is None or hi[i] is None or lo[i] > hi[i] for i in zidx):
            return None
        return sum(lo[i] for i in zidx), sum(hi[i] for i in zidx)

    def decode(self, s):
        """Curve value forced by the rows at ``s``.

        Raises ``ValueError`` unless exactly one selector vector is feasible
        and it pins ``zt`` to a single value.
        """
        if self.P == 2:
            deltas = [()]
        elif self.nbin <= 12:
            deltas = self.feasible_deltas(s)
        else:
            deltas = [self._monotone_check(s)]
        if len(deltas) != 1:
            raise ValueError(f"{len(deltas)} selector vectors feasible at s={s}")
        pin = self.pinned_value(s, deltas[0])
        if pin is None or pin[0] != pin[1]:
            raise ValueError(f"value not pinned at s={s}: {pin}")
        v = self.assignment(s, list(deltas[0]) or None)
        if not self.is_feasible(v) or v[0] != pin[0]:
            raise ValueError(f"implied assignment infeasible at s={s}")
        return pin[0]

    def _monotone_check(self, s):
        """Selector check restricted to monotone vectors (large encodings)."""
        nb = self.nbin
        sel_rows = [(row, b) for row, b, nm in zip(self.rows, self.rhs, self.names)
                    if nm.startswith(("sel", "ord", "sbound"))]
        found = []
        for k in range(nb + 1):
            bits = (1,) * k + (0,) * (nb - k)
            v = [0] * self.nvar
            v[self.s_index] = s
            for j, bit in enumerate(bits, start=1):
                v[self.delta_index(j)] = bit
            if all(b - sum(coef * v[c] for c, coef in row.items()) >= 0 for row, b in sel_rows):
                found.append(bits)
        if len(found) != 1:
            raise ValueError(f"{len(found)} selector vectors feasible at s={s}")
        return found[0]


def _pieces(x, y):
    out = []
    for k in range(len(x) - 1):
        a = (y[k + 1] - y[k]) / (x[k + 1] - x[k])
        out.append((a, y[k] - a * x[k]))
    return out


def _affine_range(a, b, lo, hi):
    """Largest ``|a s + b|`` over ``[lo, hi]``."""
    return max(abs(a * lo + b), abs(a * hi + b))


def encode_milp(curve, eps_gap=None, ordering: str = "consecutive") -> MilpEncoding:
    """Big-M rows for a base or modified curve.

    ``eps_gap`` replaces the strict inequality ``s < x_{j+1}`` by
    ``s <= x_{j+1} - eps_gap``; defaults are ``1/2`` on base curves (integer
    knots) and ``eps / 4`` on modified curves.  ``ordering="consecutive"``
    emits ``d_{j+1} <= d_j`` only, which implies all pairs; ``"all"`` emits
    every pair.
    """
    if isinstance(curve, ModifiedCurve):
        x, y = curve.x, curve.y
        default_gap = curve.eps / 4
    else:
        x = curve.knots()
        y = tuple(curve.ratios)
        default_gap = Fraction(1, 2) if curve.exact else 0.5
    eps_gap = default_gap if eps_gap is None else eps_gap
    if ordering not in ("consecutive", "all"):
        raise ValueError("ordering must be 'consecutive' or 'all'")
    P = len(x)
    pieces = _pieces(x, y)
    lo, hi = x[0], x[-1]
    d_max = x[-1] - x[0]
    d_min = x[1] - x[-1] if P > 1 else 0
    rows, rhs, names = [], [], []

    def add(row, b, name):
        rows.append({k: v for k, v in row.items() if v != 0})
        rhs.append(b)
        names.append(name)

    if P == 2:
        a, b = pieces[0]
        # v = [zt, s]
        add({0: 1, 1: -a}, b, "val:zt")
        add({0: -1, 1: a}, -b, "val:zt")
        add({1: -1}, -lo, "sbound:lo")
        add({1: 1}, hi, "sbound:hi")
        return MilpEncoding(x=tuple(x), y=tuple(y), rows=tuple(rows), rhs=tuple(rhs),
                            d_max=d_max, d_min=d_min, eps_gap=eps_gap, t=(), ordering=ordering,
                            names=tuple(names))

    nb = P - 2
    S = P - 1                       # index of s

    def D(j):
        return P - 1 + j            # index of d_j, j = 1..nb

    add({S: -1}, -lo, "sbound:lo")
    add({S: 1}, hi, "sbound:hi")
    for j in range(1, nb + 1):
        knot = x[j]                 # x_{j+1} in 1-based terms
        add({D(j): d_max, S: -1}, -knot + d_max, f"sel:{j}:ge")
        add({D(j): d_min - eps_gap, S: 1}, knot - eps_gap, f"sel:{j}:lt")
        add({D(j): -1}, 0 * d_max, f"sel:{j}:bin0")
        add({D(j): 1}, 1 + 0 * d_max, f"sel:{j}:bin1")
    if ordering == "consecutive":
        for j in range(2, nb + 1):
            add({D(j): 1, D(j - 1): -1}, 0 * d_max, f"ord:{j}:{j - 1}")
    else:
        for j in range(2, nb + 1):
            for l in range(1, j):
                add({D(j): 1, D(l): -1}, 0 * d_max, f"ord:{j}:{l}")

    t = []
    # z_1 switches between the first and second piece
    (a1, b1), (a2, b2) = pieces[0], pieces[1]
    M1 = _affine_range(a2 - a1, b2 - b1, lo, hi)
    t.append(M1)
    # d_1 = 1 -> z_1 = a2 s + b2
    add({1: 1, S: -a2, D(1): M1}, b2 + M1, "val:1:on+")
    add({1: -1, S: a2, D(1): M1}, -b2 + M1, "val:1:on-")
    # d_1 = 0 -> z_1 = a1 s + b1
    add({1: 1, S: -a1, D(1): -M1}, b1, "val:1:off+")
    add({1: -1, S: a1, D(1): -M1}, -b1, "val:1:off-")
    for j in range(2, nb + 1):
        (ap, bp), (an, bn) = pieces[j - 1], pieces[j]
        da, db = an - ap, bn - bp
        T = _affine_range(da, db, lo, hi)
        t.append(T)
        # d_j = 0 -> z_j = 0
        add({j: 1, D(j): -T}, 0 * T, f"val:{j}:zero+")
        add({j: -1, D(j): -T}, 0 * T, f"val:{j}:zero-")
        # d_j = 1 -> z_j = da s + db
        add({j: 1, S: -da, D(j): T}, db + T, f"val:{j}:on+")
        add({j: -1, S: da, D(j): T}, -db + T, f"val:{j}:on-")
    agg = {0: 1}
    agg.update({j: -1 for j in range(1, nb + 1)})
    add(agg, 0 * d_max, "agg+")
    add({k: -v for k, v in agg.items()}, 0 * d_max, "agg-")
    return MilpEncoding(x=tuple(x), y=tuple(y), rows=tuple(rows), rhs=tuple(rhs),
                        d_max=d_max, d_min=d_min, eps_gap=eps_gap, t=tuple(t),
                        ordering=ordering, names=tuple(names))


# -- convex-concave step -----------------------------------------------------

def _linear_coefficient(prev_ratios, sigma):
    N = len(prev_ratios)
    return sigma - _div(2 * sum(prev_ratios), N * N)


def surrogate_objective(ratios, prev_ratios, sigma=DEFAULT_SIGMA):
    """Objective with the concave part linearized at ``prev_ratios``."""
    N = len(ratios)
    c = _linear_coefficient(prev_ratios, sigma)
    tot0 = sum(prev_ratios)
    return _div(sum(r * r for r in ratios), N) + c * sum(ratios) + _div(tot0 * tot0, N * N)


def _ratios(curves, s):
    return [c.ratio_at(si) for c, si in zip(curves, s)]


class _Segments:
    """Float view of one modified curve for relaxation bounds."""

    def __init__(self, mc: ModifiedCurve):
        x = np.array([float(v) for v in mc.x])
        y = np.array([float(v) for v in mc.y])
        self.l, self.u = x[:-1], x[1:]
        self.alpha = (y[1:] - y[:-1]) / (self.u - self.l)
        self.beta = y[:-1] - self.alpha * self.l
        # breakpoint in each segment, or -1; closed segments share endpoints
        bidx = mc.breakpoint_index
        self.left_bp = np.array(bidx[:-1])
        self.right_bp = np.array(bidx[1:])
        self.base = mc.base
        self.nseg = len(self.l)

    def breakpoints_in(self, lo, hi):
        """Base breakpoint indices touched by segments ``lo..hi``."""
        ids = set(self.left_bp[lo:hi + 1].tolist()) | set(self.right_bp[lo:hi + 1].tolist())
        ids.discard(-1)
        return sorted(ids)


def _segment_minimizers(seg: _Segments, lo, hi, mu, c, N):
    """Per-segment minimizer and value of ``phi(r(s)) + mu s`` on ``lo..hi``."""
    al, be = seg.alpha[lo:hi + 1], seg.beta[lo:hi + 1]
    L, U = seg.l[lo:hi + 1], seg.u[lo:hi + 1]
    quad = al * al / N
    lin = 2 * al * be / N + c * al + mu
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(quad > 0, -lin / (2 * quad), np.where(lin > 0, L, U))
    s = np.clip(s, L, U)
    r = al * s + be
    val = r * r / N + c * r + mu * s
    return s, val


def _dual_bound(segs, ranges, frak_s, c, N, iters=100):
    """Lagrangian lower bound of the relaxed node problem by bisection on ``mu``."""
    smin = sum(seg.l[lo] for seg, (lo, hi) in zip(segs, ranges))
    smax = sum(seg.u[hi] for seg, (lo, hi) in zip(segs, ranges))
    if frak_s < smin - 1e-9 or frak_s > smax + 1e-9:
        return math.inf

    def q(mu):
        tot_s, tot_v = 0.0, 0.0
        for seg, (lo, hi) in zip(segs, ranges):
            s, val = _segment_minimizers(seg, lo, hi, mu, c, N)
            k = int(np.argmin(val))
            tot_s += s[k]
            tot_v += val[k]
        return tot_v - mu * frak_s, tot_s

    slopes = []
    for seg, (lo, hi) in zip(segs, ranges):
        al, be = seg.alpha[lo:hi + 1], seg.beta[lo:hi + 1]
        for end in (seg.l[lo:hi + 1], seg.u[lo:hi + 1]):
            r = al * end + be
            slopes.append(np.abs(al * (2 * r / N + c)).max())
    M = float(max(slopes)) + 1.0
    a, b = -M, M
    best = -math.inf
    for _ in range(iters):
        mid = 0.5 * (a + b)
        val, tot = q(mid)
        best = max(best, val)
        if tot > frak_s:
            a = mid
        else:
            b = mid
    return best


def _enumerate_sums(cands, target):
    """Vectors with one entry from each candidate list summing to ``target``."""
    out = []
    suffix_min = [0] * (len(cands) + 1)
    suffix_max = [0] * (len(cands) + 1)
    for i in range(len(cands) - 1, -1, -1):
        suffix_min[i] = suffix_min[i + 1] + min(cands[i])
        suffix_max[i] = suffix_max[i + 1] + max(cands[i])

    def rec(i, acc, part):
        if i == len(cands):
            if acc == target:
                out.append(tuple(part))
            return
        for v in cands[i]:
            rest = target - acc - v
            if suffix_min[i + 1] <= rest <= suffix_max[i + 1]:
                part.append(v)
                rec(i + 1, acc + v, part)
                part.pop()

    rec(0, 0, [])
    return out


@dataclass(frozen=True)
class CcpStepInfo:
    nodes: int
    certified: bool


def ccp_step(modified, s_prev, frak_s, sigma=DEFAULT_SIGMA, max_nodes: int = 200000,
             return_info: bool = False):
    """Minimize the linearized objective over breakpoint vectors summing to ``frak_s``.

    Best-first branch-and-bound over per-user ranges of modified segments
    (equivalently, over monotone selector vectors).  Node bounds come from
    the Lagrangian dual of the continuous relaxation; a node whose breakpoint
    vectors number at most a few hundred is resolved by enumeration.  Ties
    within ``1e-12`` relative go to the lexicographically smallest vector.
    """
    modified = list(modified)
    curves = [m.base for m in modified]
    N = len(curves)
    s_prev = tuple(int(v) for v in s_prev)
    if sum(s_prev) != frak_s:
        raise ValueError("s_prev must sum to frak_s")
    prev_r = [float(r) for r in _ratios(curves, s_prev)]
    c = _linear_coefficient(prev_r, float(sigma))
    segs = [_Segments(m) for m in modified]

    def fhat(s):
        r = [float(v) for v in _ratios(curves, s)]
        return surrogate_objective(r, prev_r, float(sigma))

    inc_s, inc_f = s_prev, fhat(s_prev)
    tol = 1e-12 * max(1.0, abs(inc_f))

    def consider(s):
        nonlocal inc_s, inc_f, tol
        f = fhat(s)
        if f < inc_f - tol or (abs(f - inc_f) <= tol and s < inc_s):
            inc_s, inc_f = s, f
            tol = 1e-12 * max(1.0, abs(inc_f))

    root = tuple((0, seg.nseg - 1) for seg in segs)
    counter = itertools.count()
    heap = [(_dual_bound(segs, root, frak_s, c, N), next(counter), root)]
    nodes = 0
    certified = True
    while heap:
        bound, _, ranges = heapq.heappop(heap)
        if bound > inc_f + tol:
            break
        nodes += 1
        if nodes > max_nodes:
            certified = False
            log.warning("branch-and-bound node cap reached; returning best vector found")
            break
        bps = [seg.breakpoints_in(lo, hi) for seg, (lo, hi) in zip(segs, ranges)]
        if any(not b for b in bps):
            continue
        cands = [[cv.breakpoints[k] for k in b] for cv, b in zip(curves, bps)]
        if math.prod(len(b) for b in cands) <= LEAF_ENUMERATION:
            for s in _enumerate_sums(cands, frak_s):
                consider(s)
            continue
        # split the user with the most breakpoints at its median breakpoint
        i = max(range(N), key=lambda k: (len(bps[k]), -k))
        lo, hi = ranges[i]
        mid_bp = bps[i][len(bps[i]) // 2]
        seg = segs[i]
        split = lo + int(np.nonzero(seg.left_bp[lo:hi + 1] == mid_bp)[0][0])
        for child in ((lo, split - 1), (split, hi)):
            if child[0] > child[1]:
                continue
            rs = ranges[:i] + (child,) + ranges[i + 1:]
            b = _dual_bound(segs, rs, frak_s, c, N)
            if b <= inc_f + tol:
                heapq.heappush(heap, (b, next(counter), rs))
    if return_info:
        return inc_s, CcpStepInfo(nodes=nodes, certified=certified)
    return inc_s


# -- the allocator -----------------------------------------------------------

@dataclass(frozen=True)
class CcpRecord:
    j: int
    s: tuple
    F: object
    F_hat: object
    gap: object
    gap_closed_form: object


@dataclass(frozen=True)
class AllocationResult:
    s_star: tuple
    F_star: object
    ratios: tuple
    s0: tuple
    F0: object
    history: tuple
    steps: int

    @property
    def total_gap(self):
        return sum(rec.gap_closed_form for rec in self.history)


def initial_allocation(curves, frak_s, weights=None):
    """Breakpoint vector summing to ``frak_s`` nearest (Euclidean) to a proportional split.

    The target splits ``frak_s`` in proportion to ``weights`` (default: curve
    sizes, else equal).  Found exactly by dynamic programming over partial
    sums; ties go to the lexicographically smallest vector.
    """
    curves = list(curves)
    if weights is None:
        weights = [c.size if c.size is not None else 1 for c in curves]
    wsum = float(sum(weights))
    target = [frak_s * w / wsum for w in weights]
    # states: partial sum -> (cost, vector)
    states = {0: (0.0, ())}
    for i, c in enumerate(curves):
        nxt = {}
        for acc, (cost, vec) in states.items():
            for b in c.breakpoints:
                tot = acc + b
                if tot > frak_s:
                    break
                cand = (cost + (b - target[i]) ** 2, vec + (b,))
                if tot not in nxt or cand < nxt[tot]:
                    nxt[tot] = cand
        states = nxt
    if frak_s not in states:
        raise MiqpInfeasible(f"no breakpoint vector sums to {frak_s}")
    return states[frak_s][1]


def _exact_sigma(curves, sigma):
    # keep rational curves rational; 0.01 becomes 1/100 via its shortest repr
    if all(c.exact for c in curves) and not _is_exact(sigma):
        return Fraction(repr(float(sigma)))
    return sigma


def allocate(curves, frak_s, s0=None, sigma=DEFAULT_SIGMA, max_steps: int = 50,
             weights=None, eps=None, D=None) -> AllocationResult:
    """Convex-concave iterations from ``s0`` until the allocation repeats.

    Returns the best allocation seen together with the per-step gap between
    the linearized and the true objective, which must match the closed form
    ``(sum_i (r_i,j - r_i,j-1))^2 / N^2``.
    """
    curves = sorted(curves, key=lambda c: c.user)
    sigma = _exact_sigma(curves, sigma)
    N = len(curves)
    if s0 is None:
        s0 = initial_allocation(curves, frak_s, weights)
    s0 = tuple(int(v) for v in s0)
    if len(s0) != N or sum(s0) != frak_s:
        raise ValueError("s0 must have one entry per user and sum to frak_s")
    for c, v in zip(curves, s0):
        c.ratio_at(v)
    modified = modify_curves(curves, sigma, eps=eps, D=D)
    r0 = _ratios(curves, s0)
    F0 = variance_objective(r0, sigma)[1]
    best_s, best_F = s0, F0
    s, r = s0, r0
    history = []
    steps = 0
    for j in range(1, max_steps + 1):
        steps = j
        s_new = ccp_step(modified, s, frak_s, sigma)
        r_new = _ratios(curves, s_new)
        F_new = variance_objective(r_new, sigma)[1]
        F_hat = surrogate_objective(r_new, r, sigma)
        d_closed = _div(sum(a - b for a, b in zip(r_new, r)) ** 2, N * N)
        history.append(CcpRecord(j=j, s=s_new, F=F_new, F_hat=F_hat, gap=F_hat - F_new,
                                 gap_closed_form=d_closed))
        if F_new < best_F:
            best_s, best_F = s_new, F_new
        if s_new == s:
            break
        s, r = s_new, r_new
    return AllocationResult(s_star=best_s, F_star=best_F, ratios=tuple(_ratios(curves, best_s)),
                            s0=s0, F0=F0, history=tuple(history), steps=steps)


def enumerate_oracle(curves, frak_s, sigma=DEFAULT_SIGMA, cap: int = ORACLE_CAP):
    """Every breakpoint vector summing to ``frak_s`` ranked by objective, then lexicographically."""
    curves = sorted(curves, key=lambda c: c.user)
    sigma = _exact_sigma(curves, sigma)
    total = math.prod(c.p for c in curves)
    if total > cap:
        raise CapExceeded(f"{total} combinations exceed the enumeration cap {cap}")
    out = []
    for s in itertools.product(*(c.breakpoints for c in curves)):
        if sum(s) == frak_s:
            out.append((s, variance_objective(_ratios(curves, s), sigma)[1]))
    out.sort(key=lambda e: (e[1], e[0]))
    return out


def build_curve(plant, net, lambda_schedule=None, user: int = 1, K_o=None, **sparsify_kw):
    """Ratio curve of one user from a sparsification sweep.

    The plant is first preconditioned from ``K_o`` (an LQR gain when not
    given); each achieved sparsity level keeps its lowest cost.
    """
    from scipy.linalg import solve_continuous_are

    from .precondition import precondition
    from .sparsify import sparsify_run
    from .spectral import evaluate

    if K_o is None:
        X = solve_continuous_are(plant.A, plant.B, plant.Q, plant.R)
        K_o = np.linalg.solve(plant.R, plant.B.T @ X)
    pre = precondition(plant, net, K_o)
    net_f = pre.network if pre.network is not None else net
    trace = sparsify_run(plant, net_f, pre.K_prime, pre.tau_prime, lambda_schedule,
                         **sparsify_kw)
    levels = {s: r.J for s, r in trace.best_per_level().items()}
    if 0 not in levels:
        levels[0] = evaluate(plant, pre.K_prime, pre.tau_prime, trace.N).J
    s_vals = sorted(levels)
    J = [levels[s] for s in s_vals]
    J_o = min(J)
    ratios = [j / J_o for j in J]
    ratios[int(np.argmin(J))] = 1.0
    return PerfCurve(user=user, breakpoints=tuple(s_vals), ratios=tuple(ratios), J_nominal=J_o,
                     size=pre.K_prime.size)
