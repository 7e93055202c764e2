"""Feasibility oracle for systems of PSD blocks, linear inequalities and norm caps.

Problems are modelled with cvxpy expressions and solved by the Clarabel
interior-point solver.  Every returned point is re-verified with a dense
eigenvalue computation on each PSD block, independent of the solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .errors import Infeasible, NumericalFailure

__all__ = [
    "FeasibilityProblem",
    "Assignment",
    "spectral_norm_bound",
    "solve_feasibility",
    "symmetrize",
]

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 200


def symmetrize(expr):
    return 0.5 * (expr + expr.T)


def spectral_norm_bound(expr, t):
    """PSD block ``[[t I, M], [M^T, t I]]``; it is PSD iff ``||M||_2 <= t``."""
    M = expr if isinstance(expr, cp.Expression) else cp.Constant(np.atleast_2d(expr))
    if M.ndim == 1:
        M = cp.reshape(M, (M.shape[0], 1), order="F")
    r, c = M.shape
    return cp.bmat([[t * np.eye(r), M], [M.T, t * np.eye(c)]])


@dataclass
class _Block:
    name: str
    expr: cp.Expression
    margin: float


@dataclass
class FeasibilityProblem:
    """Container for declared variables and constraints.

    ``psd_blocks`` must be symmetric affine expressions; they are
    symmetrized before being handed to the solver so that numerically
    asymmetric assemblies (``bmat`` of transposed blocks) are accepted.
    """

    variables: dict = field(default_factory=dict)
    psd_blocks: list = field(default_factory=list)
    linear_ineqs: list = field(default_factory=list)
    equalities: list = field(default_factory=list)
    norm_caps: list = field(default_factory=list)
    objective: cp.Expression | None = None

    def variable(self, name: str, shape, symmetric: bool = False) -> cp.Variable:
        if name in self.variables:
            raise ValueError(f"variable {name!r} declared twice")
        var = cp.Variable(shape, name=name, symmetric=symmetric)
        self.variables[name] = var
        return var

    def add_psd(self, expr, margin: float = 0.0, name: str | None = None):
        name = name or f"psd{len(self.psd_blocks)}"
        self.psd_blocks.append(_Block(name, expr, float(margin)))

    def add_linear(self, expr, name: str | None = None):
        """Require ``expr >= 0`` elementwise."""
        self.linear_ineqs.append((name or f"lin{len(self.linear_ineqs)}", expr))

    def add_equality(self, expr, name: str | None = None):
        self.equalities.append((name or f"eq{len(self.equalities)}", expr))

    def add_norm_cap(self, expr, bound, name: str | None = None, symmetric: bool = False):
        """Require the spectral (or Euclidean, for vectors) norm of ``expr`` to be at most ``bound``.

        With ``symmetric=True`` the cap is encoded as ``-bound I <= expr <= bound I``,
        which halves the cone size.
        """
        self.norm_caps.append((name or f"cap{len(self.norm_caps)}", expr, bound, symmetric))

    def minimize(self, expr):
        self.objective = expr

    def constraints(self):
        cons = []
        for blk in self.psd_blocks:
            S = symmetrize(blk.expr)
            cons.append(S - blk.margin * np.eye(S.shape[0]) >> 0)
        for _, expr in self.linear_ineqs:
            cons.append(expr >= 0)
        for _, expr in self.equalities:
            cons.append(expr == 0)
        for _, expr, bound, sym in self.norm_caps:
            if expr.ndim <= 1:
                cons.append(cp.norm(expr, 2) <= bound)
            elif sym:
                S = symmetrize(expr)
                eye = np.eye(S.shape[0])
                cons += [bound * eye - S >> 0, bound * eye + S >> 0]
            else:
                cons.append(symmetrize(spectral_norm_bound(expr, bound)) >> 0)
        return cons


@dataclass
class Assignment:
    values: dict
    objective: float | None
    max_violation: float
    block_min_eigs: dict

    def __getitem__(self, name):
        return self.values[name]


def _block_value(expr) -> np.ndarray:
    val = np.atleast_2d(np.asarray(expr.value, dtype=float))
    return 0.5 * (val + val.T)


def solve_feasibility(problem: FeasibilityProblem, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER) -> Assignment:
    """Solve and re-verify; raises ``Infeasible`` or ``NumericalFailure``."""
    cons = problem.constraints()
    obj = cp.Minimize(problem.objective if problem.objective is not None else 0)
    prob = cp.Problem(obj, cons)
    try:
        prob.solve(solver=cp.CLARABEL, max_iter=max_iter, tol_feas=tol,
                   tol_gap_abs=tol, tol_gap_rel=tol)
    except cp.error.SolverError as exc:
        raise NumericalFailure(f"conic solver failed: {exc}") from exc
    status = prob.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise Infeasible(f"conic problem infeasible ({status})")
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise NumericalFailure(f"conic problem unbounded ({status})")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise NumericalFailure(f"conic solver stopped with status {status}")

    worst = 0.0
    eigs = {}
    for blk in problem.psd_blocks:
        S = _block_value(blk.expr)
        lam = float(np.linalg.eigvalsh(S).min())
        eigs[blk.name] = lam
        scale = max(1.0, float(np.abs(S).max()))
        worst = max(worst, (blk.margin - lam) / scale)
    for _, expr in problem.linear_ineqs:
        val = np.asarray(expr.value, dtype=float)
        worst = max(worst, float(-val.min()) / max(1.0, float(np.abs(val).max())))
    for _, expr in problem.equalities:
        val = np.asarray(expr.value, dtype=float)
        worst = max(worst, float(np.abs(val).max()))
    for _, expr, bound, _sym in problem.norm_caps:
        val = np.asarray(expr.value, dtype=float)
        b = float(np.asarray(bound.value if isinstance(bound, cp.Expression) else bound))
        nrm = float(np.linalg.norm(val, 2))
        worst = max(worst, (nrm - b) / max(1.0, b))
    if worst > 10 * tol:
        if worst > 1e-5:
            raise NumericalFailure(f"returned point violates constraints by {worst:.3e}")
        log.debug("conic verification slack %.3e above 10*tol", worst)

    values = {name: np.asarray(var.value, dtype=float) for name, var in problem.variables.items()}
    objective = None if problem.objective is None else float(prob.value)
    return Assignment(values=values, objective=objective, max_violation=worst,
                      block_min_eigs=eigs)
