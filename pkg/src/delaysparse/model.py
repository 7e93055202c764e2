"""Plant, network and controller data types plus elementary closed-loop helpers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

__all__ = [
    "HURWITZ_TOL",
    "LtiPlant",
    "NetworkModel",
    "SparsityPattern",
    "Certification",
    "ControllerDesign",
    "default_zero_tol",
    "cardinality",
    "link_delay",
    "closed_loop_delay_free",
    "apply_pattern",
    "psd_sqrt",
    "random_plant",
]

HURWITZ_TOL = 1e-9


def _frozen(a, name: str, ndim: int = 2) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim == 0 and ndim == 2:
        arr = arr.reshape(1, 1)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LtiPlant:
    """Continuous-time plant ``dx = A x + B u + Bw w`` with quadratic weights."""

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "Bw", "Q", "R"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or n < 1:
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n or self.B.shape[1] < 1:
            raise DimensionError(f"B must have {n} rows, got {self.B.shape}")
        if self.Bw.shape[0] != n or self.Bw.shape[1] < 1:
            raise DimensionError(f"Bw must have {n} rows, got {self.Bw.shape}")
        m = self.B.shape[1]
        if self.Q.shape != (n, n):
            raise DimensionError(f"Q must be {n}x{n}, got {self.Q.shape}")
        if self.R.shape != (m, m):
            raise DimensionError(f"R must be {m}x{m}, got {self.R.shape}")
        for name, mat in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(mat, mat.T, atol=1e-12 * (1 + np.abs(mat).max())):
                raise DimensionError(f"{name} must be symmetric")
        qmin = np.linalg.eigvalsh(self.Q).min()
        if qmin < -1e-10 * max(1.0, np.abs(self.Q).max()):
            raise DimensionError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise DimensionError("R must be positive definite")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.Bw.shape[1]

    def check_gain(self, K) -> np.ndarray:
        K = np.array(K, dtype=float)
        if K.ndim == 0:
            K = K.reshape(1, 1)
        if K.shape != (self.m, self.n):
            raise DimensionError(f"K must be {self.m}x{self.n}, got {K.shape}")
        return K


@dataclass(frozen=True)
class NetworkModel:
    """Shared network: bandwidth ``c``, propagation delay ``tau_p``, scale ``kappa``."""

    c: float
    tau_p: float = 0.0
    kappa: float = 0.01

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("bandwidth c must be positive")
        if not self.tau_p >= 0:
            raise ValueError("propagation delay tau_p must be nonnegative")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")

    def with_bandwidth(self, c: float) -> "NetworkModel":
        return NetworkModel(c=c, tau_p=self.tau_p, kappa=self.kappa)


@dataclass(frozen=True, eq=False)
class SparsityPattern:
    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise DimensionError("pattern mask must be 2-d")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, m: int, n: int) -> "SparsityPattern":
        return cls(np.ones((m, n), dtype=bool))

    @classmethod
    def of(cls, K, zero_tol: float | None = None) -> "SparsityPattern":
        K = np.asarray(K, dtype=float)
        tol = default_zero_tol(K) if zero_tol is None else zero_tol
        return cls(np.abs(K) > tol)

    @property
    def card(self) -> int:
        return int(self.mask.sum())

    @property
    def s(self) -> int:
        return int(self.mask.size - self.card)

    def __eq__(self, other):
        return isinstance(other, SparsityPattern) and np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash(self.mask.tobytes())


class Certification(enum.Enum):
    UNCERTIFIED = "Uncertified"
    SPECTRAL_STABLE = "SpectralStable"
    LMI_CERTIFIED = "LmiCertified"


@dataclass(frozen=True, eq=False)
class ControllerDesign:
    K: np.ndarray
    tau: float
    pattern: SparsityPattern = field(default=None)
    certified: Certification = Certification.UNCERTIFIED

    def __post_init__(self):
        K = _frozen(self.K, "K")
        object.__setattr__(self, "K", K)
        if self.pattern is None:
            object.__setattr__(self, "pattern", SparsityPattern.of(K))
        if self.pattern.mask.shape != K.shape:
            raise DimensionError("pattern shape does not match K")
        if np.any(K[~self.pattern.mask] != 0.0):
            raise ValueError("K has nonzero entries outside its sparsity pattern")
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")

    def consistent_with(self, net: NetworkModel) -> bool:
        return self.tau >= net.tau_p


def default_zero_tol(K) -> float:
    return 1e-9 * max(1.0, float(np.linalg.norm(K)))


def cardinality(K, zero_tol: float | None = None) -> int:
    """Number of entries of ``K`` whose magnitude exceeds ``zero_tol``."""
    K = np.asarray(K, dtype=float)
    tol = default_zero_tol(K) if zero_tol is None else zero_tol
    if tol < 0:
        raise ValueError("zero_tol must be nonnegative")
    return int(np.count_nonzero(np.abs(K) > tol))


def link_delay(card: int, net: NetworkModel) -> float:
    """Communication delay of a controller with ``card`` links.

    Transmission time ``kappa * card / c`` plus the propagation delay.
    """
    if card < 0:
        raise ValueError("cardinality must be nonnegative")
    return net.kappa * card / net.c + net.tau_p


def closed_loop_delay_free(plant: LtiPlant, K, hurwitz_tol: float = HURWITZ_TOL):
    """Return ``(A - B K, is_hurwitz)``."""
    K = plant.check_gain(K)
    Acl = plant.A - plant.B @ K
    return Acl, bool(np.linalg.eigvals(Acl).real.max() < -hurwitz_tol)


def apply_pattern(K, pattern: SparsityPattern) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if pattern.mask.shape != K.shape:
        raise DimensionError("pattern shape does not match K")
    return np.where(pattern.mask, K, 0.0)


def psd_sqrt(M, strict: bool = False) -> np.ndarray:
    """Symmetric square root; negative eigenvalues are clamped unless ``strict``."""
    w, V = np.linalg.eigh(0.5 * (M + np.transpose(M)))
    if strict and w.min() <= 0:
        raise DimensionError("matrix is not positive definite")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def random_plant(n: int, m: int | None = None, rng=None, *, p: int | None = None,
                 spread: float = 1.0, shift: float = 0.0) -> LtiPlant:
    """Random plant with ``B = Bw = I`` style defaults when ``m == n``.

    Eigenvalues of ``A`` are roughly uniform in a disc of radius ``spread``
    centred at ``shift``.
    """
    rng = np.random.default_rng(rng)
    m = n if m is None else m
    p = n if p is None else p
    A = spread * rng.standard_normal((n, n)) / np.sqrt(n) + shift * np.eye(n)
    B = np.eye(n, m) if m == n else rng.standard_normal((n, m)) / np.sqrt(n)
    Bw = np.eye(n, p) if p == n else rng.standard_normal((n, p)) / np.sqrt(n)
    return LtiPlant(A=A, B=B, Bw=Bw, Q=np.eye(n), R=np.eye(m))
