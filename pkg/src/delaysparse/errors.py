"""Exception hierarchy shared by every module.

Each exception carries a ``category`` string that the command line front end
prints as the machine-readable error tag, and an ``exit_code``.
"""

from __future__ import annotations


class DelaySparseError(Exception):
    category = "Error"
    exit_code = 1


class ConfigError(DelaySparseError):
    category = "ConfigError"
    exit_code = 2


class DimensionError(DelaySparseError, ValueError):
    category = "DimensionError"
    exit_code = 2


class Unstable(DelaySparseError):
    """The delayed closed loop is not exponentially stable."""

    category = "Unstable"
    exit_code = 3


class NotDelayFreeStable(DelaySparseError):
    category = "NotDelayFreeStable"
    exit_code = 3


class SingularLyapunov(DelaySparseError):
    category = "SingularLyapunov"
    exit_code = 4


class Infeasible(DelaySparseError):
    """A conic program (or an LMI certificate search) has no solution."""

    category = "Infeasible"
    exit_code = 5


class NumericalFailure(DelaySparseError):
    category = "NumericalFailure"
    exit_code = 6


class StepInfeasible(Infeasible):
    category = "StepInfeasible"


class NoStabilizingPair(DelaySparseError):
    category = "NoStabilizingPair"
    exit_code = 7


class LostStability(DelaySparseError):
    category = "LostStability"
    exit_code = 3


class NoStableInterval(DelaySparseError):
    category = "NoStableInterval"
    exit_code = 7


class MiqpInfeasible(Infeasible):
    category = "MiqpInfeasible"


class CapExceeded(DelaySparseError):
    category = "CapExceeded"
    exit_code = 8
