"""Named error conditions and warnings raised across the package.

Every exception carries a ``condition`` attribute with its class name so the
CLI and the report builder can surface a machine-readable reason.
"""

from __future__ import annotations


class PairSpillError(Exception):
    """Base class for all named conditions."""

    @property
    def condition(self) -> str:
        return type(self).__name__


class ValidationError(PairSpillError, ValueError):
    """Input failed validation (data table, DGP spec, configuration)."""


class MissingColumn(ValidationError):
    def __init__(self, column: str):
        super().__init__(f"required column {column!r} is missing")
        self.column = column


class NonBinaryValue(ValidationError):
    def __init__(self, column: str, value):
        super().__init__(f"column {column!r} must be 0/1, found {value!r}")
        self.column = column
        self.value = value


class GroupSizeNot2(ValidationError):
    def __init__(self, group_id, size: int):
        super().__init__(f"household {group_id!r} has {size} rows, expected 2")
        self.group_id = group_id
        self.size = size


class NonFiniteOutcome(ValidationError):
    def __init__(self, group_id, value):
        super().__init__(f"household {group_id!r} has non-finite outcome {value!r}")
        self.group_id = group_id
        self.value = value


class InconsistentCovariate(ValidationError):
    def __init__(self, group_id):
        super().__init__(f"household {group_id!r} has differing x labels across units")
        self.group_id = group_id


class SpecError(ValidationError):
    """A DGP specification or model object is malformed."""


class EstimationError(PairSpillError):
    """An estimand cannot be computed on the given data."""


class EmptyCell(EstimationError):
    def __init__(self, z: int, z_peer: int):
        super().__init__(f"assignment cell (z={z}, z'={z_peer}) has no observations")
        self.cell = (z, z_peer)


class EmptyStratumCell(EstimationError):
    def __init__(self, label, z: int, z_peer: int):
        super().__init__(
            f"stratum x={label!r} has no observations in cell (z={z}, z'={z_peer})"
        )
        self.label = label
        self.cell = (z, z_peer)


class DegenerateDenominator(EstimationError):
    def __init__(self, name: str, value: float):
        super().__init__(f"denominator of {name!r} is {value:.3g}, below guard")
        self.name = name
        self.value = value


class DegeneratePropensity(EstimationError):
    def __init__(self, label, cell, value: float):
        super().__init__(
            f"propensity p_{cell[0]}{cell[1]}(x={label!r}) = {value:.3g} is degenerate"
        )
        self.label = label
        self.cell = cell
        self.value = value


class OSNViolated(EstimationError):
    def __init__(self, hard_count: int | None = None):
        msg = "one-sided noncompliance fails: some units take treatment with z=0"
        if hard_count is not None:
            msg += f" ({hard_count} records)"
        super().__init__(msg)
        self.hard_count = hard_count


class ZeroFirstStage(EstimationError):
    def __init__(self, kind: str, value: float):
        super().__init__(f"first stage for {kind!r} rescaling is {value:.3g}")
        self.kind = kind
        self.value = value


class RankDeficientFirstStage(EstimationError):
    def __init__(self, rank: int, k: int):
        super().__init__(f"first-stage cross-moment matrix has rank {rank} < {k}")
        self.rank = rank
        self.k = k


class UnsupportedStatistic(PairSpillError, KeyError):
    """The moment layout cannot express a requested statistic."""


class NegativeShareWarning(UserWarning):
    """An estimated compliance-type share is negative."""


class OSNWarning(UserWarning):
    """2SLS was run on data that violate one-sided noncompliance."""


class ClampWarning(UserWarning):
    """Binary-outcome means were clamped into [0, 1]."""


class ConfigConflictWarning(UserWarning):
    """A config-file value overrode a command-line flag."""
