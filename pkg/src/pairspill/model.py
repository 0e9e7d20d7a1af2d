"""Potential-outcomes vocabulary for paired units.

Compliance types, their potential treatments, joint type distributions over
the two units of a household, tabulated outcome means and assignment designs.
Everything here is immutable once built.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ClampWarning, SpecError

PROB_TOL = 1e-12

#: Assignment / treatment cells in canonical order, indexed by ``z + 2 * z_peer``.
CELLS: tuple[tuple[int, int], ...] = ((0, 0), (1, 0), (0, 1), (1, 1))


def cell_index(z: int, z_peer: int) -> int:
    return int(z) + 2 * int(z_peer)


class ComplianceType(enum.IntEnum):
    """The five monotone compliance types, in decreasing likelihood of treatment."""

    AT = 0  # always-taker
    SC = 1  # social-interaction complier
    C = 2  # complier
    GC = 3  # group complier
    NT = 4  # never-taker

    @classmethod
    def parse(cls, value) -> "ComplianceType":
        if isinstance(value, ComplianceType):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise SpecError(f"unknown compliance type {value!r}") from None
        return cls(int(value))


TYPES: tuple[ComplianceType, ...] = tuple(ComplianceType)
AT, SC, C, GC, NT = TYPES

# D(z, z') per type, indexed [type, z, z_peer].
_TREATMENT = np.zeros((5, 2, 2), dtype=np.int8)
_TREATMENT[AT] = 1
_TREATMENT[SC] = [[0, 1], [1, 1]]
_TREATMENT[C] = [[0, 0], [1, 1]]
_TREATMENT[GC] = [[0, 0], [0, 1]]
_TREATMENT.setflags(write=False)


def potential_treatment(tag: ComplianceType, z: int, z_peer: int) -> int:
    """Treatment take-up of a unit of type ``tag`` when its own assignment is
    ``z`` and its peer's is ``z_peer``."""
    return int(_TREATMENT[ComplianceType.parse(tag), int(z), int(z_peer)])


def treatment_table() -> np.ndarray:
    """Read-only array ``D[type, z, z_peer]``."""
    return _TREATMENT


def type_from_treatments(d11: int, d10: int, d01: int, d00: int) -> ComplianceType:
    """Inverse of the type map; raises SpecError for non-monotone sequences."""
    key = (int(d11), int(d10), int(d01), int(d00))
    for t in TYPES:
        if tuple(int(_TREATMENT[t, a, b]) for a, b in ((1, 1), (1, 0), (0, 1), (0, 0))) == key:
            return t
    raise SpecError(f"treatment sequence {key} violates monotonicity")


# ---------------------------------------------------------------------------
# Statistics of (Y, D_i, D_j) as a + Y * b, with a and b indexed [d_i, d_j].


def _stat(a=None, b=None) -> tuple[np.ndarray, np.ndarray]:
    a_arr = np.zeros((2, 2)) if a is None else np.asarray(a, dtype=float)
    b_arr = np.zeros((2, 2)) if b is None else np.asarray(b, dtype=float)
    a_arr.setflags(write=False)
    b_arr.setflags(write=False)
    return a_arr, b_arr


_ONES = np.ones((2, 2))
_DI = np.array([[0.0, 0.0], [1.0, 1.0]])
_DJ = _DI.T.copy()
_DIDJ = _DI * _DJ
_NDI = 1 - _DI
_NDJ = 1 - _DJ

STATISTICS: dict[str, tuple[np.ndarray, np.ndarray]] = {
    "1": _stat(a=_ONES),
    "Y": _stat(b=_ONES),
    "D_i": _stat(a=_DI),
    "D_j": _stat(a=_DJ),
    "Y*D_i": _stat(b=_DI),
    "Y*D_j": _stat(b=_DJ),
    "Y*(1-D_i)": _stat(b=_NDI),
    "Y*(1-D_j)": _stat(b=_NDJ),
    "D_i*D_j": _stat(a=_DIDJ),
    "(1-D_i)*(1-D_j)": _stat(a=_NDI * _NDJ),
    "Y*(1-D_i)*(1-D_j)": _stat(b=_NDI * _NDJ),
    "D_i*(1-D_j)": _stat(a=_DI * _NDJ),
    "Y*D_i*D_j": _stat(b=_DIDJ),
    "1-D_i": _stat(a=_NDI),
    "1-D_j": _stat(a=_NDJ),
}


def statistic(name: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        return STATISTICS[name]
    except KeyError:
        raise SpecError(f"unknown statistic {name!r}") from None


# ---------------------------------------------------------------------------


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class JointTypeDistribution:
    """Symmetric 5x5 table of P[type_i = a, type_j = b]."""

    p: np.ndarray

    def __post_init__(self):
        p = _frozen(self.p)
        if p.shape != (5, 5):
            raise SpecError(f"joint type table must be 5x5, got {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise SpecError("joint type table has negative or non-finite entries")
        if abs(p.sum() - 1.0) > PROB_TOL:
            raise SpecError(f"joint type table sums to {p.sum():.15g}, not 1")
        if np.max(np.abs(p - p.T)) > PROB_TOL:
            raise SpecError("joint type table is not symmetric")
        object.__setattr__(self, "p", p)

    @classmethod
    def independent(cls, marginals: Sequence[float]) -> "JointTypeDistribution":
        m = np.asarray(marginals, dtype=float)
        if m.shape != (5,):
            raise SpecError("need five marginal shares (AT, SC, C, GC, NT)")
        if np.any(m < 0) or abs(m.sum() - 1.0) > PROB_TOL:
            raise SpecError("marginal shares must be nonnegative and sum to 1")
        return cls(np.outer(m, m))

    @classmethod
    def uniform(cls) -> "JointTypeDistribution":
        return cls(np.full((5, 5), 1 / 25))

    @classmethod
    def point_mass(cls, a, b=None) -> "JointTypeDistribution":
        a = ComplianceType.parse(a)
        b = a if b is None else ComplianceType.parse(b)
        p = np.zeros((5, 5))
        p[a, b] += 0.5
        p[b, a] += 0.5
        return cls(p)

    def marginals(self) -> np.ndarray:
        return self.p.sum(axis=1)

    def share(self, tag) -> float:
        return float(self.marginals()[ComplianceType.parse(tag)])

    def prob(self, own: Iterable, peer: Iterable) -> float:
        """P[type_i in own, type_j in peer]."""
        rows = [ComplianceType.parse(t) for t in own]
        cols = [ComplianceType.parse(t) for t in peer]
        return float(self.p[np.ix_(rows, cols)].sum())

    @property
    def satisfies_osn(self) -> bool:
        m = self.marginals()
        return bool(m[AT] == 0.0 and m[SC] == 0.0)


def marginals(dist: JointTypeDistribution) -> np.ndarray:
    """Five marginal type shares (AT, SC, C, GC, NT)."""
    return dist.marginals()


NOISE_FAMILIES = ("gaussian", "bernoulli")


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """Mean outcome of unit i by (own type, peer type, own treatment, peer treatment).

    ``mean[a, b, d, d_peer]``. Gaussian noise is additive with standard deviation
    ``scale`` and within-pair correlation ``rho``. In ``bernoulli`` mode the
    outcome is binary with success probability equal to the (clamped) mean, and
    ``rho`` is the latent Gaussian-copula correlation.
    """

    mean: np.ndarray
    family: str = "gaussian"
    scale: float = 1.0
    rho: float = 0.0

    def __post_init__(self):
        m = _frozen(self.mean)
        if m.shape != (5, 5, 2, 2):
            raise SpecError(f"outcome mean grid must be 5x5x2x2, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise SpecError("outcome mean grid has non-finite entries")
        if self.family not in NOISE_FAMILIES:
            raise SpecError(f"noise family must be one of {NOISE_FAMILIES}")
        if not (np.isfinite(self.scale) and self.scale >= 0):
            raise SpecError("noise scale must be finite and >= 0")
        if not -1.0 <= self.rho <= 1.0:
            raise SpecError("noise correlation rho must lie in [-1, 1]")
        if self.family == "bernoulli" and (m.min() < 0 or m.max() > 1):
            warnings.warn("binary-outcome means clamped to [0, 1]", ClampWarning, stacklevel=3)
        object.__setattr__(self, "mean", m)

    @classmethod
    def zeros(cls, **kw) -> "OutcomeModel":
        return cls(np.zeros((5, 5, 2, 2)), **kw)

    @classmethod
    def linear(cls, intercept=0.0, own=0.0, peer=0.0, interaction=0.0, **kw) -> "OutcomeModel":
        """Means ``intercept + own*d + peer*d' + interaction*d*d'`` for every type pair."""
        d = np.array([0.0, 1.0])
        grid = intercept + own * d[:, None] + peer * d[None, :] + interaction * np.outer(d, d)
        return cls(np.broadcast_to(grid, (5, 5, 2, 2)), **kw)

    @property
    def effective_mean(self) -> np.ndarray:
        """Conditional mean of Y given types and treatments (clamped in binary mode)."""
        if self.family == "bernoulli":
            return np.clip(self.mean, 0.0, 1.0)
        return self.mean

    def scaled(self, a: float, b: float) -> "OutcomeModel":
        """Outcome model for ``a + b * Y`` (Gaussian family only)."""
        if self.family != "gaussian":
            raise SpecError("affine rescaling only defined for gaussian outcomes")
        return OutcomeModel(a + b * self.mean, "gaussian", abs(b) * self.scale, self.rho)


@dataclass(frozen=True, eq=False)
class AssignmentDesign:
    """Distribution of (Z_1, Z_2) within a household, ``pi[z_1, z_2]``."""

    pi: np.ndarray
    exchangeable: bool = True

    def __post_init__(self):
        pi = _frozen(self.pi)
        if pi.shape != (2, 2):
            raise SpecError("assignment design must be a 2x2 table")
        if np.any(pi < 0) or not np.all(np.isfinite(pi)):
            raise SpecError("assignment probabilities must be nonnegative")
        if abs(pi.sum() - 1.0) > PROB_TOL:
            raise SpecError(f"assignment probabilities sum to {pi.sum():.15g}, not 1")
        if self.exchangeable and abs(pi[1, 0] - pi[0, 1]) > PROB_TOL:
            raise SpecError("design is not exchangeable: P[Z=(1,0)] != P[Z=(0,1)]")
        object.__setattr__(self, "pi", pi)

    @classmethod
    def from_cells(cls, p00, p10, p01, p11, exchangeable: bool = True) -> "AssignmentDesign":
        return cls(np.array([[p00, p01], [p10, p11]]), exchangeable)

    @classmethod
    def bernoulli(cls, q: float) -> "AssignmentDesign":
        """Each unit assigned independently with probability ``q``."""
        v = np.array([1 - q, q])
        return cls(np.outer(v, v))

    @classmethod
    def one_treated_per_household(cls, p_treated: float) -> "AssignmentDesign":
        """Treated households have exactly one randomly chosen unit assigned."""
        return cls.from_cells(1 - p_treated, p_treated / 2, p_treated / 2, 0.0)

    def cell_prob(self, z: int, z_peer: int) -> float:
        """P[Z_1=z, Z_2=z_peer]."""
        return float(self.pi[int(z), int(z_peer)])

    def unit_probs(self) -> np.ndarray:
        """Unit-perspective cell probabilities in CELLS order, averaged over units."""
        sym = (self.pi + self.pi.T) / 2
        return np.array([sym[z, zp] for z, zp in CELLS])


@dataclass(frozen=True, eq=False)
class Stratum:
    """One discrete covariate value with its own types, outcomes and design."""

    label: str | None
    weight: float
    types: JointTypeDistribution
    outcomes: OutcomeModel
    design: AssignmentDesign


@dataclass(frozen=True, eq=False)
class DGPSpec:
    """Data-generating process: a single population or a mixture of strata."""

    types: JointTypeDistribution | None = None
    outcomes: OutcomeModel | None = None
    design: AssignmentDesign | None = None
    groups: int = 1000
    seed: int = 0
    strata: tuple[Stratum, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if int(self.groups) < 1:
            raise SpecError("G must be >= 1")
        object.__setattr__(self, "strata", tuple(self.strata))
        if self.strata:
            w = np.array([s.weight for s in self.strata], dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > PROB_TOL:
                raise SpecError("stratum weights must be nonnegative and sum to 1")
            labels = [s.label for s in self.strata]
            if len(set(labels)) != len(labels) or any(lab is None for lab in labels):
                raise SpecError("stratum labels must be distinct and non-empty")
        elif self.types is None or self.outcomes is None or self.design is None:
            raise SpecError("spec needs types, outcomes and design (or strata)")

    @property
    def stratified(self) -> bool:
        return bool(self.strata)

    def components(self) -> tuple[Stratum, ...]:
        if self.strata:
            return self.strata
        return (Stratum(None, 1.0, self.types, self.outcomes, self.design),)

    def with_groups(self, groups: int, seed: int | None = None) -> "DGPSpec":
        return DGPSpec(
            self.types, self.outcomes, self.design, int(groups),
            self.seed if seed is None else int(seed), self.strata,
        )

    @property
    def satisfies_osn(self) -> bool:
        return all(s.types.satisfies_osn for s in self.components() if s.weight > 0)


def spec_from_stratum(stratum: Stratum, groups: int = 1000, seed: int = 0) -> DGPSpec:
    return DGPSpec(stratum.types, stratum.outcomes, stratum.design, groups, seed)


def type_names(tags: Iterable) -> list[str]:
    return [ComplianceType.parse(t).name for t in tags]


def as_type_set(value) -> list[ComplianceType]:
    """Parse ``"any"``, a single type name, or a list of names."""
    if value is None or (isinstance(value, str) and value.lower() in ("any", "*")):
        return list(TYPES)
    if isinstance(value, (str, int, ComplianceType)):
        return [ComplianceType.parse(value)]
    return [ComplianceType.parse(v) for v in value]
