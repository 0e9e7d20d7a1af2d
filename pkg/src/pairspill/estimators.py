"""Estimands for paired-unit IV designs, computed from stacked cell moments.

Every conditional mean is a ratio of two moment entries, so each estimand is a
smooth function of the moment vector and its standard error comes from the one
delta-method routine in :mod:`pairspill.moments`. Estimands whose
preconditions fail are reported as omissions with a named reason.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegeneratePropensity,
    EmptyCell,
    EmptyStratumCell,
    EstimationError,
    MissingColumn,
    NegativeShareWarning,
    OSNViolated,
    OSNWarning,
    RankDeficientFirstStage,
    SpecError,
    ZeroFirstStage,
)
from .model import AT, C, CELLS, GC, NT, SC, JointTypeDistribution
from .moments import (
    DENOMINATOR_GUARD,
    CellMeans,
    EstimateReport,
    EstimateRow,
    MomentCovariance,
    MomentVector,
    compute_moments,
    delta_method,
    ratio,
)

log = logging.getLogger(__name__)

Z00, Z10, Z01, Z11 = CELLS


# ---------------------------------------------------------------------------
# Registry of moment-based estimands


@dataclass(frozen=True)
class Estimand:
    """A named smooth function of cell moments.

    ``cells`` lists the assignment cells that must be populated; ``osn`` marks
    estimands that are only causal under one-sided noncompliance and are
    refused when the data contradict it.
    """

    name: str
    family: str
    formula: str
    fn: Callable[[CellMeans], float]
    cells: tuple[tuple[int, int], ...] = ()
    osn: bool = False


def _e(cm: CellMeans, stat: str, cell) -> float:
    return cm.mean(stat, cell)


def _marginal_mean(cm: CellMeans, stat: str, z: int) -> float:
    """E[stat | Z_i = z], pooling over the peer's assignment."""
    a, b = (z, 0), (z, 1)
    p = cm.prob(a) + cm.prob(b)
    if p == 0.0:
        raise EmptyCell(z, 0)
    return (cm.joint(stat, a) + cm.joint(stat, b)) / p


def _first_stage(cm):
    return _marginal_mean(cm, "D_i", 1) - _marginal_mean(cm, "D_i", 0)


def _itt_naive(cm):
    return _marginal_mean(cm, "Y", 1) - _marginal_mean(cm, "Y", 0)


def _late_direct(cm):
    return ratio(_e(cm, "Y", Z10) - _e(cm, "Y", Z00), _e(cm, "D_i", Z10), "late_direct")


def _late_indirect(cm):
    return ratio(_e(cm, "Y", Z01) - _e(cm, "Y", Z00), _e(cm, "D_j", Z01), "late_indirect")


def _het(cm, stat_d: str, stat_ynd: str, cell, name: str):
    # Untreated-outcome mean of the complier group, (E[Y|00] - E[Y(1-D)|cell]) / E[D|cell],
    # minus the population mean, over the non-complier share.
    p = _e(cm, stat_d, cell)
    base = _e(cm, "Y", Z00)
    complier_mean = ratio(base - _e(cm, stat_ynd, cell), p, name)
    return ratio(complier_mean - base, 1.0 - p, name)


def _p_nt(cm):
    shares = _type_share_fns()
    return 1.0 - sum(shares[k](cm) for k in ("p_at", "p_sc", "p_c", "p_gc"))


def _type_share_fns() -> dict[str, Callable[[CellMeans], float]]:
    return {
        "p_at": lambda cm: _e(cm, "D_i", Z00),
        "p_sc": lambda cm: _e(cm, "D_i", Z01) - _e(cm, "D_i", Z00),
        "p_c": lambda cm: _e(cm, "D_i", Z10) - _e(cm, "D_i", Z01),
        "p_gc": lambda cm: _e(cm, "D_i", Z11) - _e(cm, "D_i", Z10),
    }


def _build_registry() -> tuple[Estimand, ...]:
    s = _type_share_fns()
    E = Estimand
    out = [
        E("p_at", "types", "E[D|Z=(0,0)]", s["p_at"], (Z00,)),
        E("p_sc", "types", "E[D|Z=(0,1)]-E[D|Z=(0,0)]", s["p_sc"], (Z00, Z01)),
        E("p_c", "types", "E[D|Z=(1,0)]-E[D|Z=(0,1)]", s["p_c"], (Z10, Z01)),
        E("p_gc", "types", "E[D|Z=(1,1)]-E[D|Z=(1,0)]", s["p_gc"], (Z11, Z10)),
        E("p_nt", "types", "1-P[AT]-P[SC]-P[C]-P[GC]", _p_nt, CELLS),
        E("p_at_at", "types", "E[D_i*D_j|Z=(0,0)]", lambda cm: _e(cm, "D_i*D_j", Z00), (Z00,)),
        E("p_nt_nt", "types", "E[(1-D_i)*(1-D_j)|Z=(1,1)]",
          lambda cm: _e(cm, "(1-D_i)*(1-D_j)", Z11), (Z11,)),
        E("p_joint_residual", "types",
          "E[D_i*(1-D_j)|Z=(0,1)] = P[AT,NT]+P[AT,GC]+P[SC,GC]+P[SC,NT]",
          lambda cm: _e(cm, "D_i*(1-D_j)", Z01), (Z01,)),
    ]
    for cell in CELLS:
        tag = f"{cell[0]}{cell[1]}"
        out.append(E(f"mean_y_{tag}", "itt", f"E[Y|Z={cell}]".replace(" ", ""),
                     lambda cm, c=cell: _e(cm, "Y", c), (cell,)))
    contrasts = [
        ("itt_direct_z0", Z10, Z00), ("itt_direct_z1", Z11, Z01),
        ("itt_indirect_z0", Z01, Z00), ("itt_indirect_z1", Z11, Z10),
        ("itt_total", Z11, Z00),
    ]
    for name, hi, lo in contrasts:
        out.append(E(name, "itt", f"E[Y|Z={hi}]-E[Y|Z={lo}]".replace(" ", ""),
                     lambda cm, h=hi, l=lo: _e(cm, "Y", h) - _e(cm, "Y", l), (hi, lo)))
    out += [
        E("itt_naive", "itt", "E[Y|Z_i=1]-E[Y|Z_i=0]", _itt_naive),
        E("first_stage", "first_stage", "E[D|Z_i=1]-E[D|Z_i=0]", _first_stage),
        E("late_naive", "first_stage", "(E[Y|Z_i=1]-E[Y|Z_i=0])/(E[D|Z_i=1]-E[D|Z_i=0])",
          lambda cm: ratio(_itt_naive(cm), _first_stage(cm), "late_naive")),
        # local averages under one-sided noncompliance
        E("ey00", "osn", "E[Y|Z=(0,0)] = E[Y(0,0)]", lambda cm: _e(cm, "Y", Z00), (Z00,), True),
        E("ey10_c", "osn", "E[Y*D_i|Z=(1,0)] = E[Y(1,0)|C]P[C]",
          lambda cm: _e(cm, "Y*D_i", Z10), (Z10,), True),
        E("ey01_cj", "osn", "E[Y*D_j|Z=(0,1)] = E[Y(0,1)|C_j]P[C_j]",
          lambda cm: _e(cm, "Y*D_j", Z01), (Z01,), True),
        E("ey00_c", "osn", "E[Y|Z=(0,0)]-E[Y*(1-D_i)|Z=(1,0)] = E[Y(0,0)|C]P[C]",
          lambda cm: _e(cm, "Y", Z00) - _e(cm, "Y*(1-D_i)", Z10), (Z00, Z10), True),
        E("ey00_cj", "osn", "E[Y|Z=(0,0)]-E[Y*(1-D_j)|Z=(0,1)] = E[Y(0,0)|C_j]P[C_j]",
          lambda cm: _e(cm, "Y", Z00) - _e(cm, "Y*(1-D_j)", Z01), (Z00, Z01), True),
        E("ey00_ntnt", "osn", "E[Y*(1-D_i)*(1-D_j)|Z=(1,1)] = E[Y(0,0)|NT,NT]P[NT,NT]",
          lambda cm: _e(cm, "Y*(1-D_i)*(1-D_j)", Z11), (Z11,), True),
        E("late_direct", "late", "(E[Y|Z=(1,0)]-E[Y|Z=(0,0)])/E[D_i|Z=(1,0)]",
          _late_direct, (Z10, Z00), True),
        E("late_indirect", "late", "(E[Y|Z=(0,1)]-E[Y|Z=(0,0)])/E[D_j|Z=(0,1)]",
          _late_indirect, (Z01, Z00), True),
        E("het_own", "heterogeneity",
          "((E[Y|Z=(0,0)]-E[Y*(1-D_i)|Z=(1,0)])/E[D_i|Z=(1,0)]-E[Y|Z=(0,0)])/(1-E[D_i|Z=(1,0)])",
          lambda cm: _het(cm, "D_i", "Y*(1-D_i)", Z10, "het_own"), (Z10, Z00), True),
        E("het_peer", "heterogeneity",
          "((E[Y|Z=(0,0)]-E[Y*(1-D_j)|Z=(0,1)])/E[D_j|Z=(0,1)]-E[Y|Z=(0,0)])/(1-E[D_j|Z=(0,1)])",
          lambda cm: _het(cm, "D_j", "Y*(1-D_j)", Z01, "het_peer"), (Z01, Z00), True),
    ]
    return tuple(out)


REGISTRY: tuple[Estimand, ...] = _build_registry()
_BY_NAME = {e.name: e for e in REGISTRY}
TSLS_NAMES = ("tsls_beta0", "tsls_beta1", "tsls_beta2", "tsls_beta3")
TYPE_NAMES = ("p_at", "p_sc", "p_c", "p_gc", "p_nt")


def estimand_names() -> list[str]:
    return [e.name for e in REGISTRY] + list(TSLS_NAMES)


def moment_osn_violated(mu: MomentVector) -> bool:
    """True when some unit with z=0 is treated, read off the moment vector."""
    cm = mu.access()
    return cm.joint("D_i", Z00) > 0 or cm.joint("D_i", Z01) > 0


def evaluate(
    est: Estimand | str,
    mu: MomentVector,
    sigma: MomentCovariance,
    level: float = 0.95,
    osn_violated: bool | None = None,
) -> EstimateRow:
    """Value and delta-method SE of one registered estimand.

    Preconditions (populated cells, one-sided noncompliance) are checked at
    the point estimate before differentiation.
    """
    est = _BY_NAME[est] if isinstance(est, str) else est
    cm = mu.access()
    for cell in est.cells:
        if cm.prob(cell) == 0.0:
            raise EmptyCell(*cell)
    if est.osn:
        if osn_violated is None:
            osn_violated = moment_osn_violated(mu)
        if osn_violated:
            raise OSNViolated()
    return delta_method(mu, sigma, est.fn, est.name, est.formula, level)


# ---------------------------------------------------------------------------
# Compliance-type distribution


def type_share_rows(
    mu: MomentVector, sigma: MomentCovariance, names: Iterable[str] = TYPE_NAMES, level: float = 0.95
) -> dict[str, EstimateRow]:
    return {n: evaluate(n, mu, sigma, level) for n in names}


def _clamped(row: EstimateRow, level: float) -> EstimateRow:
    if row.value >= 0:
        return row
    return EstimateRow.build(row.name, 0.0, row.std_error, row.formula, row.n_groups, level)


@dataclass
class TypeDistributionEstimate:
    marginals: dict[str, EstimateRow]
    joint_at_at: EstimateRow | None
    joint_nt_nt: EstimateRow | None
    identified_sum: EstimateRow | None
    omitted: dict[str, EstimationError] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def rows(self) -> list[EstimateRow]:
        out = list(self.marginals.values())
        out += [r for r in (self.joint_at_at, self.joint_nt_nt, self.identified_sum) if r is not None]
        return out


def type_distribution(
    mu: MomentVector, sigma: MomentCovariance, level: float = 0.95, clamp: bool = False
) -> TypeDistributionEstimate:
    """Marginal type shares, the two identified joints and the residual joint sum.

    Negative shares are kept as estimated (with a NegativeShareWarning) unless
    ``clamp`` is set, in which case they are floored at zero and the shares no
    longer sum to one.
    """
    rows: dict[str, EstimateRow] = {}
    omitted: dict[str, EstimationError] = {}
    for name in TYPE_NAMES + ("p_at_at", "p_nt_nt", "p_joint_residual"):
        try:
            rows[name] = evaluate(name, mu, sigma, level)
        except EstimationError as exc:
            omitted[name] = exc
    negative = [n for n in TYPE_NAMES if n in rows and rows[n].value < 0]
    if negative:
        warnings.warn(f"negative estimated type shares: {', '.join(negative)}", NegativeShareWarning, stacklevel=2)
        if clamp:
            for n in negative:
                rows[n] = _clamped(rows[n], level)
    flags = [f"negative_share:{n}" for n in negative]
    margs = [rows[n] for n in TYPE_NAMES if n in rows]
    if margs:
        cap = min(r.value for r in margs)
        for jn, tag in (("p_at_at", "p_at"), ("p_nt_nt", "p_nt")):
            if jn in rows:
                j = rows[jn]
                tol = 3 * j.std_error
                upper = min(cap, rows[tag].value) if tag in rows else cap
                if j.value < -tol or j.value > upper + tol:
                    flags.append(f"joint_out_of_bounds:{jn}")
    return TypeDistributionEstimate(
        {n: rows[n] for n in TYPE_NAMES if n in rows},
        rows.get("p_at_at"),
        rows.get("p_nt_nt"),
        rows.get("p_joint_residual"),
        omitted,
        flags,
    )


# ---------------------------------------------------------------------------
# ITT family

ITT_KINDS = {
    "direct_z0": "itt_direct_z0",
    "direct_z1": "itt_direct_z1",
    "indirect_z0": "itt_indirect_z0",
    "indirect_z1": "itt_indirect_z1",
    "total": "itt_total",
    "naive": "itt_naive",
}


def itt(mu: MomentVector, sigma: MomentCovariance, kind: str, level: float = 0.95) -> EstimateRow:
    """One ITT contrast; ``kind`` is a key of ITT_KINDS (``direct`` means ``direct_z0``)."""
    kind = {"direct": "direct_z0", "indirect": "indirect_z0"}.get(kind, kind)
    if kind not in ITT_KINDS:
        raise ValueError(f"unknown ITT kind {kind!r}; choose from {sorted(ITT_KINDS)}")
    return evaluate(ITT_KINDS[kind], mu, sigma, level)


# Contrasts Y(to) - Y(from) of unit i, keyed by own/peer treatment pairs.
CONTRASTS: tuple[tuple[tuple[int, int], tuple[int, int]], ...] = (
    ((1, 0), (0, 0)),
    ((1, 1), (0, 0)),
    ((1, 1), (0, 1)),
    ((0, 1), (0, 0)),
    ((1, 1), (1, 0)),
)

# Type-combination events (own set, peer set) behind each contrast.
_EVENTS = {
    "direct": (
        ((C, SC), (C, GC, NT)),
        ((C, SC), (SC,)),
        ((C, SC), (AT,)),
        ((GC, NT), (SC,)),
        ((AT,), (SC,)),
    ),
    "indirect": (
        ((SC,), (GC, NT)),
        ((SC,), (SC, C)),
        ((SC,), (AT,)),
        ((C, GC, NT), (SC, C)),
        ((AT,), (SC, C)),
    ),
    "total": (
        ((SC, C, GC), (NT,)),
        ((SC, C, GC), (SC, C, GC)),
        ((SC, C, GC), (AT,)),
        ((NT,), (SC, C, GC)),
        ((AT,), (SC, C, GC)),
    ),
}

# First stage used to rescale each kind, as (own set, peer set) marginal shares.
_FIRST_STAGE = {
    "direct": ("E[D_i|Z=(1,0)]-E[D_i|Z=(0,0)]", (C, SC)),
    "indirect": ("E[D_j|Z=(0,1)]-E[D_j|Z=(0,0)]", (C, SC)),
    "total": ("E[D_i|Z=(1,1)]-E[D_i|Z=(0,0)]", (SC, C, GC)),
}


@dataclass(frozen=True)
class WeightTable:
    kind: str
    contrasts: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    events: tuple
    weights: np.ndarray
    first_stage: float
    first_stage_formula: str

    @property
    def weight_sum(self) -> float:
        return float(self.weights.sum())

    @property
    def rescaled(self) -> np.ndarray:
        return self.weights / self.first_stage

    @property
    def rescaled_sum(self) -> float:
        return float(self.rescaled.sum())

    def labels(self) -> list[str]:
        return [f"Y{to}-Y{fr}".replace(" ", "") for to, fr in self.contrasts]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "contrasts": self.labels(),
            "weights": [float(w) for w in self.weights],
            "weight_sum": self.weight_sum,
            "first_stage": self.first_stage,
            "rescaled": [float(w) for w in self.rescaled],
            "rescaled_sum": self.rescaled_sum,
        }


def itt_weight_decomposition(dist: JointTypeDistribution, kind: str = "direct") -> WeightTable:
    """Probability weights on each potential-outcome contrast inside an ITT.

    ``kind`` is ``direct`` (own instrument 0 to 1, peer at 0), ``indirect``
    (peer instrument 0 to 1, own at 0) or ``total`` (both 0 to 1). The raw
    weights sum to less than one; dividing by the matching first stage gives
    the weights carried by the rescaled ITT.
    """
    kind = kind.removesuffix("_z0")
    if kind not in _EVENTS:
        raise ValueError(f"unknown ITT kind {kind!r}; choose from {sorted(_EVENTS)}")
    events = _EVENTS[kind]
    w = np.array([dist.prob(own, peer) for own, peer in events])
    formula, tags = _FIRST_STAGE[kind]
    fs = float(sum(dist.share(t) for t in tags))
    if fs < 1e-12:
        raise ZeroFirstStage(kind, fs)
    w.setflags(write=False)
    return WeightTable(kind, CONTRASTS, events, w, fs, formula)


# ---------------------------------------------------------------------------
# One-sided noncompliance family

OSN_LOCAL_NAMES = ("ey00", "ey10_c", "ey01_cj", "ey00_c", "ey00_cj", "ey00_ntnt", "p_nt_nt")


def _rows(names, mu, sigma, level) -> list[EstimateRow]:
    if moment_osn_violated(mu):
        raise OSNViolated()
    return [evaluate(n, mu, sigma, level, osn_violated=False) for n in names]


def osn_local_averages(mu: MomentVector, sigma: MomentCovariance, level: float = 0.95) -> list[EstimateRow]:
    """Local average potential outcomes scaled by subgroup shares.

    The NT-pair rows need the (1,1) cell and are skipped when it is empty.
    """
    names = OSN_LOCAL_NAMES if mu.access().prob(Z11) > 0 else OSN_LOCAL_NAMES[:5]
    return _rows(names, mu, sigma, level)


def late_direct(mu: MomentVector, sigma: MomentCovariance, level: float = 0.95) -> EstimateRow:
    return _rows(["late_direct"], mu, sigma, level)[0]


def late_indirect(mu: MomentVector, sigma: MomentCovariance, level: float = 0.95) -> EstimateRow:
    return _rows(["late_indirect"], mu, sigma, level)[0]


def baseline_heterogeneity(mu: MomentVector, sigma: MomentCovariance, level: float = 0.95) -> list[EstimateRow]:
    """Untreated-outcome gap between compliers and non-compliers (own, then peer)."""
    return _rows(["het_own", "het_peer"], mu, sigma, level)


# ---------------------------------------------------------------------------
# Spillover 2SLS


@dataclass
class TSLSEstimate:
    rows: list[EstimateRow]
    beta3_identified: bool
    osn_hard_count: int
    covariance: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return np.array([r.value for r in self.rows])

    def __getitem__(self, k: int) -> EstimateRow:
        return self.rows[k]


_TSLS_FORMULAS = (
    "IV: intercept of Y on (1,D_i,D_j,D_i*D_j), instruments (1,Z_i,Z_j,Z_i*Z_j)",
    "IV: coefficient on D_i",
    "IV: coefficient on D_j",
    "IV: coefficient on D_i*D_j",
)


def tsls_spillover(ds, level: float = 0.95) -> TSLSEstimate:
    """Just-identified IV fit of Y on own, peer and joint treatment.

    Both units of every household enter as rows; standard errors are
    cluster-robust by household. When the (1,1) cell is empty or nobody there
    has both units treated, the interaction is dropped and its coefficient is
    not reported. Data that contradict one-sided noncompliance trigger an
    OSNWarning; the algebraic fit is still returned.
    """
    G = ds.n_groups
    y = ds.y.reshape(-1)
    di = ds.d.astype(float).reshape(-1)
    dj = ds.d[:, ::-1].astype(float).reshape(-1)
    zi = ds.z.astype(float).reshape(-1)
    zj = ds.z[:, ::-1].astype(float).reshape(-1)
    both = zi * zj
    n_both = both.sum()
    beta3 = bool(n_both > 0 and (di * dj * both).sum() / n_both > DENOMINATOR_GUARD)
    X = np.column_stack([np.ones_like(y), di, dj, di * dj])
    Z = np.column_stack([np.ones_like(y), zi, zj, both])
    k = 4 if beta3 else 3
    X, Z = X[:, :k], Z[:, :k]
    A = Z.T @ X
    rank = np.linalg.matrix_rank(A / len(y), tol=1e-10)
    if rank < k:
        raise RankDeficientFirstStage(int(rank), k)
    b = np.linalg.solve(A, Z.T @ y)
    u = y - X @ b
    scores = (Z * u[:, None]).reshape(G, 2, k).sum(axis=1)
    Ainv = np.linalg.inv(A)
    V = Ainv @ (scores.T @ scores) @ Ainv.T
    V = (V + V.T) / 2
    hard = ds.osn_hard_count
    if hard:
        warnings.warn(
            f"2SLS coefficients lack a causal reading: {hard} records have d=1 with z=0",
            OSNWarning,
            stacklevel=2,
        )
    rows = [
        EstimateRow.build(TSLS_NAMES[m], b[m], float(np.sqrt(max(V[m, m], 0.0))), _TSLS_FORMULAS[m], G, level)
        for m in range(k)
    ]
    return TSLSEstimate(rows, beta3, hard, V)


# ---------------------------------------------------------------------------
# Conditional-on-observables weighting

G_SPECS = ("y", "x", "yx")


def _design_table(design_probs, labels) -> dict:
    """Normalize user-supplied propensities to {label: {cell: prob}}."""
    out = {}
    for lab in labels:
        entry = design_probs.get(lab, design_probs.get(str(lab))) if design_probs else None
        if entry is None:
            raise SpecError(f"no design probabilities for stratum {lab!r}")
        if isinstance(entry, Mapping):
            vals = [entry.get(f"p{z}{zp}", entry.get((z, zp))) for z, zp in CELLS]
        else:
            vals = list(entry)
        if len(vals) != 4 or any(v is None for v in vals):
            raise SpecError(f"design probabilities for stratum {lab!r} need p00, p10, p01, p11")
        out[lab] = {c: float(v) for c, v in zip(CELLS, vals)}
    return out


class _Weighting:
    """Inverse-propensity averages over strata of a stratum-augmented moment view."""

    def __init__(self, layout_strata, design=None):
        self.labels = tuple(layout_strata)
        self.design = design

    def propensity(self, cm: CellMeans, k: int, cell) -> float:
        if self.design is not None:
            return self.design[self.labels[k]][cell]
        sub = cm.sub(k)
        return sub.prob(cell) / sub.total_prob()

    def ipw(self, cm: CellMeans, stat: str, cell, blocks=None) -> float:
        blocks = range(len(self.labels)) if blocks is None else blocks
        return sum(cm.sub(k).joint(stat, cell) / self.propensity(cm, k, cell) for k in blocks)


def conditional_estimands(
    ds,
    g_spec: str | Sequence[str] = "y",
    design_probs: Mapping | None = None,
    level: float = 0.95,
    small_sample: bool = False,
) -> EstimateReport:
    """Covariate-stratified weighting estimands for discrete ``x``.

    ``g_spec`` picks the transform g(y, x): ``y``, ``x`` (stratum indicators,
    giving complier covariate composition) or ``yx`` (outcome times indicator),
    or a list of these. Propensities are within-stratum cell shares unless
    ``design_probs`` maps each label to its known cell probabilities.
    Per-stratum type shares and LATEs are always included.
    """
    if ds.x is None:
        raise MissingColumn("x")
    specs = G_SPECS if g_spec == "all" else ((g_spec,) if isinstance(g_spec, str) else tuple(g_spec))
    for g in specs:
        if g not in G_SPECS:
            raise ValueError(f"unknown g specification {g!r}; choose from {G_SPECS}")
    mu, sigma = compute_moments(ds, by_stratum=True, small_sample=small_sample)
    labels = mu.layout.strata
    design = _design_table(design_probs, labels) if design_probs is not None else None
    W = _Weighting(labels, design)
    cm0 = mu.access()
    for k, lab in enumerate(labels):
        for cell in (Z00, Z10, Z01):
            if cm0.sub(k).prob(cell) == 0.0:
                raise EmptyStratumCell(lab, *cell)
            p = W.propensity(cm0, k, cell)
            if not p > DENOMINATOR_GUARD:
                raise DegeneratePropensity(lab, cell, p)
    osn_bad = ds.osn_hard_count > 0
    report = EstimateReport(n_groups=ds.n_groups, level=level)
    report.metadata["propensities"] = "known design" if design is not None else "within-stratum cell shares"

    def add(name, formula, fn, needs_osn=True):
        if needs_osn and osn_bad:
            report.omit(name, OSNViolated(ds.osn_hard_count))
            return
        try:
            report.add(delta_method(mu, sigma, fn, name, formula, level))
        except EstimationError as exc:
            report.omit(name, exc)

    def family(prefix, blocks, stat_of, suffix=""):
        """Five weighting identities for g = stat_of(base statistic)."""
        ip = lambda cm, st, c: W.ipw(cm, st, c, blocks)  # noqa: E731
        one, d_i, d_j, nd_i, nd_j = stat_of
        add(f"{prefix}ey00{suffix}", f"sum_x E[{one}*1(Z=(0,0))]/p00(x)", lambda cm: ip(cm, one, Z00))
        add(f"{prefix}ey10_c{suffix}", f"sum_x E[{d_i}*1(Z=(1,0))]/p10(x)", lambda cm: ip(cm, d_i, Z10))
        add(f"{prefix}ey01_cj{suffix}", f"sum_x E[{d_j}*1(Z=(0,1))]/p01(x)", lambda cm: ip(cm, d_j, Z01))
        add(f"{prefix}ey00_c{suffix}", f"sum_x (E[{one}*1(Z=(0,0))]/p00(x)-E[{nd_i}*1(Z=(1,0))]/p10(x))",
            lambda cm: ip(cm, one, Z00) - ip(cm, nd_i, Z10))
        add(f"{prefix}ey00_cj{suffix}", f"sum_x (E[{one}*1(Z=(0,0))]/p00(x)-E[{nd_j}*1(Z=(0,1))]/p01(x))",
            lambda cm: ip(cm, one, Z00) - ip(cm, nd_j, Z01))

    y_stats = ("Y", "Y*D_i", "Y*D_j", "Y*(1-D_i)", "Y*(1-D_j)")
    x_stats = ("1", "D_i", "D_j", "1-D_i", "1-D_j")
    if "y" in specs:
        family("ipw_", None, y_stats)
        add("ipw_p_c", "sum_x E[D_i*1(Z=(1,0))]/p10(x)", lambda cm: W.ipw(cm, "D_i", Z10))
        add("ipw_late_direct", "(ipw_ey10_c-ipw_ey00_c)/ipw_p_c",
            lambda cm: ratio(W.ipw(cm, "Y*D_i", Z10) - W.ipw(cm, "Y", Z00) + W.ipw(cm, "Y*(1-D_i)", Z10),
                             W.ipw(cm, "D_i", Z10), "ipw_late_direct"))
        add("ipw_late_indirect", "(ipw_ey01_cj-ipw_ey00_cj)/sum_x E[D_j*1(Z=(0,1))]/p01(x)",
            lambda cm: ratio(W.ipw(cm, "Y*D_j", Z01) - W.ipw(cm, "Y", Z00) + W.ipw(cm, "Y*(1-D_j)", Z01),
                             W.ipw(cm, "D_j", Z01), "ipw_late_indirect"))
    for k, lab in enumerate(labels):
        sfx = f"[x={lab}]"
        if "x" in specs:
            family("ipw_x_", [k], x_stats, sfx)
            add(f"complier_share{sfx}", "ipw_x_ey10_c[x]/sum_x' ipw_x_ey10_c[x']",
                lambda cm, k=k: ratio(W.ipw(cm, "D_i", Z10, [k]), W.ipw(cm, "D_i", Z10), "complier_share"))
            add(f"peer_complier_share{sfx}", "ipw_x_ey01_cj[x]/sum_x' ipw_x_ey01_cj[x']",
                lambda cm, k=k: ratio(W.ipw(cm, "D_j", Z01, [k]), W.ipw(cm, "D_j", Z01), "peer_complier_share"))
        if "yx" in specs:
            family("ipw_yx_", [k], y_stats, sfx)
        add(f"p_c{sfx}", "E[D_i|Z=(1,0),x]", lambda cm, k=k: cm.sub(k).mean("D_i", Z10))
        if cm0.sub(k).prob(Z11) > 0:
            add(f"p_gc{sfx}", "E[D_i|Z=(1,1),x]-E[D_i|Z=(1,0),x]",
                lambda cm, k=k: cm.sub(k).mean("D_i", Z11) - cm.sub(k).mean("D_i", Z10))
            add(f"p_nt{sfx}", "1-E[D_i|Z=(1,1),x]", lambda cm, k=k: 1.0 - cm.sub(k).mean("D_i", Z11))
        else:
            for nm in (f"p_gc{sfx}", f"p_nt{sfx}"):
                report.omit(nm, EmptyStratumCell(lab, 1, 1))
        add(f"late_direct{sfx}", "(E[Y|Z=(1,0),x]-E[Y|Z=(0,0),x])/E[D_i|Z=(1,0),x]",
            lambda cm, k=k: _late_direct(cm.sub(k)))
        add(f"late_indirect{sfx}", "(E[Y|Z=(0,1),x]-E[Y|Z=(0,0),x])/E[D_j|Z=(0,1),x]",
            lambda cm, k=k: _late_indirect(cm.sub(k)))
    return report


# ---------------------------------------------------------------------------
# Full report


def _first_stage_f(row: EstimateRow) -> float | None:
    if row.std_error <= 0:
        return None
    return (row.value / row.std_error) ** 2


def estimate(
    ds,
    estimands: Iterable[str] | None = None,
    level: float = 0.95,
    clamp_shares: bool = False,
    design_probs: Mapping | None = None,
    g_spec: str | Sequence[str] = "y",
    small_sample: bool = False,
) -> EstimateReport:
    """Every identified estimand for ``ds`` (or the requested subset).

    Conditional weighting estimands are added when the data carry ``x``.
    Metadata records cell counts, the OSN diagnostic and the first-stage F.
    """
    wanted = None if estimands is None else list(estimands)
    if wanted is not None:
        known = set(estimand_names())
        unknown = [n for n in wanted if n not in known and not n.startswith(("ipw", "complier", "peer_", "p_", "late_"))]
        if unknown:
            raise ValueError(f"unknown estimands: {', '.join(unknown)}")
    want = (lambda n: True) if wanted is None else (lambda n: n in wanted)
    mu, sigma = compute_moments(ds, small_sample=small_sample)
    hard = ds.osn_hard_count
    report = EstimateReport(n_groups=ds.n_groups, level=level)

    for est in REGISTRY:
        if not want(est.name):
            continue
        try:
            row = evaluate(est, mu, sigma, level, osn_violated=hard > 0)
        except EstimationError as exc:
            report.omit(est.name, OSNViolated(hard) if isinstance(exc, OSNViolated) else exc)
            continue
        if est.name in TYPE_NAMES and row.value < 0:
            warnings.warn(f"negative estimated share {est.name}={row.value:.4g}", NegativeShareWarning, stacklevel=2)
            report.metadata.setdefault("negative_shares", []).append(est.name)
            if clamp_shares:
                row = _clamped(row, level)
        report.add(row)

    if any(want(n) for n in TSLS_NAMES):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OSNWarning)
                fit = tsls_spillover(ds, level)
            for r in fit.rows:
                if want(r.name):
                    report.add(r)
            if not fit.beta3_identified and want("tsls_beta3"):
                report.omit("tsls_beta3", EmptyCell(1, 1) if ds.cell_counts[Z11] == 0 else
                            RankDeficientFirstStage(3, 4))
            if hard:
                report.metadata["tsls_warning"] = f"OSNWarning: {hard} records with d=1 and z=0"
        except EstimationError as exc:
            for n in TSLS_NAMES:
                if want(n):
                    report.omit(n, exc)

    if ds.x is not None and (wanted is None or any(n.startswith("ipw") or "[x=" in n for n in wanted)):
        try:
            cond = conditional_estimands(ds, g_spec, design_probs, level, small_sample)
            if wanted is not None:
                cond.rows = [r for r in cond.rows if r.name in wanted]
            report.extend(cond)
        except EstimationError as exc:
            report.omit("conditional", exc)

    report.metadata["cell_counts"] = {f"{z}{zp}": n for (z, zp), n in ds.cell_counts.items()}
    report.metadata["osn"] = {"hard_count": hard, "verdict": "consistent" if hard == 0 else "violated"}
    if "first_stage" in report:
        f = _first_stage_f(report["first_stage"])
        report.metadata["first_stage_F"] = f
        report.metadata["first_stage_F_convention"] = (
            "squared cluster-robust t statistic of the own-instrument first stage"
        )
    report.metadata["covariance_normalization"] = "1/(G-1)" if small_sample else "1/G"
    return report
