"""Exact population quantities, a reproducible simulator and identity checks.

Population expectations are sums over the 25 ordered type pairs, with
treatments from the potential-treatment map and outcomes from the tabulated
mean grid. Noise enters only through its zero mean (Gaussian) or through the
clamped success probability (Bernoulli).
"""

from __future__ import annotations

import itertools
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import EmptyCell, EstimationError
from .estimators import (
    _EVENTS,
    CONTRASTS,
    REGISTRY,
    TSLS_NAMES,
    estimate,
    itt_weight_decomposition,
)
from .ingest import Dataset
from .model import (
    AT,
    C,
    CELLS,
    GC,
    NT,
    SC,
    TYPES,
    AssignmentDesign,
    DGPSpec,
    JointTypeDistribution,
    OutcomeModel,
    Stratum,
    cell_index,
    potential_treatment,
    spec_from_stratum,
    statistic,
    treatment_table,
)
from .moments import DENOMINATOR_GUARD, CellMeans, MomentLayout, critical_value

log = logging.getLogger(__name__)

IDENTITY_TOL = 1e-10
BLOCK_SIZE = 4096
_T = np.arange(5)


# ---------------------------------------------------------------------------
# Population expectations


def _cell_expectation(stratum: Stratum, z: int, zp: int, a: np.ndarray, b: np.ndarray) -> float:
    """E[a(D_i,D_j) + Y*b(D_i,D_j) | Z_i=z, Z_j=zp] within one stratum."""
    D = treatment_table()
    di = np.broadcast_to(D[:, z, zp][:, None], (5, 5))
    dj = np.broadcast_to(D[:, zp, z][None, :], (5, 5))
    m = stratum.outcomes.effective_mean[_T[:, None], _T[None, :], di, dj]
    return float(np.sum(stratum.types.p * (a[di, dj] + m * b[di, dj])))


def population_expectation(spec: DGPSpec, z: int, z_peer: int, stat: str) -> float:
    """E[stat | Z_i=z, Z_j=z_peer], mixing strata by their cell mass when stratified.

    Raises EmptyCell when no stratum puts mass on the cell.
    """
    a, b = statistic(stat)
    comps = spec.components()
    if len(comps) == 1:
        return _cell_expectation(comps[0], z, z_peer, a, b)
    k = cell_index(z, z_peer)
    w = np.array([s.weight * s.design.unit_probs()[k] for s in comps])
    if w.sum() <= 0:
        raise EmptyCell(z, z_peer)
    vals = np.array([_cell_expectation(s, z, z_peer, a, b) for s in comps])
    return float(w @ vals / w.sum())


def population_moments(spec: DGPSpec, h_spec: str = "full-8", by_stratum: bool = False) -> np.ndarray:
    """Expected per-household moment vector E[W_g] in the layout compute_moments uses."""
    comps = spec.components()
    labels = tuple(s.label for s in comps) if by_stratum else (None,)
    cells = (0, 1, 2) if h_spec == "osn-4" else (0, 1, 2, 3)
    layout = MomentLayout(h_spec, cells, labels)
    mu = np.zeros(layout.size)
    for s in comps:
        block = labels.index(s.label) if by_stratum else 0
        probs = s.design.unit_probs()
        for k, (z, zp) in enumerate(CELLS):
            mass = s.weight * probs[k]
            mu[layout.prob_index(k, block)] += mass
            if k not in layout.cells:
                continue
            for c, (_, a, b) in enumerate(layout.components):
                mu[layout.h_index(c, k, block)] += mass * _cell_expectation(s, z, zp, a, b)
    return mu


def population_layout(spec: DGPSpec, h_spec: str = "full-8", by_stratum: bool = False) -> MomentLayout:
    labels = tuple(s.label for s in spec.components()) if by_stratum else (None,)
    return MomentLayout(h_spec, (0, 1, 2) if h_spec == "osn-4" else (0, 1, 2, 3), labels)


# ---------------------------------------------------------------------------
# Type-level quantities


def _mean(stratum: Stratum) -> np.ndarray:
    return stratum.outcomes.effective_mean


def _own_sum(st: Stratum, tag, d_to, d_from=None) -> float:
    """sum_b p[tag, b] * (m[tag, b, d_to] - m[tag, b, d_from])."""
    m = _mean(st)
    v = m[tag, :, d_to[0], d_to[1]]
    if d_from is not None:
        v = v - m[tag, :, d_from[0], d_from[1]]
    return float(st.types.p[tag, :] @ v)


def _peer_sum(st: Stratum, tag, d_to, d_from=None) -> float:
    """sum_a p[a, tag] * (m[a, tag, d_to] - m[a, tag, d_from])."""
    m = _mean(st)
    v = m[:, tag, d_to[0], d_to[1]]
    if d_from is not None:
        v = v - m[:, tag, d_from[0], d_from[1]]
    return float(st.types.p[:, tag] @ v)


def _baseline(st: Stratum) -> float:
    return float(np.sum(st.types.p * _mean(st)[:, :, 0, 0]))


def _both_treated_11(st: Stratum) -> np.ndarray:
    D = treatment_table()
    return np.outer(D[:, 1, 1], D[:, 1, 1]).astype(float)


def beta3_decomposition(st: Stratum) -> float | None:
    """Interaction coefficient from type-conditional contrasts; None if not identified."""
    both = _both_treated_11(st)
    denom = float(np.sum(st.types.p * both))
    if denom <= DENOMINATOR_GUARD:
        return None
    m = _mean(st)
    pc, pgc = st.types.share(C), st.types.share(GC)
    if pc <= 0:
        return None
    # (E[effect|GC] - E[effect|C]) * P[GC], own and peer versions
    own = _own_sum(st, GC, (1, 0), (0, 0)) - pgc / pc * _own_sum(st, C, (1, 0), (0, 0))
    peer = _peer_sum(st, GC, (0, 1), (0, 0)) - pgc / pc * _peer_sum(st, C, (0, 1), (0, 0))
    inter = m[:, :, 1, 1] - m[:, :, 1, 0] - m[:, :, 0, 1] + m[:, :, 0, 0]
    return own / denom + peer / denom + float(np.sum(st.types.p * both * inter)) / denom


def beta3_ratio(spec: DGPSpec) -> float | None:
    """Interaction coefficient from the (1,1)-cell mean net of the main effects."""
    st = spec.components()[0]
    D = treatment_table()
    denom = float(np.sum(st.types.p * _both_treated_11(st)))
    if denom <= DENOMINATOR_GUARD or st.types.share(C) <= 0:
        return None
    pc = st.types.share(C)
    b0 = _baseline(st)
    b1 = _own_sum(st, C, (1, 0), (0, 0)) / pc
    b2 = _peer_sum(st, C, (0, 1), (0, 0)) / pc
    ed = float(st.types.marginals() @ D[:, 1, 1])
    return (population_expectation(spec, 1, 1, "Y") - b0 - b1 * ed - b2 * ed) / denom


# ---------------------------------------------------------------------------
# Truth


@dataclass
class PopulationTruth:
    values: dict[str, float] = field(default_factory=dict)
    omitted: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def get(self, name: str, default=None):
        return self.values.get(name, default)

    def set(self, name: str, fn) -> None:
        try:
            v = fn()
        except (EstimationError, ZeroDivisionError) as exc:
            self.omitted[name] = getattr(exc, "condition", type(exc).__name__)
            return
        if v is None or not math.isfinite(v):
            self.omitted[name] = "NotIdentified"
        else:
            self.values[name] = float(v)

    def to_dict(self) -> dict:
        return {
            "values": {k: float(f"{v:.15g}") for k, v in self.values.items()},
            "omitted": dict(self.omitted),
        }


def _peer_given_own(spec: DGPSpec, z: int, zp: int) -> float:
    """P[Z_j=zp | Z_i=z] for a random unit (pooled over strata)."""
    probs = sum(s.weight * s.design.unit_probs() for s in spec.components())
    num = probs[cell_index(z, zp)]
    den = probs[cell_index(z, 0)] + probs[cell_index(z, 1)]
    if den <= 0:
        raise EmptyCell(z, 0)
    return float(num / den)


def _naive(spec: DGPSpec, stat: str) -> float:
    pe = lambda z, zp: population_expectation(spec, z, zp, stat)  # noqa: E731
    out = 0.0
    for z, sign in ((1, 1.0), (0, -1.0)):
        for zp in (0, 1):
            w = _peer_given_own(spec, z, zp)
            if w > 0:
                out += sign * w * pe(z, zp)
    return out


def _population_tsls(spec: DGPSpec) -> tuple[np.ndarray, bool] | None:
    """Population IV solution with the same interaction-dropping rule as the estimator."""
    probs = sum(s.weight * s.design.unit_probs() for s in spec.components())
    pe = lambda c, s: population_expectation(spec, *c, s)  # noqa: E731
    both = probs[3] > 0 and pe((1, 1), "D_i*D_j") > DENOMINATOR_GUARD
    k = 4 if both else 3
    A = np.zeros((k, k))
    r = np.zeros(k)
    for idx, cell in enumerate(CELLS):
        if probs[idx] <= 0:
            continue
        z, zp = cell
        zt = np.array([1.0, z, zp, z * zp])[:k]
        xt = np.array([1.0, pe(cell, "D_i"), pe(cell, "D_j"), pe(cell, "D_i*D_j")])[:k]
        A += probs[idx] * np.outer(zt, xt)
        r += probs[idx] * zt * pe(cell, "Y")
    if np.linalg.matrix_rank(A, tol=1e-10) < k:
        return None
    return np.linalg.solve(A, r), both


def _causal_truths(t: PopulationTruth, spec: DGPSpec) -> None:
    st = spec.components()[0]
    P = st.types.p
    m = st.types.marginals()
    for name, tag in zip(("p_at", "p_sc", "p_c", "p_gc", "p_nt"), TYPES):
        t.values[name] = float(m[tag])
    t.values["p_at_at"] = float(P[AT, AT])
    t.values["p_nt_nt"] = float(P[NT, NT])
    t.values["p_joint_residual"] = st.types.prob([AT], [NT, GC]) + st.types.prob([SC], [GC, NT])

    if not st.types.satisfies_osn:
        for e in REGISTRY:
            if e.osn:
                t.omitted[e.name] = "OSNViolated"
        return
    pc = float(m[C])
    base = _baseline(st)
    t.values["ey00"] = base
    t.values["ey10_c"] = _own_sum(st, C, (1, 0))
    t.values["ey01_cj"] = _peer_sum(st, C, (0, 1))
    t.values["ey00_c"] = _own_sum(st, C, (0, 0))
    t.values["ey00_cj"] = _peer_sum(st, C, (0, 0))
    t.values["ey00_ntnt"] = float(P[NT, NT] * _mean(st)[NT, NT, 0, 0])
    if pc > 0:
        t.values["late_direct"] = _own_sum(st, C, (1, 0), (0, 0)) / pc
        t.values["late_indirect"] = _peer_sum(st, C, (0, 1), (0, 0)) / pc
    else:
        t.omitted["late_direct"] = t.omitted["late_indirect"] = "DegenerateDenominator"
    if 0 < pc < 1:
        t.values["het_own"] = t.values["ey00_c"] / pc - (base - t.values["ey00_c"]) / (1 - pc)
        t.values["het_peer"] = t.values["ey00_cj"] / pc - (base - t.values["ey00_cj"]) / (1 - pc)
    else:
        t.omitted["het_own"] = t.omitted["het_peer"] = "DegenerateDenominator"


def _plugin_truths(t: PopulationTruth, spec: DGPSpec, families: Iterable[str] | None = None) -> None:
    """Probability limits of the registered estimators at the population moments."""
    mu = population_moments(spec)
    cm = CellMeans(population_layout(spec), mu)
    fam = None if families is None else set(families)
    for e in REGISTRY:
        if fam is not None and e.family not in fam and e.name not in fam:
            continue
        if e.osn and not spec.satisfies_osn:
            t.omitted[e.name] = "OSNViolated"
            continue
        t.set(e.name, lambda e=e: e.fn(cm))


def _conditional_truths(t: PopulationTruth, spec: DGPSpec) -> None:
    comps = spec.components()
    osn = spec.satisfies_osn
    wsum = lambda f: sum(s.weight * f(s) for s in comps)  # noqa: E731
    pc_all = wsum(lambda s: s.types.share(C))
    if osn:
        t.values["ipw_ey00"] = wsum(_baseline)
        t.values["ipw_ey10_c"] = wsum(lambda s: _own_sum(s, C, (1, 0)))
        t.values["ipw_ey01_cj"] = wsum(lambda s: _peer_sum(s, C, (0, 1)))
        t.values["ipw_ey00_c"] = wsum(lambda s: _own_sum(s, C, (0, 0)))
        t.values["ipw_ey00_cj"] = wsum(lambda s: _peer_sum(s, C, (0, 0)))
        t.values["ipw_p_c"] = pc_all
        t.set("ipw_late_direct", lambda: wsum(lambda s: _own_sum(s, C, (1, 0), (0, 0))) / pc_all)
        t.set("ipw_late_indirect", lambda: wsum(lambda s: _peer_sum(s, C, (0, 1), (0, 0))) / pc_all)
    for s in comps:
        sfx = f"[x={s.label}]"
        if not osn:
            continue
        pc = s.types.share(C)
        t.values[f"p_c{sfx}"] = pc
        t.values[f"p_gc{sfx}"] = s.types.share(GC)
        t.values[f"p_nt{sfx}"] = s.types.share(NT)
        w = s.weight
        t.values[f"ipw_x_ey00{sfx}"] = w
        for nm in ("ipw_x_ey10_c", "ipw_x_ey01_cj", "ipw_x_ey00_c", "ipw_x_ey00_cj"):
            t.values[nm + sfx] = w * pc
        if pc_all > 0:
            t.values[f"complier_share{sfx}"] = w * pc / pc_all
            t.values[f"peer_complier_share{sfx}"] = w * pc / pc_all
        t.values[f"ipw_yx_ey00{sfx}"] = w * _baseline(s)
        t.values[f"ipw_yx_ey10_c{sfx}"] = w * _own_sum(s, C, (1, 0))
        t.values[f"ipw_yx_ey01_cj{sfx}"] = w * _peer_sum(s, C, (0, 1))
        t.values[f"ipw_yx_ey00_c{sfx}"] = w * _own_sum(s, C, (0, 0))
        t.values[f"ipw_yx_ey00_cj{sfx}"] = w * _peer_sum(s, C, (0, 0))
        if pc > 0:
            t.values[f"late_direct{sfx}"] = _own_sum(s, C, (1, 0), (0, 0)) / pc
            t.values[f"late_indirect{sfx}"] = _peer_sum(s, C, (0, 1), (0, 0)) / pc


def truth(spec: DGPSpec) -> PopulationTruth:
    """Exact value of every estimand under ``spec``.

    Unstratified specs get causal (type-level) values for type shares, local
    averages, LATEs and heterogeneity. For stratified specs the pooled
    estimators converge to stratum mixtures weighted by each stratum's cell
    mass, so those families are reported at their probability limits, and the
    weighting and per-stratum families carry the causal values.
    """
    t = PopulationTruth()
    for z, zp in CELLS:
        t.set(f"mean_y_{z}{zp}", lambda z=z, zp=zp: population_expectation(spec, z, zp, "Y"))
    pe = lambda z, zp: population_expectation(spec, z, zp, "Y")  # noqa: E731
    t.set("itt_direct_z0", lambda: pe(1, 0) - pe(0, 0))
    t.set("itt_direct_z1", lambda: pe(1, 1) - pe(0, 1))
    t.set("itt_indirect_z0", lambda: pe(0, 1) - pe(0, 0))
    t.set("itt_indirect_z1", lambda: pe(1, 1) - pe(1, 0))
    t.set("itt_total", lambda: pe(1, 1) - pe(0, 0))
    t.set("itt_naive", lambda: _naive(spec, "Y"))
    t.set("first_stage", lambda: _naive(spec, "D_i"))

    def late_naive():
        fs = _naive(spec, "D_i")
        return None if abs(fs) < DENOMINATOR_GUARD else _naive(spec, "Y") / fs

    t.set("late_naive", late_naive)
    if spec.stratified:
        _plugin_truths(t, spec, families=("types", "osn", "late", "heterogeneity"))
        _conditional_truths(t, spec)
    else:
        _causal_truths(t, spec)
        for kind in ("direct", "indirect", "total"):
            try:
                wt = itt_weight_decomposition(spec.types, kind)
            except EstimationError:
                continue
            t.values[f"weights_{kind}_sum"] = wt.weight_sum
            t.values[f"weights_{kind}_rescaled_sum"] = wt.rescaled_sum
    probs = sum(s.weight * s.design.unit_probs() for s in spec.components())
    for e in REGISTRY:
        if e.name in t.values and any(probs[cell_index(*c)] <= 0 for c in e.cells):
            del t.values[e.name]
            t.omitted[e.name] = "EmptyCell"
    sol = _population_tsls(spec)
    if sol is None:
        for n in TSLS_NAMES:
            t.omitted[n] = "RankDeficientFirstStage"
    else:
        beta, both = sol
        for k, v in enumerate(beta):
            t.values[TSLS_NAMES[k]] = float(v)
        if not both:
            t.omitted["tsls_beta3"] = "NotIdentified"
    return t


# ---------------------------------------------------------------------------
# Identity verification


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    status: str  # "pass", "fail" or "not-applicable"
    residual: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "residual": self.residual, "note": self.note}


@dataclass
class IdentityReport:
    checks: list[IdentityCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    @property
    def failures(self) -> list[IdentityCheck]:
        return [c for c in self.checks if c.status == "fail"]

    @property
    def max_residual(self) -> float:
        r = [c.residual for c in self.checks if c.residual is not None]
        return max(r) if r else 0.0

    def add(self, name: str, lhs: float, rhs: float, tol: float = IDENTITY_TOL) -> None:
        res = abs(lhs - rhs)
        self.checks.append(IdentityCheck(name, "pass" if res <= tol else "fail", float(res)))

    def skip(self, name: str, note: str) -> None:
        self.checks.append(IdentityCheck(name, "not-applicable", None, note))

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_residual": self.max_residual,
            "checks": [c.to_dict() for c in self.checks],
        }


def _enumerate_mean(st: Stratum, z: int, zp: int, weight) -> float:
    """E[weight(types, d_i, d_j) * Y | cell] by explicit loops over type pairs."""
    total = 0.0
    m = _mean(st)
    for a, b in itertools.product(TYPES, TYPES):
        p = st.types.p[a, b]
        if p == 0.0:
            continue
        di = potential_treatment(a, z, zp)
        dj = potential_treatment(b, zp, z)
        total += p * weight(a, b, di, dj, m)
    return total


def _contrast_by_enumeration(st: Stratum, lo, hi) -> tuple[dict, float]:
    """Weights per contrast and the exact ITT from the raw treatment transitions."""
    weights = {c: 0.0 for c in CONTRASTS}
    value = 0.0
    m = _mean(st)
    for a, b in itertools.product(TYPES, TYPES):
        p = st.types.p[a, b]
        frm = (potential_treatment(a, *lo), potential_treatment(b, lo[1], lo[0]))
        to = (potential_treatment(a, *hi), potential_treatment(b, hi[1], hi[0]))
        if frm == to:
            continue
        weights[(to, frm)] += p
        value += p * (m[a, b, to[0], to[1]] - m[a, b, frm[0], frm[1]])
    return weights, value


_KIND_CELLS = {"direct": ((0, 0), (1, 0)), "indirect": ((0, 0), (0, 1)), "total": ((0, 0), (1, 1))}


def _verify_component(rep: IdentityReport, spec: DGPSpec, sfx: str = "") -> None:
    st = spec.components()[0]
    P = st.types.p
    pe = lambda z, zp, s="Y": population_expectation(spec, z, zp, s)  # noqa: E731
    m = _mean(st)

    # (a) ITT event tables: hand-coded type events against both the cell means and
    #     a brute-force enumeration of treatment transitions.
    for kind, (lo, hi) in _KIND_CELLS.items():
        by_events = 0.0
        for (to, frm), (own, peer) in zip(CONTRASTS, _EVENTS[kind]):
            for a in own:
                for b in peer:
                    by_events += P[a, b] * (m[a, b, to[0], to[1]] - m[a, b, frm[0], frm[1]])
        rep.add(f"itt_{kind}_events{sfx}", pe(*hi) - pe(*lo), by_events)
        weights, value = _contrast_by_enumeration(st, lo, hi)
        rep.add(f"itt_{kind}_enumeration{sfx}", value, by_events)
        try:
            wt = itt_weight_decomposition(st.types, kind)
            w_err = max(abs(wt.weights[k] - weights[c]) for k, c in enumerate(CONTRASTS))
            rep.add(f"itt_{kind}_weights{sfx}", w_err, 0.0)
        except EstimationError as exc:
            rep.skip(f"itt_{kind}_weights{sfx}", exc.condition)

    # (b) naive ITT: brute force over types and assignments against its three-term cell-contrast form.
    design = st.design
    num = {0: 0.0, 1: 0.0}
    den = {0: 0.0, 1: 0.0}
    for z, zp in itertools.product((0, 1), (0, 1)):
        pz = 0.5 * (design.cell_prob(z, zp) + design.cell_prob(zp, z))
        if pz == 0:
            continue
        num[z] += pz * _enumerate_mean(st, z, zp, lambda a, b, di, dj, mm: mm[a, b, di, dj])
        den[z] += pz
    if den[0] > 0 and den[1] > 0:
        brute = num[1] / den[1] - num[0] / den[0]
        q1 = _peer_given_own(spec, 1, 1)
        q0 = _peer_given_own(spec, 0, 1)
        three_term = (pe(1, 0) - pe(0, 0)) * (1 - q1) + (pe(1, 1) - pe(0, 0)) * q1 - (pe(0, 1) - pe(0, 0)) * q0
        rep.add(f"itt_naive_three_term{sfx}", brute, three_term)
    else:
        rep.skip(f"itt_naive_three_term{sfx}", "an own-assignment arm has no mass")

    # (e) type shares from observable treatment means.
    marg = st.types.marginals()
    obs = [
        pe(0, 0, "D_i"),
        pe(0, 1, "D_i") - pe(0, 0, "D_i"),
        pe(1, 0, "D_i") - pe(0, 1, "D_i"),
        pe(1, 1, "D_i") - pe(1, 0, "D_i"),
        1 - pe(1, 1, "D_i"),
    ]
    for tag, v in zip(TYPES, obs):
        rep.add(f"type_share_{tag.name}{sfx}", v, marg[tag])
    rep.add(f"joint_AT_AT{sfx}", pe(0, 0, "D_i*D_j"), P[AT, AT])
    rep.add(f"joint_NT_NT{sfx}", pe(1, 1, "(1-D_i)*(1-D_j)"), P[NT, NT])
    rep.add(
        f"joint_residual_sum{sfx}",
        pe(0, 1, "D_i*(1-D_j)"),
        st.types.prob([AT], [NT, GC]) + st.types.prob([SC], [GC, NT]),
    )

    # (f) four-term potential-outcome expansion against direct enumeration.
    for z, zp in CELLS:
        def four(a, b, di, dj, mm):
            y00 = mm[a, b, 0, 0]
            return (
                y00
                + (mm[a, b, 1, 0] - y00) * di
                + (mm[a, b, 0, 1] - y00) * dj
                + (mm[a, b, 1, 1] - mm[a, b, 1, 0] - mm[a, b, 0, 1] + y00) * di * dj
            )

        rep.add(f"four_term_{z}{zp}{sfx}", _enumerate_mean(st, z, zp, four), pe(z, zp))

    # (c) local averages, LATEs and heterogeneity under one-sided noncompliance.
    osn_names = ("lapo_ey00", "lapo_ey10_c", "lapo_ey01_cj", "lapo_ey00_c", "lapo_ey00_cj",
                 "lapo_ey00_ntnt", "lapo_p_nt_nt", "late_direct", "late_indirect",
                 "het_own", "het_peer", "late_naive_one_per_household",
                 "tsls_beta0", "tsls_beta1", "tsls_beta2", "tsls_beta3")
    if not st.types.satisfies_osn:
        for n in osn_names:
            rep.skip(n + sfx, "types include always-takers or social compliers")
    else:
        pc = marg[C]
        base = _baseline(st)
        rep.add(f"lapo_ey00{sfx}", pe(0, 0), base)
        rep.add(f"lapo_ey10_c{sfx}", pe(1, 0, "Y*D_i"), _own_sum(st, C, (1, 0)))
        rep.add(f"lapo_ey01_cj{sfx}", pe(0, 1, "Y*D_j"), _peer_sum(st, C, (0, 1)))
        rep.add(f"lapo_ey00_c{sfx}", pe(0, 0) - pe(1, 0, "Y*(1-D_i)"), _own_sum(st, C, (0, 0)))
        rep.add(f"lapo_ey00_cj{sfx}", pe(0, 0) - pe(0, 1, "Y*(1-D_j)"), _peer_sum(st, C, (0, 0)))
        rep.add(f"lapo_ey00_ntnt{sfx}", pe(1, 1, "Y*(1-D_i)*(1-D_j)"), P[NT, NT] * m[NT, NT, 0, 0])
        rep.add(f"lapo_p_nt_nt{sfx}", pe(1, 1, "(1-D_i)*(1-D_j)"), P[NT, NT])
        if pc > DENOMINATOR_GUARD:
            ld = _own_sum(st, C, (1, 0), (0, 0)) / pc
            li = _peer_sum(st, C, (0, 1), (0, 0)) / pc
            rep.add(f"late_direct{sfx}", (pe(1, 0) - pe(0, 0)) / pe(1, 0, "D_i"), ld)
            rep.add(f"late_indirect{sfx}", (pe(0, 1) - pe(0, 0)) / pe(0, 1, "D_j"), li)
        else:
            ld = li = None
            rep.skip(f"late_direct{sfx}", "no compliers")
            rep.skip(f"late_indirect{sfx}", "no compliers")
        if DENOMINATOR_GUARD < pc < 1 - DENOMINATOR_GUARD:
            # Type-conditional means by explicit partition of own / peer type.
            not_c = [t for t in TYPES if t != C]
            own_c = sum(P[C, b] * m[C, b, 0, 0] for b in TYPES) / pc
            own_n = sum(P[a, b] * m[a, b, 0, 0] for a in not_c for b in TYPES) / (1 - pc)
            peer_c = sum(P[a, C] * m[a, C, 0, 0] for a in TYPES) / pc
            peer_n = sum(P[a, b] * m[a, b, 0, 0] for a in TYPES for b in not_c) / (1 - pc)
            obs_c = (pe(0, 0) - pe(1, 0, "Y*(1-D_i)")) / pe(1, 0, "D_i")
            obs_cj = (pe(0, 0) - pe(0, 1, "Y*(1-D_j)")) / pe(0, 1, "D_j")
            rep.add(f"het_own{sfx}", (obs_c - pe(0, 0)) / (1 - pe(1, 0, "D_i")), own_c - own_n)
            rep.add(f"het_peer{sfx}", (obs_cj - pe(0, 0)) / (1 - pe(0, 1, "D_j")), peer_c - peer_n)
        else:
            rep.skip(f"het_own{sfx}", "complier share is 0 or 1")
            rep.skip(f"het_peer{sfx}", "complier share is 0 or 1")
        if design.cell_prob(1, 1) == 0 and ld is not None:
            q0 = _peer_given_own(spec, 0, 1)
            rep.add(f"late_naive_one_per_household{sfx}", _naive(spec, "Y") / _naive(spec, "D_i"), ld - q0 * li)
        else:
            rep.skip(f"late_naive_one_per_household{sfx}", "design has mass on both-assigned households")

        # (d) population IV solve against the closed forms.
        sol = _population_tsls(spec) if pc > DENOMINATOR_GUARD else None
        if sol is None:
            for n in ("tsls_beta0", "tsls_beta1", "tsls_beta2", "tsls_beta3"):
                rep.skip(n + sfx, "first stage not of full rank")
        else:
            beta, both = sol
            rep.add(f"tsls_beta0{sfx}", beta[0], base)
            rep.add(f"tsls_beta1{sfx}", beta[1], ld)
            rep.add(f"tsls_beta2{sfx}", beta[2], li)
            b3d = beta3_decomposition(st)
            b3r = beta3_ratio(spec)
            if b3d is None or b3r is None:
                rep.skip(f"tsls_beta3{sfx}", "no household has both units treated at (1,1)")
            else:
                rep.add(f"tsls_beta3_forms{sfx}", b3r, b3d)
                if both:
                    rep.add(f"tsls_beta3{sfx}", beta[3], b3d)
                else:
                    rep.skip(f"tsls_beta3{sfx}", "design puts no mass on (1,1)")


def verify_identities(spec: DGPSpec) -> IdentityReport:
    """Check the ITT decompositions, type-share formulas, local-average equalities
    and IV closed forms at 1e-10 absolute. Failures are reported, never raised.
    Stratified specs are checked stratum by stratum.
    """
    rep = IdentityReport()
    comps = spec.components()
    for s in comps:
        sub = spec_from_stratum(s, spec.groups, spec.seed)
        sfx = "" if s.label is None else f"[x={s.label}]"
        _verify_component(rep, sub, sfx)
    return rep


# ---------------------------------------------------------------------------
# Random specs


def _random_joint(rng: np.random.Generator, active: Sequence[int]) -> np.ndarray:
    k = len(active)
    if rng.random() < 0.5:
        m = rng.dirichlet(np.ones(k))
        sub = np.outer(m, m)
    else:
        iu = np.triu_indices(k)
        w = rng.dirichlet(np.ones(len(iu[0])))
        sub = np.zeros((k, k))
        sub[iu] = w
        sub = (sub + sub.T) / 2
        sub[np.diag_indices(k)] = w[iu[0] == iu[1]]
    sub = sub / sub.sum()
    p = np.zeros((5, 5))
    p[np.ix_(active, active)] = sub
    return (p + p.T) / 2


def random_spec(
    rng: np.random.Generator,
    osn: bool | None = None,
    groups: int = 10_000,
    strata: int = 0,
    bernoulli: bool = False,
) -> DGPSpec:
    """Random valid DGP: joint types, a full outcome grid and an exchangeable design.

    Complier share is kept within [0.15, 0.85]; non-OSN draws keep at least 5%
    always-takers plus social compliers; design cells carry at least 10% mass,
    and about a quarter of designs leave the both-assigned cell empty.
    """
    osn = bool(rng.random() < 0.5) if osn is None else osn

    def one(label=None, weight=1.0) -> Stratum:
        active = [C, GC, NT] if osn else list(TYPES)
        while True:
            p = _random_joint(rng, active)
            m = p.sum(1)
            if 0.15 <= m[C] <= 0.85 and (osn or m[AT] + m[SC] >= 0.05):
                break
        if bernoulli:
            grid = rng.uniform(0.1, 0.9, size=(5, 5, 2, 2))
            out = OutcomeModel(grid, "bernoulli", 1.0, float(rng.uniform(-0.5, 0.5)))
        else:
            grid = rng.normal(size=(5, 5, 2, 2))
            out = OutcomeModel(grid, "gaussian", float(rng.uniform(0.5, 2.0)), float(rng.uniform(-0.5, 0.5)))
        while True:
            if rng.random() < 0.25:
                p00 = rng.uniform(0.1, 0.8)
                p10 = (1 - p00) / 2
                cells = (p00, p10, p10, 0.0)
            else:
                w = rng.dirichlet(np.ones(3))
                p00, p1, p11 = w
                cells = (p00, p1 / 2, p1 / 2, p11)
            if all(c >= 0.1 for c in cells if c > 0):
                break
        design = AssignmentDesign.from_cells(*cells)
        return Stratum(label, weight, JointTypeDistribution(p), out, design)

    seed = int(rng.integers(0, 2**63))
    if strata:
        w = rng.dirichlet(np.full(strata, 4.0))
        w = w / w.sum()
        comps = tuple(one(chr(ord("a") + k), float(w[k])) for k in range(strata))
        return DGPSpec(groups=groups, seed=seed, strata=comps)
    s = one()
    return DGPSpec(s.types, s.outcomes, s.design, groups, seed)


# ---------------------------------------------------------------------------
# Simulation


def _key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)


def _simulate_block(spec: DGPSpec, block: int, n: int, key: np.ndarray):
    """Draw households ``block*BLOCK_SIZE .. +n`` from their own counter-keyed stream."""
    bitgen = np.random.Philox(key=key, counter=np.array([0, 0, block, 0], dtype=np.uint64))
    rng = np.random.Generator(bitgen)
    U = rng.random((n, 3))
    N = rng.standard_normal((n, 2))
    comps = spec.components()
    cw = np.cumsum([s.weight for s in comps])
    sidx = np.minimum(np.searchsorted(cw, U[:, 0] * cw[-1], side="right"), len(comps) - 1)
    D = treatment_table()
    y = np.empty((n, 2))
    d = np.empty((n, 2), dtype=np.int8)
    z = np.empty((n, 2), dtype=np.int8)
    for k, s in enumerate(comps):
        rows = np.flatnonzero(sidx == k)
        if len(rows) == 0:
            continue
        cp = np.cumsum(s.types.p.ravel())
        t = np.minimum(np.searchsorted(cp, U[rows, 1] * cp[-1], side="right"), 24)
        a, b = t // 5, t % 5
        cz = np.cumsum(s.design.pi.ravel())
        zi = np.minimum(np.searchsorted(cz, U[rows, 2] * cz[-1], side="right"), 3)
        z1, z2 = zi // 2, zi % 2
        d1 = D[a, z1, z2]
        d2 = D[b, z2, z1]
        om = s.outcomes
        m1 = om.effective_mean[a, b, d1, d2]
        m2 = om.effective_mean[b, a, d2, d1]
        e1 = N[rows, 0]
        e2 = om.rho * N[rows, 0] + math.sqrt(max(1.0 - om.rho**2, 0.0)) * N[rows, 1]
        if om.family == "bernoulli":
            y[rows, 0] = (ndtr(e1) < m1).astype(float)
            y[rows, 1] = (ndtr(e2) < m2).astype(float)
        else:
            y[rows, 0] = m1 + om.scale * e1
            y[rows, 1] = m2 + om.scale * e2
        d[rows] = np.column_stack([d1, d2])
        z[rows] = np.column_stack([z1, z2])
    return y, d, z, sidx


def _block_task(args):
    spec, block, n, key = args
    return _simulate_block(spec, block, n, key)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("PAIRSPILL_WORKERS", "1")))
    except ValueError:
        return 1


def simulate(spec: DGPSpec, workers: int | None = None) -> Dataset:
    """Draw ``spec.groups`` households.

    Households are generated in fixed-size blocks, each from a Philox stream
    keyed by the seed and the block index, and assembled in order; the result
    is identical for every worker count.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    G = int(spec.groups)
    key = _key(spec.seed)
    tasks = [(spec, b, min(BLOCK_SIZE, G - b * BLOCK_SIZE), key) for b in range(-(-G // BLOCK_SIZE))]
    log.debug("simulating %d households in %d blocks, %d workers", G, len(tasks), workers)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_block_task, tasks))
    else:
        parts = [_block_task(t) for t in tasks]
    y = np.concatenate([p[0] for p in parts])
    d = np.concatenate([p[1] for p in parts])
    z = np.concatenate([p[2] for p in parts])
    sidx = np.concatenate([p[3] for p in parts])
    width = max(6, len(str(G)))
    ids = np.array([f"g{k:0{width}d}" for k in range(1, G + 1)], dtype=object)
    x = None
    if spec.stratified:
        labels = np.array([str(s.label) for s in spec.components()], dtype=object)
        x = labels[sidx]
    return Dataset(ids, y, d, z, x)


# ---------------------------------------------------------------------------
# Monte Carlo calibration


@dataclass
class Calibration:
    name: str
    truth: float | None
    n_reps: int
    bias: float | None = None
    mc_sd: float | None = None
    mean_se: float | None = None
    coverage: float | None = None
    omitted: dict[str, int] = field(default_factory=dict)

    @property
    def se_sd_ratio(self) -> float | None:
        if self.mean_se is None or not self.mc_sd:
            return None
        return self.mean_se / self.mc_sd

    def to_dict(self) -> dict:
        r = lambda v: None if v is None else float(f"{v:.15g}")  # noqa: E731
        return {
            "truth": r(self.truth),
            "bias": r(self.bias),
            "mc_sd": r(self.mc_sd),
            "mean_se": r(self.mean_se),
            "coverage": r(self.coverage),
            "se_sd_ratio": r(self.se_sd_ratio),
            "n_reps": self.n_reps,
            "omitted": dict(self.omitted),
        }


@dataclass
class CalibrationReport:
    estimands: dict[str, Calibration]
    replications: int
    n_groups: int
    level: float
    seed: int

    def __getitem__(self, name: str) -> Calibration:
        return self.estimands[name]

    def to_dict(self) -> dict:
        return {
            "replications": self.replications,
            "n_groups": self.n_groups,
            "ci_level": self.level,
            "seed": self.seed,
            "estimands": {k: v.to_dict() for k, v in self.estimands.items()},
        }


def replication_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(rep)]).generate_state(1, np.uint64)[0])


def _replicate(args):
    spec, rep, names, level = args
    ds = simulate(spec.with_groups(spec.groups, replication_seed(spec.seed, rep)), workers=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = estimate(ds, names, level=level)
    vals = {r.name: (r.value, r.std_error) for r in report.rows}
    return vals, {k: v["condition"] for k, v in report.omitted.items()}


def mc_study(
    spec: DGPSpec,
    estimands: Sequence[str] | None = None,
    replications: int = 200,
    workers: int | None = None,
    level: float = 0.95,
) -> CalibrationReport:
    """Bias, Monte Carlo SD, mean SE and CI coverage of each estimand against truth.

    Replication ``r`` uses a seed derived from ``(spec.seed, r)``; results are
    collected in replication order, so they do not depend on ``workers``.
    """
    if replications < 2:
        raise ValueError("need at least two replications")
    workers = default_workers() if workers is None else max(1, int(workers))
    tr = truth(spec)
    names = list(estimands) if estimands is not None else None
    tasks = [(spec, r, names, level) for r in range(replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, replications // (4 * workers))))
    else:
        results = [_replicate(t) for t in tasks]
    q = critical_value(level)
    all_names = names or sorted({n for v, o in results for n in list(v) + list(o)})
    out: dict[str, Calibration] = {}
    for n in all_names:
        t = tr.get(n)
        cal = Calibration(n, t, 0)
        vals, ses = [], []
        for v, o in results:
            if n in v:
                vals.append(v[n][0])
                ses.append(v[n][1])
            elif n in o:
                cal.omitted[o[n]] = cal.omitted.get(o[n], 0) + 1
        cal.n_reps = len(vals)
        if vals:
            arr, se = np.array(vals), np.array(ses)
            cal.mc_sd = float(arr.std(ddof=1)) if len(arr) > 1 else None
            cal.mean_se = float(se.mean())
            if t is not None:
                cal.bias = float(arr.mean() - t)
                cal.coverage = float(np.mean(np.abs(arr - t) <= q * se))
        out[n] = cal
    return CalibrationReport(out, replications, spec.groups, level, spec.seed)
