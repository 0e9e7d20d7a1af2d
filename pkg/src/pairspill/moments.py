"""Stacked cell moments, their cluster covariance, and delta-method inference.

Each household contributes one vector ``W_g``: the unit-averaged assignment-cell
indicators followed by ``H(Y, D_own, D_peer)`` interacted with the unit's cell,
again averaged over the two units. Household-level clustering is therefore
built in: the covariance is simply the dispersion of ``W_g`` across households.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable

import numpy as np

from .errors import DegenerateDenominator, EmptyCell, UnsupportedStatistic
from .model import CELLS, PROB_TOL, cell_index, statistic

DENOMINATOR_GUARD = 1e-8
H_SPECS = ("full-8", "itt-only", "osn-4")


def _d_indicator(k: int) -> np.ndarray:
    d, dp = CELLS[k]
    t = np.zeros((2, 2))
    t[d, dp] = 1.0
    return t


def _h_components(h_spec: str) -> tuple[tuple[str, np.ndarray, np.ndarray], ...]:
    z = np.zeros((2, 2))
    if h_spec == "full-8":
        comps = [(f"1(D=({d},{dp}))", _d_indicator(k), z) for k, (d, dp) in enumerate(CELLS)]
        comps += [(f"Y*1(D=({d},{dp}))", z, _d_indicator(k)) for k, (d, dp) in enumerate(CELLS)]
        return tuple(comps)
    if h_spec == "itt-only":
        return (("Y", z, np.ones((2, 2))),)
    if h_spec == "osn-4":
        return tuple((name, *statistic(name)) for name in ("D_i", "Y", "Y*(1-D_i)", "Y*(1-D_j)"))
    raise ValueError(f"unknown H specification {h_spec!r}; choose from {H_SPECS}")


@dataclass(frozen=True)
class MomentLayout:
    """Index map of a moment vector.

    ``cells`` lists the assignment cells (as indices into CELLS) that carry an
    H block; the four cell probabilities are always present. ``strata`` holds
    one label per block, ``(None,)`` when unstratified.
    """

    h_spec: str = "full-8"
    cells: tuple[int, ...] = (0, 1, 2, 3)
    strata: tuple = (None,)

    @property
    def components(self):
        return _h_components(self.h_spec)

    @property
    def block_size(self) -> int:
        return 4 + len(self.components) * len(self.cells)

    @property
    def size(self) -> int:
        return self.block_size * len(self.strata)

    def prob_index(self, cell: int, block: int = 0) -> int:
        return block * self.block_size + cell

    def h_index(self, comp: int, cell: int, block: int = 0) -> int:
        return block * self.block_size + 4 + comp * len(self.cells) + self.cells.index(cell)

    @property
    def names(self) -> list[str]:
        out = []
        for lab in self.strata:
            suffix = "" if lab is None else f"|x={lab}"
            out += [f"P[Z=({z},{zp})]{suffix}" for z, zp in CELLS]
            for name, _, _ in self.components:
                for c in self.cells:
                    z, zp = CELLS[c]
                    out.append(f"E[{name}*1(Z=({z},{zp}))]{suffix}")
        return out

    def block_of(self, label) -> int:
        try:
            return self.strata.index(label)
        except ValueError:
            raise KeyError(f"no stratum {label!r} in moment layout") from None


_POOLED = object()
POOLED = _POOLED


@functools.lru_cache(maxsize=4096)
def _block_weights(layout: MomentLayout, stat: str, cell: int) -> tuple[np.ndarray, ...] | None:
    """Coefficients expressing E[stat * 1(cell)] within one block, or None."""
    a, b = statistic(stat)
    target = np.concatenate([a.ravel(), b.ravel()])
    w = np.zeros(layout.block_size)
    if not np.any(target[4:]) and np.allclose(a, 1.0):
        w[cell] = 1.0
        return w
    if cell in layout.cells:
        basis = np.column_stack(
            [np.concatenate([ca.ravel(), cb.ravel()]) for _, ca, cb in layout.components]
        )
        coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
        if np.max(np.abs(basis @ coef - target)) < 1e-12:
            for k, v in enumerate(coef):
                if abs(v) > 1e-14:
                    w[layout.h_index(k, cell)] = round(v, 12)
            return w
    if not np.any(target[4:]):
        # A pure treatment statistic of unit i in cell (z,z') equals the transposed
        # statistic in cell (z',z): W_g averages both unit perspectives.
        z, zp = CELLS[cell]
        swapped = cell_index(zp, z)
        if swapped != cell and swapped in layout.cells:
            basis = np.column_stack(
                [np.concatenate([ca.ravel(), cb.ravel()]) for _, ca, cb in layout.components]
            )
            t2 = np.concatenate([a.T.ravel(), b.ravel()])
            coef, *_ = np.linalg.lstsq(basis, t2, rcond=None)
            if np.max(np.abs(basis @ coef - t2)) < 1e-12:
                for k, v in enumerate(coef):
                    if abs(v) > 1e-14:
                        w[layout.h_index(k, swapped)] = round(v, 12)
                return w
    return None


@functools.lru_cache(maxsize=4096)
def stat_weights(layout: MomentLayout, stat: str, cell: int, block=_POOLED) -> np.ndarray:
    """Weight vector ``w`` with ``w @ mu = E[stat * 1(Z_i, Z_j in cell)]``."""
    wb = _block_weights(layout, stat, cell)
    if wb is None:
        raise UnsupportedStatistic(
            f"statistic {stat!r} in cell {CELLS[cell]} not expressible with H={layout.h_spec}"
        )
    w = np.zeros(layout.size)
    blocks = range(len(layout.strata)) if block is _POOLED else [block]
    for s in blocks:
        w[s * layout.block_size:(s + 1) * layout.block_size] = wb
    w.setflags(write=False)
    return w


@dataclass(frozen=True, eq=False)
class MomentVector:
    mu_hat: np.ndarray
    layout: MomentLayout
    n_groups: int

    def __post_init__(self):
        mu = np.array(self.mu_hat, dtype=float, copy=True)
        mu.setflags(write=False)
        object.__setattr__(self, "mu_hat", mu)
        if mu.shape != (self.layout.size,):
            raise ValueError("moment vector does not match its layout")

    @property
    def names(self) -> list[str]:
        return self.layout.names

    def cell_probs(self, label=_POOLED) -> np.ndarray:
        blocks = range(len(self.layout.strata)) if label is _POOLED else [self.layout.block_of(label)]
        out = np.zeros(4)
        for s in blocks:
            out += self.mu_hat[s * self.layout.block_size: s * self.layout.block_size + 4]
        return out

    def access(self, label=_POOLED) -> "CellMeans":
        block = _POOLED if label is _POOLED else self.layout.block_of(label)
        return CellMeans(self.layout, self.mu_hat, block)


@dataclass(frozen=True, eq=False)
class MomentCovariance:
    sigma_hat: np.ndarray
    small_sample: bool = False

    def __post_init__(self):
        s = np.array(self.sigma_hat, dtype=float, copy=True)
        s.setflags(write=False)
        object.__setattr__(self, "sigma_hat", s)


def ratio(num: float, den: float, name: str) -> float:
    if not abs(den) >= DENOMINATOR_GUARD:
        raise DegenerateDenominator(name, den)
    return num / den


class CellMeans:
    """Cell-level moments read off a (possibly perturbed) moment vector."""

    __slots__ = ("layout", "mu", "block")

    def __init__(self, layout: MomentLayout, mu: np.ndarray, block=_POOLED):
        self.layout = layout
        self.mu = mu
        self.block = block

    def sub(self, block) -> "CellMeans":
        return CellMeans(self.layout, self.mu, block)

    def prob(self, cell: tuple[int, int]) -> float:
        return float(stat_weights(self.layout, "1", cell_index(*cell), self.block) @ self.mu)

    def joint(self, stat: str, cell: tuple[int, int]) -> float:
        return float(stat_weights(self.layout, stat, cell_index(*cell), self.block) @ self.mu)

    def mean(self, stat: str, cell: tuple[int, int]) -> float:
        p = self.prob(cell)
        if p == 0.0:
            raise EmptyCell(*cell)
        return self.joint(stat, cell) / p

    def total_prob(self) -> float:
        return sum(self.prob(c) for c in CELLS)


def _unit_h(comps, y, d_own, d_peer) -> np.ndarray:
    out = np.empty((len(y), len(comps)))
    for k, (_, a, b) in enumerate(comps):
        out[:, k] = a[d_own, d_peer] + y * b[d_own, d_peer]
    return out


def compute_moments(
    ds,
    h_spec: str = "full-8",
    by_stratum: bool = False,
    small_sample: bool = False,
) -> tuple[MomentVector, MomentCovariance]:
    """Moment vector and covariance for a Dataset.

    ``h_spec`` selects the H block: ``full-8`` (treatment-cell indicators and
    outcome times those indicators), ``itt-only`` (outcome alone) or ``osn-4``
    (D_own, Y, Y(1-D_own), Y(1-D_peer) over cells (0,0), (1,0), (0,1)).
    With ``by_stratum`` the vector repeats per covariate label, each block
    multiplied by the household's stratum indicator.

    Covariance uses 1/G unless ``small_sample`` requests 1/(G-1).
    """
    layout_cells = (0, 1, 2) if h_spec == "osn-4" else (0, 1, 2, 3)
    if by_stratum:
        if ds.x is None:
            raise ValueError("dataset has no covariate column x")
        strata = tuple(ds.strata)
        block_of = {lab: k for k, lab in enumerate(strata)}
        gblock = np.array([block_of[v] for v in ds.x], dtype=int)
    else:
        strata = (None,)
        gblock = np.zeros(ds.n_groups, dtype=int)
    layout = MomentLayout(h_spec, layout_cells, strata)
    comps = layout.components
    G = ds.n_groups
    B = layout.block_size
    nc = len(layout.cells)
    pos = np.full(4, -1)
    pos[list(layout.cells)] = np.arange(nc)

    z = ds.z.astype(int)
    d = ds.d.astype(int)
    W = np.zeros((G, layout.size))
    rows = np.arange(G)
    base = gblock * B
    for own, peer in ((0, 1), (1, 0)):
        c = z[:, own] + 2 * z[:, peer]
        np.add.at(W, (rows, base + c), 0.5)
        h = _unit_h(comps, ds.y[:, own], d[:, own], d[:, peer])
        keep = pos[c] >= 0
        for k in range(len(comps)):
            cols = base + 4 + k * nc + pos[c]
            np.add.at(W, (rows[keep], cols[keep]), 0.5 * h[keep, k])
    mu = W.mean(axis=0)
    dev = W - mu
    sigma = dev.T @ dev / (G - 1 if small_sample and G > 1 else G)
    sigma = (sigma + sigma.T) / 2
    return MomentVector(mu, layout, G), MomentCovariance(sigma, small_sample)


# ---------------------------------------------------------------------------
# Delta method and reports


def critical_value(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError("confidence level must lie in (0, 1)")
    return NormalDist().inv_cdf(0.5 + level / 2)


@dataclass(frozen=True)
class EstimateRow:
    name: str
    value: float
    std_error: float
    ci_low: float
    ci_high: float
    formula: str = ""
    n_groups: int = 0

    @classmethod
    def build(cls, name, value, se, formula="", n_groups=0, level=0.95) -> "EstimateRow":
        q = critical_value(level)
        se = float(max(se, 0.0))
        return cls(name, float(value), se, float(value - q * se), float(value + q * se), formula, int(n_groups))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": _sig(self.value),
            "se": _sig(self.std_error),
            "ci": [_sig(self.ci_low), _sig(self.ci_high)],
            "formula": self.formula,
        }


def gradient(f: Callable[[np.ndarray], float], mu: np.ndarray) -> np.ndarray:
    """Central-difference gradient, step ``1e-6 * max(1, |mu_k|)`` per coordinate."""
    mu = np.asarray(mu, dtype=float)
    g = np.zeros_like(mu)
    x = mu.copy()
    for k in range(len(mu)):
        h = 1e-6 * max(1.0, abs(mu[k]))
        up, dn = mu[k] + h, mu[k] - h
        x[k] = up
        fu = f(x)
        x[k] = dn
        fd = f(x)
        x[k] = mu[k]
        g[k] = (fu - fd) / (up - dn)
    return g


def delta_method(
    mu: MomentVector,
    sigma: MomentCovariance,
    f: Callable[[CellMeans], float],
    name: str = "",
    formula: str = "",
    level: float = 0.95,
) -> EstimateRow:
    """Plug-in value and delta-method standard error of ``f`` at the moments.

    ``f`` receives a CellMeans view of the (perturbed) moment vector.
    Variance is ``grad' (Sigma / G) grad``.
    """
    layout = mu.layout

    def fv(v: np.ndarray) -> float:
        return f(CellMeans(layout, v))

    value = fv(mu.mu_hat)
    g = gradient(fv, mu.mu_hat)
    var = float(g @ sigma.sigma_hat @ g) / mu.n_groups
    return EstimateRow.build(name, value, math.sqrt(max(var, 0.0)), formula, mu.n_groups, level)


def _sig(v: float):
    if v is None or not math.isfinite(v):
        return None
    return float(f"{v:.15g}")


@dataclass
class EstimateReport:
    """Named estimates plus omitted estimands with their reasons."""

    rows: list[EstimateRow] = field(default_factory=list)
    omitted: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    n_groups: int = 0
    level: float = 0.95

    def __getitem__(self, name: str) -> EstimateRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(r.name == name for r in self.rows)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def add(self, row: EstimateRow) -> None:
        if row.name not in self:
            self.rows.append(row)
            self.omitted.pop(row.name, None)

    def omit(self, name: str, exc: Exception) -> None:
        if name not in self and name not in self.omitted:
            self.omitted[name] = {
                "condition": getattr(exc, "condition", type(exc).__name__),
                "message": str(exc),
            }

    def extend(self, other: "EstimateReport") -> None:
        for r in other.rows:
            self.add(r)
        for k, v in other.omitted.items():
            if k not in self and k not in self.omitted:
                self.omitted[k] = v
        self.metadata.update(other.metadata)

    def to_dict(self) -> dict:
        return {
            "n_groups": self.n_groups,
            "ci_level": self.level,
            "estimates": [r.to_dict() for r in self.rows],
            "omitted": [{"name": k, **v} for k, v in self.omitted.items()],
            "metadata": _clean(self.metadata),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=False) + "\n"

    def to_table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [8])
        pct = f"{100 * self.level:g}% CI"
        lines = [f"{'estimand':<{width}}  {'value':>12}  {'se':>11}  {pct:>27}", "-" * (width + 58)]
        for r in self.rows:
            lines.append(
                f"{r.name:<{width}}  {r.value:>12.6f}  {r.std_error:>11.6f}  "
                f"[{r.ci_low:>11.6f}, {r.ci_high:>11.6f}]"
            )
        if self.omitted:
            lines.append("")
            lines.append("omitted:")
            for k, v in self.omitted.items():
                lines.append(f"  {k:<{width}}  {v['condition']}: {v['message']}")
        lines.append(f"households: {self.n_groups}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimateReport":
        rows = [
            EstimateRow(e["name"], e["value"], e["se"], e["ci"][0], e["ci"][1], e.get("formula", ""), doc.get("n_groups", 0))
            for e in doc["estimates"]
        ]
        omitted = {o["name"]: {"condition": o["condition"], "message": o["message"]} for o in doc.get("omitted", [])}
        return cls(rows, omitted, doc.get("metadata", {}), doc.get("n_groups", 0), doc.get("ci_level", 0.95))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _sig(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def check_moment_invariants(mu: MomentVector, sigma: MomentCovariance) -> None:
    """Raise AssertionError if the probability block or covariance is malformed."""
    p = mu.cell_probs()
    assert np.all(p >= -PROB_TOL) and np.all(p <= 1 + PROB_TOL)
    assert abs(p.sum() - 1.0) <= PROB_TOL
    s = sigma.sigma_hat
    assert np.max(np.abs(s - s.T)) <= 1e-12
    assert np.linalg.eigvalsh(s).min() >= -1e-10
