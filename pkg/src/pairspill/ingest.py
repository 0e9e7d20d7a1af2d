"""Reading household experiment data and design diagnostics."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import pandas as pd

from .errors import (
    EmptyCell,
    GroupSizeNot2,
    InconsistentCovariate,
    MissingColumn,
    NonBinaryValue,
    NonFiniteOutcome,
)
from .model import CELLS

REQUIRED_COLUMNS = ("household", "unit", "z", "d", "y")


@dataclass(frozen=True)
class HouseholdRecord:
    group_id: str
    y: tuple[float, float]
    d: tuple[int, int]
    z: tuple[int, int]
    x: str | None = None


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Paired-unit observations, stored column-wise.

    ``y``, ``d`` and ``z`` have shape ``(G, 2)``; column 0 is the first unit of
    each household in (household, unit) order. ``x`` is a per-household label
    array, or None when no covariate was supplied.
    """

    group_ids: np.ndarray
    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray | None = None

    def __post_init__(self):
        g = np.asarray(self.group_ids, dtype=object)
        y = np.asarray(self.y, dtype=float)
        d = np.asarray(self.d, dtype=np.int8)
        z = np.asarray(self.z, dtype=np.int8)
        if g.ndim != 1 or len(g) < 1:
            raise ValueError("dataset needs at least one household")
        for name, arr in (("y", y), ("d", d), ("z", z)):
            if arr.shape != (len(g), 2):
                raise ValueError(f"{name} must have shape (G, 2)")
        x = None if self.x is None else _readonly(np.asarray(self.x, dtype=object).copy())
        object.__setattr__(self, "group_ids", _readonly(g.copy()))
        object.__setattr__(self, "y", _readonly(y.copy()))
        object.__setattr__(self, "d", _readonly(d.copy()))
        object.__setattr__(self, "z", _readonly(z.copy()))
        object.__setattr__(self, "x", x)

    @property
    def n_groups(self) -> int:
        return len(self.group_ids)

    def __len__(self) -> int:
        return self.n_groups

    def __iter__(self) -> Iterator[HouseholdRecord]:
        return iter(self.records)

    @property
    def records(self) -> tuple[HouseholdRecord, ...]:
        xs = self.x if self.x is not None else [None] * self.n_groups
        return tuple(
            HouseholdRecord(
                str(gid),
                (float(y[0]), float(y[1])),
                (int(d[0]), int(d[1])),
                (int(z[0]), int(z[1])),
                None if xv is None else str(xv),
            )
            for gid, y, d, z, xv in zip(self.group_ids, self.y, self.d, self.z, xs)
        )

    @property
    def strata(self) -> tuple[str, ...]:
        if self.x is None:
            return ()
        return tuple(sorted(set(self.x)))

    @property
    def cell_counts(self) -> dict[tuple[int, int], int]:
        """Unit-perspective counts of (own z, peer z'); they sum to 2G."""
        own = np.concatenate([self.z[:, 0], self.z[:, 1]]).astype(int)
        peer = np.concatenate([self.z[:, 1], self.z[:, 0]]).astype(int)
        idx = own + 2 * peer
        counts = np.bincount(idx, minlength=4)
        return {cell: int(counts[k]) for k, cell in enumerate(CELLS)}

    @property
    def group_cell_counts(self) -> dict[tuple[int, int], int]:
        """Household counts by number of assigned units: (0,0), (1,0) for one, (1,1)."""
        n = self.z.sum(axis=1).astype(int)
        return {(0, 0): int(np.sum(n == 0)), (1, 0): int(np.sum(n == 1)), (1, 1): int(np.sum(n == 2))}

    @property
    def osn_hard_count(self) -> int:
        """Number of unit records with d=1 and z=0."""
        return int(np.sum((self.d == 1) & (self.z == 0)))

    def swap_units(self, mask=None) -> "Dataset":
        """Exchange the two units' data within the households selected by ``mask``."""
        m = np.ones(self.n_groups, bool) if mask is None else np.asarray(mask, bool)

        def sw(a):
            out = np.array(a, copy=True)
            out[m] = out[m][:, ::-1]
            return out

        return Dataset(self.group_ids, sw(self.y), sw(self.d), sw(self.z), self.x)

    def take(self, order) -> "Dataset":
        order = np.asarray(order)
        return Dataset(
            self.group_ids[order], self.y[order], self.d[order], self.z[order],
            None if self.x is None else self.x[order],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.x is None) != (other.x is None):
            return False
        return (
            np.array_equal(self.group_ids, other.group_ids)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.d, other.d)
            and np.array_equal(self.z, other.z)
            and (self.x is None or np.array_equal(self.x, other.x))
        )

    __hash__ = None


def _binary(series: pd.Series, column: str) -> np.ndarray:
    vals = pd.to_numeric(series, errors="coerce")
    bad = vals.isna() | ~vals.isin([0, 1])
    if bad.any():
        raise NonBinaryValue(column, series[bad].iloc[0])
    return vals.to_numpy().astype(np.int8)


def load(source) -> Dataset:
    """Read a long-format table (one row per unit) into a validated Dataset.

    ``source`` may be a path, a file-like object, or a DataFrame with columns
    ``household, unit, z, d, y`` and optionally ``x``.
    """
    if isinstance(source, pd.DataFrame):
        df = source.copy()
        for col in ("household", "unit", "x"):
            if col in df.columns:
                df[col] = df[col].astype(str)
    else:
        df = pd.read_csv(
            source,
            dtype={"household": str, "unit": str, "x": str},
            keep_default_na=False,
            float_precision="round_trip",
            encoding="utf-8" if isinstance(source, (str, os.PathLike)) else None,
        )
    df.columns = [str(c).strip() for c in df.columns]
    for col in REQUIRED_COLUMNS:
        if col not in df.columns:
            raise MissingColumn(col)
    has_x = "x" in df.columns

    z = _binary(df["z"], "z")
    d = _binary(df["d"], "d")
    y = pd.to_numeric(df["y"], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(y)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise NonFiniteOutcome(df["household"].iloc[k], df["y"].iloc[k])

    frame = pd.DataFrame(
        {"household": df["household"].to_numpy(), "unit": df["unit"].to_numpy(), "z": z, "d": d, "y": y}
    )
    if has_x:
        frame["x"] = df["x"].to_numpy()
    frame = frame.sort_values(["household", "unit"], kind="mergesort").reset_index(drop=True)

    sizes = frame.groupby("household", sort=True).size()
    wrong = sizes[sizes != 2]
    if len(wrong):
        raise GroupSizeNot2(wrong.index[0], int(wrong.iloc[0]))

    first = frame.iloc[0::2]
    second = frame.iloc[1::2]
    x = None
    if has_x:
        xa, xb = first["x"].to_numpy(), second["x"].to_numpy()
        mismatch = xa != xb
        if mismatch.any():
            gid = first["household"].to_numpy()[mismatch][0]
            raise InconsistentCovariate(gid)
        x = xa
    return Dataset(
        group_ids=first["household"].to_numpy(),
        y=np.column_stack([first["y"].to_numpy(), second["y"].to_numpy()]),
        d=np.column_stack([first["d"].to_numpy(), second["d"].to_numpy()]),
        z=np.column_stack([first["z"].to_numpy(), second["z"].to_numpy()]),
        x=x,
    )


def to_frame(ds: Dataset) -> pd.DataFrame:
    G = ds.n_groups
    frame = pd.DataFrame(
        {
            "household": np.repeat(ds.group_ids.astype(str), 2),
            "unit": np.tile(["1", "2"], G),
            "z": ds.z.reshape(-1).astype(int),
            "d": ds.d.reshape(-1).astype(int),
            "y": ds.y.reshape(-1),
        }
    )
    if ds.x is not None:
        frame["x"] = np.repeat(ds.x.astype(str), 2)
    return frame.sort_values(["household", "unit"], kind="mergesort").reset_index(drop=True)


def write(ds: Dataset, target=None) -> str | None:
    """Write ``ds`` in the canonical CSV layout; returns the text if no target given."""
    text = to_frame(ds).to_csv(index=False, lineterminator="\n")
    if target is None:
        return text
    if isinstance(target, (str, os.PathLike)):
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        target.write(text)
    return None


def loads(text: str) -> Dataset:
    return load(io.StringIO(text))


@dataclass(frozen=True)
class OSNDiagnostic:
    p_at: "object"  # EstimateRow
    p_sc: "object"
    hard_count: int

    @property
    def verdict(self) -> str:
        return "consistent" if self.hard_count == 0 else "violated"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "hard_count": self.hard_count,
            "p_at": self.p_at.to_dict(),
            "p_sc": self.p_sc.to_dict(),
        }


def check_osn(ds: Dataset, level: float = 0.95) -> OSNDiagnostic:
    """Estimate P[AT] and P[SC] and count records with d=1 and z=0.

    The verdict is ``consistent`` iff that count is zero.
    """
    from .estimators import type_share_rows
    from .moments import compute_moments

    counts = ds.cell_counts
    for cell in ((0, 0), (0, 1)):
        if counts[cell] == 0:
            raise EmptyCell(*cell)
    mv, cov = compute_moments(ds)
    rows = type_share_rows(mv, cov, ("p_at", "p_sc"), level=level)
    return OSNDiagnostic(rows["p_at"], rows["p_sc"], ds.osn_hard_count)
