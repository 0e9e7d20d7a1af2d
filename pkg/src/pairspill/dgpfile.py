"""Declarative DGP files (YAML or JSON) to and from :class:`DGPSpec`.

Layout::

    groups: 10000
    seed: 42
    joint_types:
      independent: [0.1, 0.2, 0.4, 0.2, 0.1]   # or  table: 5x5 rows, AT..NT
    outcome_mean:
      default: 0.0
      linear: {intercept: 0.3, own: 0.1, peer: 0.05, interaction: 0.0}
      own_type_effect: {C: 0.17}               # added to every cell of that own type
      peer_type_effect: {C: 0.19}
      cells:                                   # applied last, in order
        - {own: C, peer: any, d: 1, d_peer: 0, value: 0.55}
        - {own: any, peer: C, d: 0, d_peer: 1, add: 0.10}
    noise: {family: gaussian, scale: 1.0, rho: 0.0}
    design: {p00: 0.25, p10: 0.25, p01: 0.25, p11: 0.25}
    strata:                                    # optional; each entry overrides the base
      - {label: a, weight: 0.5, overrides: {design: {...}}}

Unspecified outcome cells default to ``default`` (0 if absent). Outcome
additions are applied in the order linear, own_type_effect,
peer_type_effect, then cells set (``value``) or shift (``add``) entries.
"""

from __future__ import annotations

import copy
import json
import os
from importlib import resources
from typing import Any, Mapping

import numpy as np
import yaml

from .errors import SpecError
from .model import (
    TYPES,
    AssignmentDesign,
    ComplianceType,
    DGPSpec,
    JointTypeDistribution,
    OutcomeModel,
    Stratum,
    as_type_set,
)

BUNDLED = ("uniform_types", "application_like", "osn_example", "two_strata")


def _types(doc: Mapping) -> JointTypeDistribution:
    if not isinstance(doc, Mapping):
        raise SpecError("joint_types must be a mapping with 'table' or 'independent'")
    if "table" in doc:
        return JointTypeDistribution(np.array(doc["table"], dtype=float))
    if "independent" in doc:
        m = doc["independent"]
        if isinstance(m, Mapping):
            m = [float(m.get(t.name, 0.0)) for t in TYPES]
        return JointTypeDistribution.independent(m)
    if "uniform" in doc and doc["uniform"]:
        return JointTypeDistribution.uniform()
    raise SpecError("joint_types needs 'table', 'independent' or 'uniform: true'")


def _type_map(doc) -> np.ndarray:
    out = np.zeros(5)
    for k, v in (doc or {}).items():
        out[ComplianceType.parse(k)] = float(v)
    return out


def _bits(value) -> list[int]:
    if value is None or value == "any":
        return [0, 1]
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(value)]


def _outcomes(doc: Mapping | None, noise: Mapping | None) -> OutcomeModel:
    doc = dict(doc or {})
    noise = dict(noise or {})
    mean = np.full((5, 5, 2, 2), float(doc.get("default", 0.0)))
    if "linear" in doc:
        lin = doc["linear"]
        d = np.array([0.0, 1.0])
        mean = mean + (
            float(lin.get("intercept", 0.0))
            + float(lin.get("own", 0.0)) * d[:, None]
            + float(lin.get("peer", 0.0)) * d[None, :]
            + float(lin.get("interaction", 0.0)) * np.outer(d, d)
        )
    mean = mean + _type_map(doc.get("own_type_effect"))[:, None, None, None]
    mean = mean + _type_map(doc.get("peer_type_effect"))[None, :, None, None]
    for cell in doc.get("cells", []) or []:
        if ("value" in cell) == ("add" in cell):
            raise SpecError(f"outcome cell entry {cell!r} needs exactly one of 'value' or 'add'")
        own = as_type_set(cell.get("own", "any"))
        peer = as_type_set(cell.get("peer", "any"))
        for a in own:
            for b in peer:
                for d in _bits(cell.get("d", "any")):
                    for dp in _bits(cell.get("d_peer", "any")):
                        if "add" in cell:
                            mean[a, b, d, dp] += float(cell["add"])
                        else:
                            mean[a, b, d, dp] = float(cell["value"])
    if "grid" in doc:
        mean = np.array(doc["grid"], dtype=float)
    try:
        return OutcomeModel(
            mean,
            family=str(noise.get("family", "gaussian")),
            scale=float(noise.get("scale", 1.0)),
            rho=float(noise.get("rho", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise SpecError(str(exc)) from exc


def _design(doc: Mapping | None) -> AssignmentDesign:
    if not isinstance(doc, Mapping):
        raise SpecError("design must map p00, p10, p01, p11 to probabilities")
    try:
        cells = [float(doc[k]) for k in ("p00", "p10", "p01", "p11")]
    except KeyError as exc:
        raise SpecError(f"design is missing {exc.args[0]}") from None
    return AssignmentDesign.from_cells(*cells, exchangeable=bool(doc.get("exchangeable", True)))


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        out[k] = copy.deepcopy(v)
    return out


def spec_from_dict(doc: Mapping) -> DGPSpec:
    """Build a DGPSpec from a parsed DGP document."""
    if not isinstance(doc, Mapping):
        raise SpecError("DGP document must be a mapping")
    groups = int(doc.get("groups", 1000))
    seed = int(doc.get("seed", 0))
    if "strata" in doc and doc["strata"]:
        strata = []
        for entry in doc["strata"]:
            merged = _merge(dict(doc), entry.get("overrides", {}))
            if "label" not in entry:
                raise SpecError("every stratum needs a label")
            strata.append(
                Stratum(
                    str(entry["label"]),
                    float(entry.get("weight", 0.0)),
                    _types(merged.get("joint_types")),
                    _outcomes(merged.get("outcome_mean"), merged.get("noise")),
                    _design(merged.get("design")),
                )
            )
        return DGPSpec(groups=groups, seed=seed, strata=tuple(strata))
    for key in ("joint_types", "design"):
        if key not in doc:
            raise SpecError(f"DGP document is missing '{key}'")
    return DGPSpec(
        _types(doc["joint_types"]),
        _outcomes(doc.get("outcome_mean"), doc.get("noise")),
        _design(doc["design"]),
        groups,
        seed,
    )


def _stratum_dict(s: Stratum) -> dict:
    return {
        "joint_types": {"table": s.types.p.tolist()},
        "outcome_mean": {"grid": s.outcomes.mean.tolist()},
        "noise": {"family": s.outcomes.family, "scale": s.outcomes.scale, "rho": s.outcomes.rho},
        "design": {
            "p00": s.design.cell_prob(0, 0),
            "p10": s.design.cell_prob(1, 0),
            "p01": s.design.cell_prob(0, 1),
            "p11": s.design.cell_prob(1, 1),
            "exchangeable": s.design.exchangeable,
        },
    }


def spec_to_dict(spec: DGPSpec) -> dict:
    """Fully explicit document (tables and grids) that round-trips through spec_from_dict."""
    doc: dict[str, Any] = {"groups": int(spec.groups), "seed": int(spec.seed)}
    if spec.stratified:
        base = _stratum_dict(spec.strata[0])
        doc.update(base)
        doc["strata"] = [
            {"label": s.label, "weight": s.weight, "overrides": _stratum_dict(s)} for s in spec.strata
        ]
    else:
        doc.update(_stratum_dict(spec.components()[0]))
    return doc


def loads_spec(text: str) -> DGPSpec:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"cannot parse DGP document: {exc}") from exc
    return spec_from_dict(doc)


def load_spec(path) -> DGPSpec:
    """Read a DGP file, or a bundled fixture by name (e.g. ``application_like``)."""
    p = os.fspath(path)
    if not os.path.exists(p) and p in BUNDLED:
        return loads_spec(bundled_text(p))
    with open(p, encoding="utf-8") as fh:
        return loads_spec(fh.read())


def bundled_text(name: str) -> str:
    return resources.files("pairspill.data").joinpath(f"{name}.yaml").read_text(encoding="utf-8")


def bundled_spec(name: str) -> DGPSpec:
    return loads_spec(bundled_text(name))


def dump_spec(spec: DGPSpec, fmt: str = "yaml") -> str:
    doc = spec_to_dict(spec)
    if fmt == "json":
        return json.dumps(doc, indent=2) + "\n"
    return yaml.safe_dump(doc, sort_keys=False)
