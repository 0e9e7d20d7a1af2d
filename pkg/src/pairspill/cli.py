"""Command-line entry point: ``pairspill {estimate,simulate,verify,mc-study,describe}``.

Exit codes: 0 success, 1 validation error, 2 identity or calibration failure,
3 I/O error. Errors are printed as ``error: <Condition>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dgpfile import load_spec
from .errors import ConfigConflictWarning, EstimationError, PairSpillError, SpecError, ValidationError
from .estimators import estimate
from .ingest import check_osn, load, write
from .oracle import default_workers, mc_study, random_spec, simulate, truth, verify_identities

log = logging.getLogger("pairspill")

EXIT_OK, EXIT_VALIDATION, EXIT_FAILED, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("estimate", "simulate", "verify", "mc-study", "describe")


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    output: str | None = None
    spec: str | None = None
    seed: int | None = None
    groups: int | None = None
    reps: int = 200
    workers: int = 1
    ci_level: float = 0.95
    clamp_shares: bool = False
    design_probs: str | None = None
    estimands: list[str] | None = None
    g_spec: str = "y"
    small_sample: bool = False
    random_specs: int = 0
    config: str | None = None
    explicit: set[str] = field(default_factory=set)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are validation errors, not exit 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"error: UsageError: {message}\n")


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pairspill", description="IV estimation of direct and spillover effects in paired units.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML file of option values; file values win over flags")
        sp.add_argument("--output", "-o", help="output path")
        sp.add_argument("--ci-level", type=float, default=0.95)

    e = sub.add_parser("estimate", help="estimate every identified quantity from a data table")
    common(e)
    e.add_argument("--input", "-i", help="CSV with household,unit,z,d,y[,x]")
    e.add_argument("--estimands", type=_csv_list, help="comma-separated subset of estimand names")
    e.add_argument("--clamp-shares", action="store_true", help="floor negative type shares at zero")
    e.add_argument("--design-probs", help="YAML/JSON mapping stratum label to p00,p10,p01,p11")
    e.add_argument("--g-spec", default="y", choices=("y", "x", "yx", "all"))
    e.add_argument("--small-sample", action="store_true", help="use 1/(G-1) in the moment covariance")

    s = sub.add_parser("simulate", help="draw a dataset from a DGP file and write its truth manifest")
    common(s)
    s.add_argument("--spec", help="DGP file or bundled fixture name")
    s.add_argument("--seed", type=int)
    s.add_argument("--groups", type=int)
    s.add_argument("--workers", type=int)

    v = sub.add_parser("verify", help="check the population identities for a DGP")
    common(v)
    v.add_argument("--spec")
    v.add_argument("--random-specs", type=int, default=0, help="also check N randomly drawn DGPs")
    v.add_argument("--seed", type=int)

    m = sub.add_parser("mc-study", help="Monte Carlo calibration of estimates against truth")
    common(m)
    m.add_argument("--spec")
    m.add_argument("--seed", type=int)
    m.add_argument("--groups", type=int)
    m.add_argument("--reps", type=int, default=200)
    m.add_argument("--workers", type=int)
    m.add_argument("--estimands", type=_csv_list)

    d = sub.add_parser("describe", help="cell counts, OSN diagnostic and strata of a data table")
    common(d)
    d.add_argument("--input", "-i")
    return p


def make_config(argv: list[str] | None = None) -> tuple[RunConfig, int]:
    parser = build_parser()
    ns = parser.parse_args(argv)
    # Record which options were typed, so config-file conflicts can be reported.
    defaults = vars(parser.parse_args([ns.command]))
    explicit = {k for k, v in vars(ns).items() if v != defaults.get(k)}
    known = {f.name for f in fields(RunConfig)}
    cfg = RunConfig(**{k: v for k, v in vars(ns).items() if k in known and v is not None})
    cfg.explicit = explicit
    if getattr(ns, "workers", None) is None:
        cfg.workers = default_workers()
    if cfg.config:
        _apply_config_file(cfg, cfg.config, known)
    return cfg, ns.verbose


def _apply_config_file(cfg: RunConfig, path: str, known: set[str]) -> None:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise SpecError("config file must be a mapping of option names to values")
    for raw, value in doc.items():
        key = str(raw).replace("-", "_")
        if key not in known or key in ("command", "config", "explicit"):
            raise SpecError(f"unknown config option {raw!r}")
        if key == "estimands" and isinstance(value, str):
            value = _csv_list(value)
        current = getattr(cfg, key)
        if key in cfg.explicit and current != value:
            warnings.warn(
                f"config file sets {raw}={value!r}, overriding command-line value {current!r}",
                ConfigConflictWarning,
                stacklevel=2,
            )
        setattr(cfg, key, value)


def _require(cfg: RunConfig, *names: str) -> None:
    for n in names:
        if getattr(cfg, n) in (None, ""):
            raise SpecError(f"{cfg.command} needs --{n.replace('_', '-')}")


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_estimate(cfg: RunConfig) -> int:
    _require(cfg, "input")
    ds = load(cfg.input)
    design = None
    if cfg.design_probs:
        with open(cfg.design_probs, encoding="utf-8") as fh:
            design = yaml.safe_load(fh)
        if not isinstance(design, dict):
            raise SpecError("design-probs file must map stratum labels to cell probabilities")
        design = {str(k): v for k, v in design.items()}
    report = estimate(
        ds,
        cfg.estimands,
        level=cfg.ci_level,
        clamp_shares=cfg.clamp_shares,
        design_probs=design,
        g_spec=cfg.g_spec,
        small_sample=cfg.small_sample,
    )
    if cfg.output:
        _emit(report.to_json(), cfg.output)
        sys.stdout.write(report.to_table())
    else:
        sys.stdout.write(report.to_json())
        sys.stderr.write(report.to_table())
    return EXIT_OK


def _spec_with_overrides(cfg: RunConfig):
    _require(cfg, "spec")
    spec = load_spec(cfg.spec)
    groups = cfg.groups if cfg.groups is not None else spec.groups
    return spec.with_groups(groups, cfg.seed)


def truth_manifest(spec) -> dict:
    return {"groups": int(spec.groups), "seed": int(spec.seed), **truth(spec).to_dict()}


def _cmd_simulate(cfg: RunConfig) -> int:
    _require(cfg, "spec", "output")
    spec = _spec_with_overrides(cfg)
    ds = simulate(spec, workers=cfg.workers)
    write(ds, cfg.output)
    out = Path(cfg.output)
    manifest = out.with_name(out.stem + ".truth.json")
    _emit(json.dumps(truth_manifest(spec), indent=2) + "\n", str(manifest))
    print(f"wrote {ds.n_groups} households to {out} and truth to {manifest}")
    return EXIT_OK


def _cmd_verify(cfg: RunConfig) -> int:
    if not cfg.spec and not cfg.random_specs:
        raise SpecError("verify needs --spec or --random-specs")
    results = {}
    ok = True
    if cfg.spec:
        rep = verify_identities(load_spec(cfg.spec))
        results["spec"] = rep.to_dict()
        ok &= rep.passed
        n_pass = sum(c.status == "pass" for c in rep.checks)
        n_na = sum(c.status == "not-applicable" for c in rep.checks)
        print(f"{cfg.spec}: {n_pass} passed, {len(rep.failures)} failed, {n_na} not applicable, "
              f"max residual {rep.max_residual:.3g}")
        for c in rep.failures:
            print(f"  FAIL {c.name}: residual {c.residual:.3g}")
    if cfg.random_specs:
        rng = np.random.default_rng(cfg.seed if cfg.seed is not None else 0)
        worst, failed = 0.0, []
        for k in range(cfg.random_specs):
            rep = verify_identities(random_spec(rng, strata=2 if k % 10 == 9 else 0))
            worst = max(worst, rep.max_residual)
            if not rep.passed:
                failed.append({"index": k, "failures": [c.to_dict() for c in rep.failures]})
        ok &= not failed
        results["random"] = {"n_specs": cfg.random_specs, "n_failed": len(failed),
                             "max_residual": worst, "failed": failed}
        print(f"random specs: {cfg.random_specs - len(failed)}/{cfg.random_specs} passed, "
              f"max residual {worst:.3g}")
    if cfg.output:
        _emit(json.dumps(results, indent=2) + "\n", cfg.output)
    return EXIT_OK if ok else EXIT_FAILED


def _cmd_mc_study(cfg: RunConfig) -> int:
    _require(cfg, "spec")
    spec = _spec_with_overrides(cfg)
    report = mc_study(spec, cfg.estimands, cfg.reps, workers=cfg.workers, level=cfg.ci_level)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    _emit(text, cfg.output)
    if cfg.output:
        for name, cal in report.estimands.items():
            cov = "n/a" if cal.coverage is None else f"{cal.coverage:.3f}"
            ratio = "n/a" if cal.se_sd_ratio is None else f"{cal.se_sd_ratio:.3f}"
            print(f"{name:24s} reps={cal.n_reps:5d} coverage={cov} se/sd={ratio}")
    return EXIT_OK


def describe_dataset(ds, level: float = 0.95) -> dict:
    out = {
        "n_groups": ds.n_groups,
        "unit_cell_counts": {f"{z}{zp}": n for (z, zp), n in ds.cell_counts.items()},
        "household_assignment_counts": {
            "none": ds.group_cell_counts[(0, 0)],
            "one": ds.group_cell_counts[(1, 0)],
            "both": ds.group_cell_counts[(1, 1)],
        },
    }
    try:
        out["osn"] = check_osn(ds, level).to_dict()
    except EstimationError as exc:
        out["osn"] = {"verdict": "untestable", "condition": exc.condition, "message": str(exc),
                      "hard_count": ds.osn_hard_count}
    if ds.x is not None:
        labels, counts = np.unique(ds.x.astype(str), return_counts=True)
        out["strata"] = {str(lab): int(c) for lab, c in zip(labels, counts)}
    return out


def _cmd_describe(cfg: RunConfig) -> int:
    _require(cfg, "input")
    ds = load(cfg.input)
    info = describe_dataset(ds, cfg.ci_level)
    text = json.dumps(info, indent=2) + "\n"
    _emit(text, cfg.output)
    return EXIT_OK


_HANDLERS = {
    "estimate": _cmd_estimate,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
    "mc-study": _cmd_mc_study,
    "describe": _cmd_describe,
}


def run(cfg: RunConfig) -> int:
    try:
        return _HANDLERS[cfg.command](cfg)
    except (ValidationError, EstimationError, PairSpillError) as exc:
        print(f"error: {exc.condition}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: ValueError: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main(argv: list[str] | None = None) -> int:
    try:
        cfg, verbose = make_config(argv)
    except PairSpillError as exc:
        print(f"error: {exc.condition}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
