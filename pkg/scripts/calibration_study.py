"""Monte Carlo coverage and SE/SD ratios for a DGP file or bundled fixture.

    python3 scripts/calibration_study.py --spec osn_example --groups 5000 --reps 2000
"""

import argparse
import json
import logging

from pairspill.dgpfile import load_spec
from pairspill.oracle import default_workers, mc_study

log = logging.getLogger("calibration_study")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default="osn_example")
    ap.add_argument("--groups", type=int, default=5000)
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=55)
    ap.add_argument("--workers", type=int, default=default_workers())
    ap.add_argument("--estimands", help="comma-separated names; default is everything")
    ap.add_argument("--output")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = load_spec(args.spec).with_groups(args.groups, args.seed)
    names = args.estimands.split(",") if args.estimands else None
    rep = mc_study(spec, names, args.reps, workers=args.workers)
    log.info("%-26s %9s %9s %9s %9s %7s", "estimand", "truth", "bias", "mc_sd", "coverage", "se/sd")
    for name, c in rep.estimands.items():
        if c.coverage is None:
            log.info("%-26s omitted %s", name, c.omitted)
            continue
        ratio = c.se_sd_ratio if c.se_sd_ratio is not None else float("nan")
        log.info("%-26s %9.4f %9.5f %9.5f %9.4f %7.3f", name, c.truth, c.bias, c.mc_sd or 0.0, c.coverage, ratio)
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(rep.to_dict(), fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
