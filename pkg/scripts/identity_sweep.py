"""Check the population identities on many random DGPs and report residuals.

    python3 scripts/identity_sweep.py --specs 1000 --seed 1 --output sweep.json
"""

import argparse
import json
import logging
import time
from collections import Counter

import numpy as np

from pairspill.oracle import random_spec, verify_identities

log = logging.getLogger("identity_sweep")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--specs", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stratified-every", type=int, default=10, help="every k-th spec has two strata")
    ap.add_argument("--output")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rng = np.random.default_rng(args.seed)
    start = time.perf_counter()
    residuals: dict[str, float] = {}
    status = Counter()
    failing = []
    for k in range(args.specs):
        strata = 2 if args.stratified_every and k % args.stratified_every == args.stratified_every - 1 else 0
        rep = verify_identities(random_spec(rng, strata=strata))
        for c in rep.checks:
            status[c.status] += 1
            base = c.name.split("[")[0]
            if c.residual is not None:
                residuals[base] = max(residuals.get(base, 0.0), c.residual)
        if not rep.passed:
            failing.append({"index": k, "checks": [c.name for c in rep.failures]})
    elapsed = time.perf_counter() - start

    log.info("%d specs in %.1fs: %s", args.specs, elapsed, dict(status))
    for name, r in sorted(residuals.items(), key=lambda kv: -kv[1]):
        log.info("  %-36s max residual %.2e", name, r)
    if args.output:
        with open(args.output, "w") as fh:
            json.dump({"specs": args.specs, "seconds": elapsed, "status": dict(status),
                       "max_residuals": residuals, "failing": failing}, fh, indent=2)
    return 0 if not failing else 2


if __name__ == "__main__":
    raise SystemExit(main())
