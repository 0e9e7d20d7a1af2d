"""Simulate random DGPs, estimate everything, and compare with oracle truth in SE units.

    python3 scripts/consistency_sweep.py --specs 200 --groups 10000 --workers 8
"""

import argparse
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from pairspill.estimators import estimate
from pairspill.oracle import default_workers, random_spec, simulate, truth

log = logging.getLogger("consistency_sweep")


def one(args):
    k, seed, groups = args
    rng = np.random.default_rng([seed, k])
    spec = random_spec(rng, groups=groups, strata=2 if k % 10 == 9 else 0)
    t = truth(spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = estimate(simulate(spec, workers=1), g_spec="all")
    return [(k, r.name, (r.value - t[r.name]) / r.std_error) for r in rep.rows if r.name in t and r.std_error > 0]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--specs", type=int, default=200)
    ap.add_argument("--groups", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--workers", type=int, default=default_workers())
    ap.add_argument("--threshold", type=float, default=4.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    start = time.perf_counter()
    tasks = [(k, args.seed, args.groups) for k in range(args.specs)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as ex:
            parts = list(ex.map(one, tasks))
    else:
        parts = [one(t) for t in tasks]
    rows = [r for p in parts for r in p]
    z = np.array([r[2] for r in rows])
    within = np.mean(np.abs(z) <= args.threshold)
    log.info("%d pairs from %d specs in %.0fs", len(rows), args.specs, time.perf_counter() - start)
    log.info("within %.1f SE: %.2f%%   |z| quantiles 50/90/99: %s", args.threshold, 100 * within,
             np.round(np.quantile(np.abs(z), [0.5, 0.9, 0.99]), 3).tolist())
    log.info("share |z| <= 1.96: %.4f (normal: 0.95)", np.mean(np.abs(z) <= 1.96))
    for k, name, v in sorted(rows, key=lambda r: -abs(r[2]))[:10]:
        log.info("  spec %3d  %-28s z=%+.2f", k, name, v)
    return 0 if within >= 0.95 else 2


if __name__ == "__main__":
    raise SystemExit(main())
