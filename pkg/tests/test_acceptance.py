"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict; the lines are printed in the
pytest terminal summary (see conftest.py) and when this file is run directly.
"""

import os
import time
import warnings

import numpy as np
import pytest

from pairspill.cli import main as cli_main
from pairspill.dgpfile import bundled_spec
from pairspill.estimators import estimate, itt_weight_decomposition, tsls_spillover
from pairspill.ingest import write
from pairspill.model import JointTypeDistribution
from pairspill.oracle import default_workers, mc_study, random_spec, simulate, truth, verify_identities

VERDICTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])


def workers() -> int:
    """PAIRSPILL_WORKERS if set, else every available core."""
    if "PAIRSPILL_WORKERS" in os.environ:
        return default_workers()
    return os.cpu_count() or 1


def quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kw)


# 1 ---------------------------------------------------------------------------


def test_criterion_1_identity_suite():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    failed, worst, n_checks = [], 0.0, 0
    for k in range(1000):
        spec = random_spec(rng, strata=2 if k % 10 == 9 else 0)
        rep = verify_identities(spec)
        n_checks += sum(c.status != "not-applicable" for c in rep.checks)
        worst = max(worst, rep.max_residual)
        if not rep.passed:
            failed.append((k, [c.name for c in rep.failures]))
    elapsed = time.perf_counter() - start
    ok = not failed and worst < 1e-10 and elapsed < 30
    record(1, ok, f"1000 specs, {n_checks} checks, {len(failed)} failing specs, "
                  f"max residual {worst:.2e}, {elapsed:.1f}s (limit 30s)")
    assert not failed, failed[:5]
    assert worst < 1e-10
    assert elapsed < 30


# 2 ---------------------------------------------------------------------------

PRINTED = {
    "uniform": (JointTypeDistribution.uniform(), (0.6, 0.2, 0.2, 0.2, 0.1), 1.3),
    "marginals (0.1,0.2,0.4,0.2,0.1)": (
        JointTypeDistribution.independent([0.1, 0.2, 0.4, 0.2, 0.1]),
        (0.7, 0.2, 0.2, 0.1, 0.03),
        1.13,
    ),
}


def test_criterion_2_weight_sums():
    problems, parts = [], []
    for label, (dist, weights, total) in PRINTED.items():
        wt = itt_weight_decomposition(dist, "direct")
        got = wt.rescaled
        parts.append(f"{label}: {np.round(got, 4).tolist()} sum {wt.rescaled_sum:.12g}")
        for k, (g, w) in enumerate(zip(got, weights)):
            if abs(g - w) > 0.005:
                problems.append(f"{label} weight {k + 1}: {g:.6g} vs printed {w}")
        if abs(wt.rescaled_sum - total) > 1e-10:
            problems.append(f"{label} sum: {wt.rescaled_sum:.12g} vs printed {total}")
    record(2, not problems, "; ".join(parts) + ("" if not problems else " | mismatches: " + "; ".join(problems)))
    assert not problems, problems


# 3 ---------------------------------------------------------------------------


def _sweep_one(k):
    rng = np.random.default_rng([7, k])
    spec = random_spec(rng, groups=10_000, strata=2 if k % 10 == 9 else 0)
    t = truth(spec)
    rep = quiet(estimate, simulate(spec, workers=1), g_spec="all")
    out = []
    for r in rep.rows:
        if r.name in t and r.std_error > 0:
            out.append((k, r.name, abs(r.value - t[r.name]) / r.std_error))
    return out


def test_criterion_3_estimator_oracle_consistency():
    from concurrent.futures import ProcessPoolExecutor

    start = time.perf_counter()
    n = workers()
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(_sweep_one, range(200)))
    else:
        results = [_sweep_one(k) for k in range(200)]
    pairs = [p for r in results for p in r]
    within = np.mean([z <= 4 for _, _, z in pairs])
    elapsed = time.perf_counter() - start
    ok = within >= 0.95 and elapsed < 600
    record(3, ok, f"{len(pairs)} (spec, estimand) pairs, {100 * within:.2f}% within 4 SE "
                  f"(need 95%), {elapsed:.0f}s on {n} workers")
    assert within >= 0.95
    assert elapsed < 600


# 4 ---------------------------------------------------------------------------


def test_criterion_4_tsls_equivalence():
    rng = np.random.default_rng(404)
    worst, n_data = 0.0, 0
    for k in range(150):
        spec = random_spec(rng, osn=True, groups=int(rng.integers(200, 3000)))
        ds = simulate(spec)
        rep = quiet(estimate, ds, ["mean_y_00", "late_direct", "late_indirect"])
        if len(rep.rows) < 3:
            continue
        fit = quiet(tsls_spillover, ds)
        for b, name in zip(fit.beta[:3], ("mean_y_00", "late_direct", "late_indirect")):
            ref = rep[name].value
            worst = max(worst, abs(b - ref) / max(abs(ref), 1e-12))
        n_data += 1
    ok = worst <= 1e-10 and n_data > 100
    record(4, ok, f"{n_data} OSN datasets, max relative gap {worst:.2e} (limit 1e-10)")
    assert n_data > 100
    assert worst <= 1e-10


# 5 ---------------------------------------------------------------------------

CELL_MEANS = ("mean_y_00", "mean_y_10", "mean_y_01", "mean_y_11")
LATES = ("late_direct", "late_indirect")


def test_criterion_5_inference_calibration():
    spec = bundled_spec("osn_example").with_groups(5000, 55)
    rep = mc_study(spec, CELL_MEANS + LATES, 2000, workers=workers())
    cover = {n: rep[n].coverage for n in CELL_MEANS}
    ratio = {n: rep[n].se_sd_ratio for n in LATES}
    ok = all(0.93 <= c <= 0.97 for c in cover.values()) and all(0.9 <= r <= 1.1 for r in ratio.values())
    record(5, ok, "coverage " + ", ".join(f"{n}={c:.4f}" for n, c in cover.items())
                  + "; SE/SD " + ", ".join(f"{n}={r:.3f}" for n, r in ratio.items()))
    for n, c in cover.items():
        assert 0.93 <= c <= 0.97, (n, c)
    for n, r in ratio.items():
        assert 0.9 <= r <= 1.1, (n, r)


# 6 ---------------------------------------------------------------------------


def test_criterion_6_application_like_recovery():
    spec = bundled_spec("application_like")
    assert spec.groups == 4930
    t = truth(spec)
    rep = quiet(estimate, simulate(spec))
    z = {r.name: abs(r.value - t[r.name]) / r.std_error for r in rep.rows if r.name in t and r.std_error > 0}
    worst = max(z, key=z.get)
    ok = all(v <= 4 for v in z.values()) and len(z) >= 15
    record(6, ok, f"G={rep.n_groups}, {len(z)} estimands checked, worst {worst} at {z[worst]:.2f} SE; "
                  f"late_direct {rep['late_direct'].value:.4f} (truth {t['late_direct']:.2f}), "
                  f"late_indirect {rep['late_indirect'].value:.4f} (truth {t['late_indirect']:.2f}), "
                  f"first stage {rep['first_stage'].value:.4f} (truth {t['first_stage']:.3f})")
    assert t["p_c"] == pytest.approx(0.451)
    assert t["late_direct"] == pytest.approx(0.07) and t["late_indirect"] == pytest.approx(0.10)
    assert len(z) >= 15
    assert all(v <= 4 for v in z.values()), {k: v for k, v in z.items() if v > 4}


# 7 ---------------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path):
    texts = []
    for name in ("two_strata", "application_like"):
        spec = bundled_spec(name).with_groups(20_000, 123)
        runs = [write(simulate(spec, workers=w)) for w in (1, 1, 2, 4)]
        texts.append(all(r == runs[0] for r in runs))
    blobs = []
    for w in ("1", "3"):
        out = tmp_path / f"w{w}.csv"
        assert cli_main(["simulate", "--spec", "osn_example", "--seed", "8", "--groups", "10000",
                         "--workers", w, "--output", str(out)]) == 0
        blobs.append((out.read_bytes(), out.with_name(f"w{w}.truth.json").read_bytes()))
    cli_same = blobs[0] == blobs[1]
    ok = all(texts) and cli_same
    record(7, ok, f"library output identical across runs and 1/2/4 workers: {all(texts)}; "
                  f"CLI bytes identical across 1/3 workers: {cli_same}")
    assert all(texts)
    assert cli_same


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
