import numpy as np
import pytest

from pairspill.dgpfile import BUNDLED, bundled_spec, dump_spec, load_spec, loads_spec, spec_from_dict
from pairspill.errors import SpecError
from pairspill.estimators import estimate
from pairspill.model import (
    AssignmentDesign,
    DGPSpec,
    JointTypeDistribution,
    OutcomeModel,
)
from pairspill.moments import compute_moments
from pairspill.oracle import (
    IdentityReport,
    beta3_decomposition,
    beta3_ratio,
    mc_study,
    population_expectation,
    population_moments,
    random_spec,
    replication_seed,
    simulate,
    truth,
    verify_identities,
)


def linear_spec(types, own=0.7, peer=0.2, interaction=0.0, design=None, groups=1000):
    out = OutcomeModel.linear(0.5, own, peer, interaction)
    design = design or AssignmentDesign.from_cells(0.25, 0.25, 0.25, 0.25)
    return DGPSpec(types, out, design, groups, 1)


def osn_types():
    return JointTypeDistribution.independent([0, 0, 0.6, 0.2, 0.2])


def test_population_take_up_by_hand():
    spec = linear_spec(JointTypeDistribution.uniform())
    # AT, SC and C take up when own z=1 and peer z=0
    assert population_expectation(spec, 1, 0, "D_i") == pytest.approx(0.6)
    assert population_expectation(spec, 0, 1, "D_i") == pytest.approx(0.4)
    assert population_expectation(spec, 0, 0, "D_i*D_j") == pytest.approx(0.04)
    assert population_expectation(spec, 1, 1, "D_i") == pytest.approx(0.8)


def test_homogeneous_effects_give_structural_coefficients():
    spec = linear_spec(osn_types(), own=0.7, peer=0.2, interaction=0.3)
    t = truth(spec)
    assert t["late_direct"] == pytest.approx(0.7, abs=1e-12)
    assert t["late_indirect"] == pytest.approx(0.2, abs=1e-12)
    assert t["tsls_beta1"] == pytest.approx(0.7, abs=1e-12)
    assert t["tsls_beta3"] == pytest.approx(0.3, abs=1e-12)
    assert t["het_own"] == pytest.approx(0.0, abs=1e-12)
    assert t["p_c"] == pytest.approx(0.6)
    assert t["p_nt_nt"] == pytest.approx(0.04)


def test_beta3_two_routes_agree():
    rng = np.random.default_rng(9)
    checked = 0
    for _ in range(50):
        spec = random_spec(rng, osn=True)
        r = beta3_ratio(spec)
        if r is None:
            continue
        assert beta3_decomposition(spec.components()[0]) == pytest.approx(r, abs=1e-10)
        checked += 1
    assert checked > 20


def test_non_osn_truth_omits_osn_families():
    spec = linear_spec(JointTypeDistribution.uniform())
    t = truth(spec)
    assert "late_direct" not in t and "ey10_c" not in t
    assert "p_sc" in t and "itt_total" in t


def test_population_moments_match_large_sample():
    spec = bundled_spec("osn_example").with_groups(100_000, 3)
    ds = simulate(spec)
    mu, sigma = compute_moments(ds)
    pop = population_moments(spec)
    se = np.sqrt(np.diag(sigma.sigma_hat) / ds.n_groups)
    z = np.abs(mu.mu_hat - pop) / np.where(se > 0, se, 1.0)
    assert z.max() < 5


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_fixtures_pass_identities(name):
    rep = verify_identities(bundled_spec(name))
    assert rep.passed, [c.to_dict() for c in rep.failures]
    assert rep.max_residual < 1e-10


def test_identity_report_flags_failures():
    rep = IdentityReport()
    rep.add("good", 1.0, 1.0 + 1e-12)
    rep.add("bad", 1.0, 1.1)
    rep.skip("skipped", "no mass")
    assert not rep.passed
    assert [c.name for c in rep.failures] == ["bad"]
    assert rep.max_residual == pytest.approx(0.1)


def test_random_specs_respect_requests():
    rng = np.random.default_rng(4)
    for _ in range(20):
        s = random_spec(rng, osn=True)
        assert s.satisfies_osn
        assert 0.15 <= s.types.share("C") <= 0.85
        n = random_spec(rng, osn=False)
        assert not n.satisfies_osn
        st = random_spec(rng, strata=3, bernoulli=True)
        assert len(st.components()) == 3
        assert st.components()[0].outcomes.family == "bernoulli"


def test_simulation_is_deterministic_and_worker_free():
    spec = bundled_spec("two_strata").with_groups(9000, 77)
    a = simulate(spec, workers=1)
    b = simulate(spec, workers=3)
    assert a == b
    assert simulate(spec.with_groups(9000, 78)) != a
    assert a.group_ids[0] == "g000001"
    assert set(a.strata) == {"a", "b"}


def test_simulated_data_respect_the_model():
    spec = bundled_spec("application_like")
    ds = simulate(spec)
    assert ds.n_groups == 4930
    assert ds.osn_hard_count == 0
    assert set(np.unique(ds.y)) <= {0.0, 1.0}
    assert ds.cell_counts[(1, 1)] == 0


def test_application_like_truths():
    t = truth(bundled_spec("application_like"))
    assert t["p_c"] == pytest.approx(0.451)
    assert t["late_direct"] == pytest.approx(0.07, abs=1e-12)
    assert t["late_indirect"] == pytest.approx(0.10, abs=1e-12)
    assert t["het_own"] == pytest.approx(0.17, abs=1e-12)
    assert t["het_peer"] == pytest.approx(0.19, abs=1e-12)
    assert "mean_y_11" not in t


def test_stratified_truth_has_causal_weighting_values():
    spec = bundled_spec("two_strata")
    t = truth(spec)
    for s in spec.components():
        sub = truth(DGPSpec(s.types, s.outcomes, s.design))
        assert t[f"late_direct[x={s.label}]"] == pytest.approx(sub["late_direct"], abs=1e-12)
    pooled = sum(s.weight * truth(DGPSpec(s.types, s.outcomes, s.design))["ey10_c"] for s in spec.components())
    assert t["ipw_ey10_c"] == pytest.approx(pooled, abs=1e-12)


def test_mc_study_is_reproducible():
    spec = bundled_spec("osn_example").with_groups(400, 5)
    names = ["mean_y_00", "late_direct"]
    a = mc_study(spec, names, 12, workers=1)
    b = mc_study(spec, names, 12, workers=2)
    assert a.to_dict() == b.to_dict()
    assert a["late_direct"].n_reps == 12
    assert 0.0 <= a["mean_y_00"].coverage <= 1.0
    assert replication_seed(5, 0) != replication_seed(5, 1)
    with pytest.raises(ValueError):
        mc_study(spec, names, 1)


def test_estimates_center_on_truth(osn_data):
    spec, ds = osn_data
    t = truth(spec)
    rep = estimate(ds)
    z = [abs(r.value - t[r.name]) / r.std_error for r in rep.rows if r.name in t and r.std_error > 0]
    assert len(z) > 20
    assert max(z) < 4.5


# ---------------------------------------------------------------------------
# DGP files


def test_spec_round_trip_preserves_truth():
    for name in BUNDLED:
        spec = bundled_spec(name)
        again = loads_spec(dump_spec(spec))
        t0, t1 = truth(spec).values, truth(again).values
        assert t0.keys() == t1.keys()
        for k in t0:
            assert t1[k] == pytest.approx(t0[k], abs=1e-12)
        assert loads_spec(dump_spec(spec, "json")).groups == spec.groups


def test_load_spec_from_path(tmp_path):
    p = tmp_path / "dgp.yaml"
    p.write_text(dump_spec(bundled_spec("uniform_types")))
    assert load_spec(p).groups == bundled_spec("uniform_types").groups
    assert load_spec("osn_example").satisfies_osn


def test_outcome_cell_entries():
    doc = {
        "joint_types": {"independent": {"C": 0.5, "NT": 0.5}},
        "outcome_mean": {
            "default": 1.0,
            "own_type_effect": {"C": 0.5},
            "cells": [{"own": "C", "d": 1, "d_peer": 0, "add": 0.25},
                      {"own": "NT", "peer": ["C", "NT"], "value": -1.0}],
        },
        "design": {"p00": 0.5, "p10": 0.25, "p01": 0.25, "p11": 0.0},
    }
    spec = spec_from_dict(doc)
    m = spec.outcomes.mean
    assert m[2, 4, 1, 0] == pytest.approx(1.75)
    assert m[2, 4, 0, 0] == pytest.approx(1.5)
    assert m[4, 2, 1, 1] == -1.0


@pytest.mark.parametrize(
    "doc",
    [
        [],
        {"design": {"p00": 1, "p10": 0, "p01": 0, "p11": 0}},
        {"joint_types": {"independent": [1, 0, 0, 0, 0]}, "design": {"p00": 1}},
        {"joint_types": {"nope": 1}, "design": {"p00": 1, "p10": 0, "p01": 0, "p11": 0}},
        {"joint_types": {"uniform": True}, "design": {"p00": 1, "p10": 0, "p01": 0, "p11": 0},
         "outcome_mean": {"cells": [{"value": 1, "add": 1}]}},
        {"joint_types": {"uniform": True}, "design": {"p00": 1, "p10": 0, "p01": 0, "p11": 0},
         "strata": [{"weight": 1.0}]},
    ],
)
def test_malformed_specs(doc):
    with pytest.raises(SpecError):
        spec_from_dict(doc)
