import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairspill.errors import DegenerateDenominator, EmptyCell
from pairspill.moments import (
    EstimateReport,
    EstimateRow,
    MomentLayout,
    check_moment_invariants,
    compute_moments,
    critical_value,
    delta_method,
    ratio,
)

from conftest import make_dataset


def unit_cells(ds):
    """(G, 2) array of the CELLS index each unit sits in."""
    z = ds.z.astype(int)
    return z + 2 * z[:, ::-1]


def test_layout_sizes():
    assert MomentLayout("full-8").size == 36
    assert MomentLayout("itt-only").size == 8
    assert MomentLayout("osn-4", (0, 1, 2)).size == 16
    assert MomentLayout("full-8", strata=("a", "b")).size == 72
    assert len(MomentLayout("full-8").names) == 36


def test_hand_cell_means(hand_dataset):
    mu, sigma = compute_moments(hand_dataset)
    cm = mu.access()
    np.testing.assert_allclose(mu.cell_probs(), [0.2, 0.2, 0.2, 0.4])
    assert cm.mean("Y", (0, 0)) == pytest.approx(1.5)
    assert cm.mean("Y", (1, 0)) == pytest.approx(3.5)
    assert cm.mean("Y", (0, 1)) == pytest.approx(1.5)
    assert cm.mean("Y", (1, 1)) == pytest.approx(1.75)
    assert cm.mean("D_i", (1, 0)) == pytest.approx(1.0)
    assert cm.mean("D_j", (0, 1)) == pytest.approx(1.0)
    assert cm.mean("D_i", (1, 1)) == pytest.approx(0.5)
    assert cm.mean("D_i*D_j", (1, 1)) == pytest.approx(0.5)
    assert cm.mean("Y*(1-D_i)", (1, 1)) == pytest.approx(0.5)
    assert cm.total_prob() == pytest.approx(1.0)
    check_moment_invariants(mu, sigma)


@pytest.mark.parametrize("h_spec", ["itt-only", "osn-4"])
def test_reduced_layouts_agree_with_full(hand_dataset, h_spec):
    full = compute_moments(hand_dataset)[0].access()
    red = compute_moments(hand_dataset, h_spec)[0].access()
    for stat, cell in [("Y", (0, 0)), ("Y", (1, 0)), ("Y", (0, 1))]:
        assert red.mean(stat, cell) == pytest.approx(full.mean(stat, cell))
    if h_spec == "osn-4":
        assert red.mean("Y*(1-D_j)", (0, 1)) == pytest.approx(full.mean("Y*(1-D_j)", (0, 1)))
        assert red.mean("D_i", (1, 0)) == pytest.approx(1.0)


def test_small_sample_scaling(osn_data):
    _, ds = osn_data
    G = ds.n_groups
    _, s1 = compute_moments(ds)
    _, s2 = compute_moments(ds, small_sample=True)
    np.testing.assert_allclose(s2.sigma_hat, s1.sigma_hat * G / (G - 1), rtol=1e-12, atol=1e-15)


def test_stratified_blocks_sum_to_pooled(strata_data):
    _, ds = strata_data
    pooled = compute_moments(ds)[0].access()
    mu, _ = compute_moments(ds, by_stratum=True)
    cm = mu.access()
    for cell in [(0, 0), (1, 0), (0, 1), (1, 1)]:
        assert cm.joint("Y", cell) == pytest.approx(pooled.joint("Y", cell), abs=1e-12)
        parts = sum(cm.sub(k).joint("Y", cell) for k in range(len(mu.layout.strata)))
        assert parts == pytest.approx(pooled.joint("Y", cell), abs=1e-12)


def test_delta_method_matches_closed_form_ratio(hand_dataset, osn_data):
    for ds in (hand_dataset, osn_data[1]):
        mu, sigma = compute_moments(ds)
        row = delta_method(mu, sigma, lambda cm: cm.mean("Y", (0, 0)))
        cells = unit_cells(ds)
        w1 = 0.5 * (cells == 0).sum(axis=1)
        w2 = 0.5 * (ds.y * (cells == 0)).sum(axis=1)
        m1, m2 = w1.mean(), w2.mean()
        r = m2 / m1
        infl = (w2 - r * w1) / m1
        se = np.sqrt(np.mean((infl - infl.mean()) ** 2) / ds.n_groups)
        assert row.value == pytest.approx(r, rel=1e-12)
        assert row.std_error == pytest.approx(se, rel=1e-6, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(-3, 3, allow_nan=False),
    st.floats(-3, 3, allow_nan=False),
)
def test_delta_method_is_exact_for_linear_functions(seed, a, b):
    rng = np.random.default_rng(seed)
    G = 30
    z = rng.integers(0, 2, (G, 2))
    d = z * rng.integers(0, 2, (G, 2))
    y = rng.normal(size=(G, 2))
    ds = make_dataset(z, d, y)
    mu, sigma = compute_moments(ds)
    row = delta_method(mu, sigma, lambda cm: a * cm.joint("Y", (1, 0)) + b * cm.prob((0, 0)))
    cells = unit_cells(ds)
    w = 0.5 * (a * ds.y * (cells == 1) + b * (cells == 0)).sum(axis=1)
    se = np.sqrt(w.var() / G)
    assert row.value == pytest.approx(w.mean(), abs=1e-12)
    assert row.std_error == pytest.approx(se, rel=1e-6, abs=1e-9)


def test_guards():
    with pytest.raises(DegenerateDenominator):
        ratio(1.0, 1e-9, "x")
    assert ratio(1.0, 4.0, "x") == 0.25
    ds = make_dataset([[0, 0], [1, 0]], [[0, 0], [1, 0]], [[1.0, 2.0], [3.0, 4.0]])
    cm = compute_moments(ds)[0].access()
    with pytest.raises(EmptyCell):
        cm.mean("Y", (1, 1))


def test_critical_value():
    assert critical_value(0.95) == pytest.approx(1.959963984540054)
    with pytest.raises(ValueError):
        critical_value(1.5)


def test_row_interval():
    row = EstimateRow.build("m", 1.0, 0.5, level=0.9)
    assert row.ci_low == pytest.approx(1.0 - 0.5 * critical_value(0.9))
    assert row.ci_high - row.value == pytest.approx(row.value - row.ci_low)


def test_report_round_trip(hand_dataset):
    mu, sigma = compute_moments(hand_dataset)
    report = EstimateReport(n_groups=hand_dataset.n_groups)
    report.add(delta_method(mu, sigma, lambda cm: cm.mean("Y", (1, 1)), "m11", "E[Y|Z=(1,1)]"))
    report.omit("late", DegenerateDenominator("late", 0.0))
    report.metadata["note"] = np.float64(0.5)
    again = EstimateReport.from_dict(report.to_dict())
    assert again.to_dict() == report.to_dict()
    assert "m11" in again and again["m11"].formula == "E[Y|Z=(1,1)]"
    assert "DegenerateDenominator" in report.to_table()
