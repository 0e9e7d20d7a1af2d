import io

import numpy as np
import pandas as pd
import pytest

from pairspill.errors import (
    EmptyCell,
    GroupSizeNot2,
    InconsistentCovariate,
    MissingColumn,
    NonBinaryValue,
    NonFiniteOutcome,
)
from pairspill.ingest import check_osn, load, loads, to_frame, write

CSV = """household,unit,z,d,y
h1,1,0,0,1.0
h1,2,0,0,2.0
h2,1,1,1,3.0
h2,2,0,0,1.0
h3,1,0,0,2.0
h3,2,1,1,4.0
"""


def test_load_pairs_units_by_household():
    ds = loads(CSV)
    assert ds.n_groups == 3
    np.testing.assert_array_equal(ds.z, [[0, 0], [1, 0], [0, 1]])
    np.testing.assert_array_equal(ds.y[2], [2.0, 4.0])
    assert ds.x is None


def test_row_order_does_not_matter():
    df = pd.read_csv(io.StringIO(CSV), dtype={"household": str, "unit": str})
    shuffled = df.sample(frac=1.0, random_state=3)
    assert load(shuffled) == loads(CSV)


def test_write_load_round_trip(hand_dataset):
    text = write(hand_dataset)
    again = loads(text)
    assert again == hand_dataset
    assert write(again) == text


def test_round_trip_with_covariate(strata_data):
    _, ds = strata_data
    small = ds.take(np.arange(50))
    again = loads(write(small))
    assert again == small
    assert set(again.strata) <= {"a", "b"}
    assert len(to_frame(small)) == 100


@pytest.mark.parametrize(
    "text, exc",
    [
        ("household,unit,z,y\nh1,1,0,1\nh1,2,0,1\n", MissingColumn),
        ("household,unit,z,d,y\nh1,1,2,0,1\nh1,2,0,0,1\n", NonBinaryValue),
        ("household,unit,z,d,y\nh1,1,0,yes,1\nh1,2,0,0,1\n", NonBinaryValue),
        ("household,unit,z,d,y\nh1,1,0,0,1\nh1,2,0,0,1\nh1,3,0,0,1\n", GroupSizeNot2),
        ("household,unit,z,d,y\nh1,1,0,0,1\n", GroupSizeNot2),
        ("household,unit,z,d,y\nh1,1,0,0,nan\nh1,2,0,0,1\n", NonFiniteOutcome),
        ("household,unit,z,d,y\nh1,1,0,0,inf\nh1,2,0,0,1\n", NonFiniteOutcome),
        ("household,unit,z,d,y\nh1,1,0,0,\nh1,2,0,0,1\n", NonFiniteOutcome),
        ("household,unit,z,d,y,x\nh1,1,0,0,1,a\nh1,2,0,0,1,b\n", InconsistentCovariate),
    ],
)
def test_validation_errors(text, exc):
    with pytest.raises(exc) as info:
        loads(text)
    assert info.value.condition == exc.__name__


def test_cell_counts_are_unit_perspective(hand_dataset):
    counts = hand_dataset.cell_counts
    assert counts == {(0, 0): 2, (1, 0): 2, (0, 1): 2, (1, 1): 4}
    assert sum(counts.values()) == 2 * hand_dataset.n_groups
    assert hand_dataset.group_cell_counts == {(0, 0): 1, (1, 0): 2, (1, 1): 2}


def test_swap_and_take_preserve_content(hand_dataset):
    swapped = hand_dataset.swap_units()
    np.testing.assert_array_equal(swapped.y, hand_dataset.y[:, ::-1])
    assert swapped.swap_units() == hand_dataset
    order = np.array([4, 2, 0, 1, 3])
    taken = hand_dataset.take(order)
    np.testing.assert_array_equal(taken.group_ids, hand_dataset.group_ids[order])


def test_osn_diagnostic(hand_dataset):
    diag = check_osn(hand_dataset)
    assert diag.verdict == "consistent" and diag.hard_count == 0
    assert diag.p_at.value == 0.0 and diag.p_sc.value == 0.0
    bad = loads(CSV.replace("h1,1,0,0,1.0", "h1,1,0,1,1.0"))
    diag = check_osn(bad)
    assert diag.verdict == "violated" and diag.hard_count == 1
    assert diag.p_at.value > 0


def test_osn_diagnostic_needs_untreated_cells():
    only_treated = loads("household,unit,z,d,y\nh1,1,1,1,1\nh1,2,1,0,0\n")
    with pytest.raises(EmptyCell):
        check_osn(only_treated)


def test_dataset_is_read_only(hand_dataset):
    with pytest.raises(ValueError):
        hand_dataset.y[0, 0] = 9.0
