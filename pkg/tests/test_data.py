import numpy as np
import pytest

from splitinfer.data import Dataset, Roles, as_row_index_set, complement, ingest_csv
from splitinfer.errors import (
    EmptyAfterDrop,
    EmptySubset,
    IndexOutOfRange,
    MissingColumn,
    NonBinaryTreatment,
    NonNumericCell,
)


def write_csv(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_ingest_basic(tmp_path):
    path = write_csv(tmp_path, "y,x\n1,2\n0,3\n1,4\n")
    d = ingest_csv(path, {"outcome": "y"})
    assert d.n == 3
    assert d.n_dropped == 0
    np.testing.assert_array_equal(d.y, [1.0, 0.0, 1.0])


def test_ingest_drop_counts(tmp_path):
    path = write_csv(tmp_path, "y,x\n1,2\n,3\n1,4\n")
    d = ingest_csv(path, {"outcome": "y", "covariates": ["x"]}, missing_policy="drop")
    assert d.n == 2
    assert d.n_dropped == 1


def test_ingest_nonbinary_treatment(tmp_path):
    path = write_csv(tmp_path, "y,t\n1,0\n0,1\n1,2\n")
    with pytest.raises(NonBinaryTreatment):
        ingest_csv(path, {"outcome": "y", "treatment": "t"})


def test_ingest_strict_missing_raises(tmp_path):
    path = write_csv(tmp_path, "y\n1\nNA\n2\n")
    with pytest.raises(NonNumericCell):
        ingest_csv(path, {"outcome": "y"})


def test_ingest_corrupt_cell_raises_even_when_dropping(tmp_path):
    path = write_csv(tmp_path, "y\n1\nabc\n2\n")
    with pytest.raises(NonNumericCell):
        ingest_csv(path, {"outcome": "y"}, missing_policy="drop")


def test_ingest_missing_column(tmp_path):
    path = write_csv(tmp_path, "a,b\n1,2\n3,4\n")
    with pytest.raises(MissingColumn):
        ingest_csv(path, {"outcome": "y"})


def test_ingest_empty_after_drop(tmp_path):
    path = write_csv(tmp_path, "y\nNA\nNA\n1\n")
    with pytest.raises(EmptyAfterDrop):
        ingest_csv(path, {"outcome": "y"}, missing_policy="drop")


def test_ingest_custom_sentinel(tmp_path):
    path = write_csv(tmp_path, "y\n1\n-999\n2\n")
    d = ingest_csv(path, {"outcome": "y"}, missing_policy="drop", missing_values=("-999",))
    assert d.n == 2
    assert d.n_dropped == 1


def test_ingest_deterministic(tmp_path):
    path = write_csv(tmp_path, "y,x\n1.5,2\n0.25,3\n1,4\n")
    d1 = ingest_csv(path, {"outcome": "y", "covariates": ["x"]})
    d2 = ingest_csv(path, {"outcome": "y", "covariates": ["x"]})
    np.testing.assert_array_equal(d1.y, d2.y)
    np.testing.assert_array_equal(d1.x, d2.x)


def make_dataset(n=5):
    return Dataset(
        {"y": np.arange(n, dtype=float), "x": np.arange(n, dtype=float) ** 2},
        Roles("y", ("x",)),
    )


def test_subset_rows():
    d = make_dataset()
    sub = d.subset([0, 2])
    assert sub.n == 2
    np.testing.assert_array_equal(sub.y, [0.0, 2.0])


def test_subset_identity():
    d = make_dataset()
    sub = d.subset(np.arange(d.n))
    np.testing.assert_array_equal(sub.y, d.y)
    np.testing.assert_array_equal(sub.x, d.x)


def test_subset_empty_raises():
    d = make_dataset()
    with pytest.raises(EmptySubset):
        d.subset([])


def test_subset_out_of_range():
    d = make_dataset()
    with pytest.raises(IndexOutOfRange):
        d.subset([0, 7])


def test_partition_multiset_equality():
    d = make_dataset(8)
    s = as_row_index_set([1, 4, 6], d.n)
    left = d.subset(s).row_tuples()
    right = d.subset(complement(s, d.n)).row_tuples()
    assert sorted(left + right) == sorted(d.row_tuples())


def test_columns_are_immutable():
    d = make_dataset()
    with pytest.raises(ValueError):
        d.y[0] = 99.0
