import numpy as np
import pytest
import scipy.sparse
import torch

from torch_pcmf.counts import (
    CountMatrix,
    read_csv,
    read_matrix,
    read_mtx,
    write_csv,
    write_matrix,
    write_mtx,
)
from torch_pcmf.errors import InputError


def test_dense_and_sparse_inputs_agree(small_counts: CountMatrix):
    dense = small_counts.dense().numpy()
    from_sparse = CountMatrix.from_scipy(scipy.sparse.csr_matrix(dense))
    assert from_sparse.equals(CountMatrix.from_dense(dense))
    assert from_sparse.nnz == int((dense > 0).sum())


def test_only_nonzero_cells_are_stored():
    x = CountMatrix.from_dense([[0, 3], [0, 0], [1, 0]])
    assert x.nnz == 2
    assert x.shape == (3, 2)
    assert torch.equal(x.rows, torch.tensor([0, 2]))
    assert torch.equal(x.cols, torch.tensor([1, 0]))


def test_default_names():
    x = CountMatrix.from_dense(np.ones((2, 3)))
    assert x.row_names == ["cell1", "cell2"]
    assert x.col_names == ["gene1", "gene2", "gene3"]


@pytest.mark.parametrize(
    "values", [[[1, -1]], [[1.5, 2]], [[np.nan, 1]], [[np.inf, 1]]]
)
def test_invalid_counts_are_rejected(values):
    with pytest.raises(InputError):
        CountMatrix.from_dense(values)


def test_name_length_mismatch():
    with pytest.raises(InputError, match="names"):
        CountMatrix.from_dense(np.ones((2, 2)), row_names=["a"])


def test_column_statistics():
    x = CountMatrix.from_dense([[0, 2], [4, 0], [2, 0], [0, 0]])
    torch.testing.assert_close(x.column_means(), torch.tensor([1.5, 0.5], dtype=torch.float64))
    torch.testing.assert_close(x.expressed_fraction(), torch.tensor([0.5, 0.25], dtype=torch.float64))


def test_select_columns_keeps_names_and_values():
    x = CountMatrix.from_dense([[1, 0, 3], [0, 5, 6]], col_names=["a", "b", "c"])
    sub = x.select_columns(np.array([True, False, True]))
    assert sub.col_names == ["a", "c"]
    assert torch.equal(sub.dense(), torch.tensor([[1.0, 3.0], [0.0, 6.0]], dtype=torch.float64))


def test_empty_column_selection():
    x = CountMatrix.from_dense([[1, 2]])
    with pytest.raises(InputError, match="empty"):
        x.select_columns(np.array([False, False]))


def test_csv_round_trip(tmp_path, small_counts: CountMatrix):
    path = tmp_path / "counts.csv"
    write_csv(small_counts, path)
    assert read_csv(path).equals(small_counts)
    assert read_matrix(path).equals(small_counts)


def test_mtx_round_trip_with_sidecars(tmp_path):
    x = CountMatrix.from_dense(
        [[0, 7, 0], [1, 0, 0]], row_names=["c1", "c2"], col_names=["g1", "g2", "g3"]
    )
    path = tmp_path / "counts.mtx"
    write_mtx(x, path)
    assert (tmp_path / "cells.txt").read_text().splitlines() == ["c1", "c2"]
    assert (tmp_path / "genes.txt").read_text().splitlines() == ["g1", "g2", "g3"]
    assert read_mtx(path).equals(x)


def test_write_matrix_dispatches_on_suffix(tmp_path, small_counts: CountMatrix):
    write_matrix(small_counts, tmp_path / "x.mtx")
    write_matrix(small_counts, tmp_path / "x.csv")
    assert read_matrix(tmp_path / "x.mtx").equals(read_matrix(tmp_path / "x.csv"))


def test_csv_with_non_numeric_entries(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("cell,g1,g2\nc1,1,abc\n")
    with pytest.raises(InputError):
        read_csv(path)


def test_missing_file(tmp_path):
    with pytest.raises(InputError, match="does not exist"):
        read_matrix(tmp_path / "missing.csv")
