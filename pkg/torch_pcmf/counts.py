"""Count matrices and the file formats the CLI reads and writes.

A `CountMatrix` always keeps the coordinate list of its non-zero entries with
explicit dimensions, so dense and sparse inputs describing the same data end up
in the same internal representation. Inference only ever iterates over the
non-zero cells; the dense view is built on demand and cached.

Supported files:
- CSV: header row of gene names, first column of cell ids, integer entries.
- Matrix Market coordinate integer, with two sidecar files holding one cell
  name (resp. gene name) per line.
"""

from pathlib import Path

import numpy as np
import pandas as pd
import scipy.io
import scipy.sparse
import torch

from torch_pcmf.errors import InputError
from torch_pcmf.utils import DTYPE


class CountMatrix:
    def __init__(
        self,
        rows: np.ndarray,
        cols: np.ndarray,
        values: np.ndarray,
        shape: tuple[int, int],
        row_names: list[str] | None = None,
        col_names: list[str] | None = None,
    ):
        n_rows, n_cols = int(shape[0]), int(shape[1])
        if n_rows < 1 or n_cols < 1:
            raise InputError(f"A count matrix needs at least one row and column, got {shape}")
        coo = scipy.sparse.coo_matrix(
            (np.asarray(values, dtype=np.float64), (np.asarray(rows), np.asarray(cols))),
            shape=(n_rows, n_cols),
        )
        coo.sum_duplicates()
        coo.eliminate_zeros()
        data = coo.data
        if data.size and (not np.all(np.isfinite(data)) or np.any(data < 0)):
            raise InputError("Counts must be finite and non-negative.")
        if data.size and np.any(data != np.round(data)):
            raise InputError("Counts must be integers.")

        self.n_rows = n_rows
        self.n_cols = n_cols
        self.rows = torch.as_tensor(coo.row.astype(np.int64))
        self.cols = torch.as_tensor(coo.col.astype(np.int64))
        self.values = torch.as_tensor(data, dtype=DTYPE)
        self.row_names = _check_names(row_names, n_rows, "cell", "row")
        self.col_names = _check_names(col_names, n_cols, "gene", "column")
        self._dense: torch.Tensor | None = None

    @classmethod
    def from_dense(
        cls,
        x: torch.Tensor | np.ndarray | list,
        row_names: list[str] | None = None,
        col_names: list[str] | None = None,
    ) -> "CountMatrix":
        if isinstance(x, torch.Tensor):
            x = x.detach().cpu().numpy()
        array = np.asarray(x, dtype=np.float64)
        if array.ndim != 2:
            raise InputError(f"Expected a 2-D matrix, got {array.ndim} dimensions")
        if not np.all(np.isfinite(array)) or np.any(array < 0):
            raise InputError("Counts must be finite and non-negative.")
        rows, cols = np.nonzero(array)
        return cls(rows, cols, array[rows, cols], array.shape, row_names, col_names)

    @classmethod
    def from_scipy(
        cls,
        matrix: scipy.sparse.spmatrix | scipy.sparse.sparray,
        row_names: list[str] | None = None,
        col_names: list[str] | None = None,
    ) -> "CountMatrix":
        coo = scipy.sparse.coo_matrix(matrix)
        return cls(coo.row, coo.col, coo.data, coo.shape, row_names, col_names)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.values.numel())

    def dense(self) -> torch.Tensor:
        if self._dense is None:
            dense = torch.zeros(self.n_rows, self.n_cols, dtype=DTYPE)
            dense.index_put_((self.rows, self.cols), self.values, accumulate=True)
            self._dense = dense
        return self._dense

    def to_scipy(self) -> scipy.sparse.coo_matrix:
        return scipy.sparse.coo_matrix(
            (self.values.numpy().astype(np.int64), (self.rows.numpy(), self.cols.numpy())),
            shape=self.shape,
        )

    def column_means(self) -> torch.Tensor:
        sums = torch.zeros(self.n_cols, dtype=DTYPE).index_add_(0, self.cols, self.values)
        return sums / self.n_rows

    def nonzero_counts_per_column(self) -> torch.Tensor:
        return torch.bincount(self.cols, minlength=self.n_cols).to(DTYPE)

    def expressed_fraction(self) -> torch.Tensor:
        """Fraction of cells with a non-zero count, per gene."""
        return self.nonzero_counts_per_column() / self.n_rows

    def select_columns(self, mask: torch.Tensor | np.ndarray) -> "CountMatrix":
        mask = torch.as_tensor(np.asarray(mask, dtype=bool))
        if mask.numel() != self.n_cols:
            raise InputError(f"Column mask has {mask.numel()} entries for {self.n_cols} columns")
        if not bool(mask.any()):
            raise InputError("Column selection is empty.")
        new_index = torch.cumsum(mask.to(torch.int64), 0) - 1
        keep = mask[self.cols]
        names = [name for name, kept in zip(self.col_names, mask.tolist()) if kept]
        return CountMatrix(
            self.rows[keep].numpy(),
            new_index[self.cols[keep]].numpy(),
            self.values[keep].numpy(),
            (self.n_rows, int(mask.sum())),
            self.row_names,
            names,
        )

    def equals(self, other: "CountMatrix") -> bool:
        return (
            self.shape == other.shape
            and torch.equal(self.dense(), other.dense())
            and self.row_names == other.row_names
            and self.col_names == other.col_names
        )

    def __repr__(self) -> str:
        return f"CountMatrix(n_rows={self.n_rows}, n_cols={self.n_cols}, nnz={self.nnz})"


def _check_names(names: list[str] | None, size: int, prefix: str, what: str) -> list[str]:
    if names is None:
        return [f"{prefix}{i + 1}" for i in range(size)]
    names = [str(name) for name in names]
    if len(names) != size:
        raise InputError(f"Got {len(names)} {what} names for {size} {what}s")
    return names


def as_count_matrix(x: CountMatrix | torch.Tensor | np.ndarray) -> CountMatrix:
    if isinstance(x, CountMatrix):
        return x
    return CountMatrix.from_dense(x)


def read_csv(path: str | Path) -> CountMatrix:
    path = Path(path)
    try:
        header = pd.read_csv(path, nrows=0).columns
        frame = pd.read_csv(path, dtype={header[0]: str}).set_index(header[0])
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, IndexError) as e:
        raise InputError(f"Cannot read count matrix from {path}: {e}") from e
    try:
        values = frame.to_numpy(dtype=np.float64)
    except ValueError as e:
        raise InputError(f"Non-numeric entries in {path}: {e}") from e
    if np.isnan(values).any():
        raise InputError(f"Missing entries in {path}")
    return CountMatrix.from_dense(
        values, row_names=list(frame.index), col_names=list(frame.columns)
    )


def write_csv(x: CountMatrix, path: str | Path) -> None:
    frame = pd.DataFrame(
        x.dense().numpy().astype(np.int64), index=x.row_names, columns=x.col_names
    )
    frame.to_csv(path, index_label="cell")


def sidecar_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_name("cells.txt"), path.with_name("genes.txt")


def read_mtx(
    path: str | Path, row_names_path: str | Path | None = None, col_names_path: str | Path | None = None
) -> CountMatrix:
    path = Path(path)
    default_rows, default_cols = sidecar_paths(path)
    row_names_path = Path(row_names_path) if row_names_path else default_rows
    col_names_path = Path(col_names_path) if col_names_path else default_cols
    try:
        matrix = scipy.io.mmread(path)
    except (OSError, ValueError) as e:
        raise InputError(f"Cannot read Matrix Market file {path}: {e}") from e
    row_names = _read_names(row_names_path)
    col_names = _read_names(col_names_path)
    if isinstance(matrix, np.ndarray):
        return CountMatrix.from_dense(matrix, row_names, col_names)
    return CountMatrix.from_scipy(matrix, row_names, col_names)


def write_mtx(x: CountMatrix, path: str | Path) -> None:
    path = Path(path)
    scipy.io.mmwrite(path, x.to_scipy(), field="integer", symmetry="general")
    rows_path, cols_path = sidecar_paths(path)
    rows_path.write_text("\n".join(x.row_names) + "\n")
    cols_path.write_text("\n".join(x.col_names) + "\n")


def _read_names(path: Path) -> list[str] | None:
    if not path.exists():
        return None
    return [line for line in path.read_text().splitlines() if line != ""]


def read_matrix(path: str | Path) -> CountMatrix:
    path = Path(path)
    if not path.exists():
        raise InputError(f"Input file {path} does not exist")
    if path.suffix == ".mtx":
        return read_mtx(path)
    return read_csv(path)


def write_matrix(x: CountMatrix, path: str | Path) -> None:
    if Path(path).suffix == ".mtx":
        write_mtx(x, path)
    else:
        write_csv(x, path)
