"""Matrix descriptors, block containers, and precision/index-width handling.

A matrix is a descriptor plus a grid of blocks. Blocks store either a dense
row-major tile or a sparse structure-of-arrays tile; both carry their row and
column ranges in parent coordinates. Transposition is a descriptor flag, never
a data movement: the canonical storage is untouched and views swap index roles
on access.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, ShapeError

# Side of the fixed compute grid. Every multiply, norm, and factorization
# walks matrices in cells of this size regardless of how blocks are cut on
# disk, which is what makes results reproducible across memory budgets.
CANONICAL_CELL = 256


class Precision(enum.Enum):
    HALF = "half"
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def nbytes(self) -> int:
        return {Precision.HALF: 2, Precision.SINGLE: 4, Precision.DOUBLE: 8}[self]

    @property
    def storage_dtype(self):
        return {
            Precision.HALF: np.dtype("<f2"),
            Precision.SINGLE: np.dtype("<f4"),
            Precision.DOUBLE: np.dtype("<f8"),
        }[self]

    @property
    def compute_dtype(self):
        # half is storage-only; arithmetic widens it to single
        return np.dtype("<f4") if self is not Precision.DOUBLE else np.dtype("<f8")

    @classmethod
    def parse(cls, name: str) -> "Precision":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown precision {name!r}") from None


def wider(a: Precision, b: Precision) -> Precision:
    order = [Precision.HALF, Precision.SINGLE, Precision.DOUBLE]
    return a if order.index(a) >= order.index(b) else b


class IndexWidth(enum.Enum):
    I32 = 32
    I64 = 64

    @property
    def nbytes(self) -> int:
        return self.value // 8

    @property
    def dtype(self):
        return np.dtype("<u4") if self is IndexWidth.I32 else np.dtype("<u8")

    @classmethod
    def for_shape(cls, rows: int, cols: int) -> "IndexWidth":
        return cls.I32 if max(rows, cols) < 2 ** 32 else cls.I64


class Density(enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class BlockPartition:
    """Equal-cut tile grid: cut points along each axis, endpoints included."""

    row_cuts: tuple[int, ...]
    col_cuts: tuple[int, ...]

    @staticmethod
    def _cuts(extent: int, pieces: int) -> tuple[int, ...]:
        pieces = max(1, min(pieces, max(extent, 1)))
        q, rem = divmod(extent, pieces)
        sizes = [q + 1] * rem + [q] * (pieces - rem)
        cuts = [0]
        for s in sizes:
            cuts.append(cuts[-1] + s)
        return tuple(cuts)

    @classmethod
    def grid(cls, rows: int, cols: int, n_row: int, n_col: int) -> "BlockPartition":
        return cls(cls._cuts(rows, n_row), cls._cuts(cols, n_col))

    @classmethod
    def single(cls, rows: int, cols: int) -> "BlockPartition":
        return cls((0, rows), (0, cols))

    @property
    def n_row_tiles(self) -> int:
        return len(self.row_cuts) - 1

    @property
    def n_col_tiles(self) -> int:
        return len(self.col_cuts) - 1

    def row_span(self, i: int) -> tuple[int, int]:
        return self.row_cuts[i], self.row_cuts[i + 1]

    def col_span(self, j: int) -> tuple[int, int]:
        return self.col_cuts[j], self.col_cuts[j + 1]

    def max_tile_shape(self) -> tuple[int, int]:
        rmax = max(b - a for a, b in zip(self.row_cuts, self.row_cuts[1:]))
        cmax = max(b - a for a, b in zip(self.col_cuts, self.col_cuts[1:]))
        return rmax, cmax

    def locate_row(self, r: int) -> int:
        return bisect.bisect_right(self.row_cuts, r) - 1

    def locate_col(self, c: int) -> int:
        return bisect.bisect_right(self.col_cuts, c) - 1

    def transposed(self) -> "BlockPartition":
        return BlockPartition(self.col_cuts, self.row_cuts)

    def tiles(self):
        for i in range(self.n_row_tiles):
            for j in range(self.n_col_tiles):
                yield i, j


@dataclass
class MatrixDescriptor:
    """Identity and layout of one matrix.

    rows/cols/partition describe canonical storage; `transposed` marks a
    zero-copy view whose logical shape is the swap.
    """

    matrix_id: str
    rows: int
    cols: int
    density: Density
    precision: Precision
    index_width: IndexWidth = IndexWidth.I64
    transposed: bool = False
    residency: str = "in-core"
    partition: BlockPartition = None  # type: ignore[assignment]
    nnz: int = 0

    def __post_init__(self):
        if self.partition is None:
            self.partition = BlockPartition.single(self.rows, self.cols)
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"matrix {self.matrix_id}: empty shape {self.rows}x{self.cols}")
        if self.index_width is IndexWidth.I32 and max(self.rows, self.cols) >= 2 ** 32:
            raise ShapeError(
                f"matrix {self.matrix_id}: 32-bit indices cannot address "
                f"{self.rows}x{self.cols}"
            )
        if self.density is Density.DENSE:
            self.nnz = self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cols, self.rows) if self.transposed else (self.rows, self.cols)

    @property
    def view_partition(self) -> BlockPartition:
        return self.partition.transposed() if self.transposed else self.partition

    def payload_bytes(self) -> int:
        if self.density is Density.DENSE:
            return self.rows * self.cols * self.precision.nbytes
        return self.nnz * (self.precision.nbytes + 2 * self.index_width.nbytes)

    def to_json(self) -> dict:
        return {
            "matrix_id": self.matrix_id,
            "rows": self.rows,
            "cols": self.cols,
            "density": self.density.value,
            "precision": self.precision.value,
            "index_width": self.index_width.value,
            "transposed": self.transposed,
            "residency": self.residency,
            "row_cuts": list(self.partition.row_cuts),
            "col_cuts": list(self.partition.col_cuts),
            "nnz": self.nnz,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MatrixDescriptor":
        return cls(
            matrix_id=d["matrix_id"],
            rows=d["rows"],
            cols=d["cols"],
            density=Density(d["density"]),
            precision=Precision(d["precision"]),
            index_width=IndexWidth(d["index_width"]),
            transposed=d["transposed"],
            residency=d.get("residency", "in-core"),
            partition=BlockPartition(tuple(d["row_cuts"]), tuple(d["col_cuts"])),
            nnz=d["nnz"],
        )


def transpose_view(desc: MatrixDescriptor) -> MatrixDescriptor:
    """Flip the view flag. Shares storage; applying twice restores the original."""
    return replace(desc, transposed=not desc.transposed)


@dataclass
class DenseBlock:
    """Row-major dense tile over [row0, row1) x [col0, col1)."""

    row0: int
    row1: int
    col0: int
    col1: int
    values: np.ndarray

    def __post_init__(self):
        shape = (self.row1 - self.row0, self.col1 - self.col0)
        if self.values.shape != shape:
            raise ShapeError(f"dense block values {self.values.shape} != range {shape}")
        if not self.values.flags.c_contiguous:
            self.values = np.ascontiguousarray(self.values)

    @property
    def nbytes(self) -> int:
        return self.values.nbytes


@dataclass
class SparseBlock:
    """COO structure-of-arrays tile, entries sorted by (row, col), no duplicates.

    Indices are parent coordinates and must lie inside the block ranges.
    Explicit zeros are legitimate entries and are kept.
    """

    row0: int
    row1: int
    col0: int
    col1: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.validate()

    def validate(self):
        n = len(self.values)
        if len(self.rows) != n or len(self.cols) != n:
            raise FormatError("sparse block index/value arrays differ in length")
        if n == 0:
            return
        r = self.rows.astype(np.int64, copy=False)
        c = self.cols.astype(np.int64, copy=False)
        if r.min() < self.row0 or r.max() >= self.row1 or c.min() < self.col0 or c.max() >= self.col1:
            raise FormatError("sparse block entry outside its declared ranges")
        key = r * (self.col1 - self.col0 + 1) + (c - self.col0)
        if not np.all(np.diff(key) > 0):
            raise FormatError("sparse block entries not strictly (row, col) sorted")

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def nbytes(self) -> int:
        return self.values.nbytes + self.rows.nbytes + self.cols.nbytes


def coo_combine(rows: np.ndarray, cols: np.ndarray, values: np.ndarray):
    """Sort triples by (row, col) and sum duplicates. Returns new arrays.

    Summation order within a duplicate group follows the input order
    (lexsort is stable), so results are deterministic.
    """
    if len(values) == 0:
        return rows, cols, values
    order = np.lexsort((cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    boundary = np.empty(len(rows), dtype=bool)
    boundary[0] = True
    np.not_equal(rows[1:], rows[:-1], out=boundary[1:])
    boundary[1:] |= cols[1:] != cols[:-1]
    starts = np.flatnonzero(boundary)
    summed = np.add.reduceat(values, starts)
    return rows[starts], cols[starts], summed


def sparse_range_query(block: SparseBlock, r0: int, r1: int, c0: int, c1: int):
    """Entries of `block` inside [r0, r1) x [c0, c1) as (rows, cols, values).

    Binary search on the sorted row array bounds the scan, so an empty
    rectangle is detected without touching every entry.
    """
    # cast bounds to the index dtype: a Python int key would promote the
    # whole array to int64 on every call; parent coords always fit the width
    idx = block.rows.dtype.type
    lo = np.searchsorted(block.rows, idx(r0), side="left")
    hi = np.searchsorted(block.rows, idx(r1), side="left")
    if lo == hi:
        e = np.empty(0, dtype=block.rows.dtype)
        return e, e.copy(), np.empty(0, dtype=block.values.dtype)
    rows = block.rows[lo:hi]
    cols = block.cols[lo:hi]
    vals = block.values[lo:hi]
    mask = (cols >= c0) & (cols < c1)
    return rows[mask], cols[mask], vals[mask]


def dense_tiles_from_array(arr: np.ndarray, partition: BlockPartition, precision: Precision):
    """Yield (i, j, DenseBlock) tiles of a full array at the given precision."""
    arr = np.asarray(arr)
    for i in range(partition.n_row_tiles):
        r0, r1 = partition.row_span(i)
        for j in range(partition.n_col_tiles):
            c0, c1 = partition.col_span(j)
            tile = np.ascontiguousarray(arr[r0:r1, c0:c1], dtype=precision.storage_dtype)
            yield i, j, DenseBlock(r0, r1, c0, c1, tile)
