import numpy as np
import pytest

from xsvd import (
    BlockPartition,
    BlockPool,
    BlockStore,
    Density,
    DenseBlock,
    MatrixDescriptor,
    Precision,
    SparseBlock,
    StoredMatrix,
)


@pytest.fixture
def pool():
    """In-core pool, no budget, no store."""
    return BlockPool()


@pytest.fixture
def stored_pool(tmp_path):
    p = BlockPool(store=BlockStore(str(tmp_path / "work")))
    yield p
    p.close()


def make_dense(pool, matrix_id, array, *, precision=Precision.DOUBLE, grid=None):
    """Pooled dense matrix with an explicit tile grid (default: one tile)."""
    array = np.asarray(array)
    m, n = array.shape
    if grid is None:
        part = BlockPartition.single(m, n)
    else:
        part = BlockPartition.grid(m, n, min(grid[0], m), min(grid[1], n))
    desc = MatrixDescriptor(
        matrix_id=matrix_id,
        rows=m,
        cols=n,
        density=Density.DENSE,
        precision=precision,
        partition=part,
    )
    desc = pool.register(desc)
    mat = StoredMatrix(desc, pool)
    dtype = precision.storage_dtype
    for ti in range(part.n_row_tiles):
        r0, r1 = part.row_span(ti)
        for tj in range(part.n_col_tiles):
            c0, c1 = part.col_span(tj)
            mat.set_tile(ti, tj, DenseBlock(
                r0, r1, c0, c1,
                np.ascontiguousarray(array[r0:r1, c0:c1], dtype=dtype),
            ))
    return mat


def make_sparse(pool, matrix_id, array, *, precision=Precision.DOUBLE, grid=None):
    """Pooled sparse matrix holding the nonzeros of `array`."""
    array = np.asarray(array)
    m, n = array.shape
    rr, cc = np.nonzero(array)
    if grid is None:
        part = BlockPartition.single(m, n)
    else:
        part = BlockPartition.grid(m, n, min(grid[0], m), min(grid[1], n))
    desc = MatrixDescriptor(
        matrix_id=matrix_id,
        rows=m,
        cols=n,
        density=Density.SPARSE,
        precision=precision,
        partition=part,
        nnz=len(rr),
    )
    desc = pool.register(desc)
    mat = StoredMatrix(desc, pool)
    idt = desc.index_width.dtype
    vdt = precision.storage_dtype
    vals = array[rr, cc]
    for ti in range(part.n_row_tiles):
        r0, r1 = part.row_span(ti)
        for tj in range(part.n_col_tiles):
            c0, c1 = part.col_span(tj)
            mask = (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)
            tr, tc, tv = rr[mask], cc[mask], vals[mask]
            order = np.lexsort((tc, tr))
            mat.set_tile(ti, tj, SparseBlock(
                r0, r1, c0, c1,
                tr[order].astype(idt), tc[order].astype(idt),
                np.ascontiguousarray(tv[order], dtype=vdt),
            ))
    return mat


def random_sparse_array(rng, m, n, fill=0.3):
    """Dense array where roughly `fill` of the entries are nonzero."""
    a = rng.standard_normal((m, n))
    a[rng.random((m, n)) >= fill] = 0.0
    return a
