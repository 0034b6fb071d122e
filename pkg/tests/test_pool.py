import numpy as np
import pytest

from xsvd import (
    BlockPool,
    BlockStore,
    BudgetError,
    DenseBlock,
    MemoryBudget,
    Precision,
    matrix_from_coo,
    matrix_from_dense,
)
from xsvd.pool import create_matrix

from conftest import make_dense, make_sparse


def test_tracker_accounts_peaks(pool):
    t = pool.tracker
    t.alloc("a", 100)
    t.alloc("a", 50)
    t.alloc("b", 30)
    t.free("a", 50)
    assert t.current["a"] == 100
    assert t.matrix_peak("a") == 150
    assert t.global_peak == 180
    assert t.global_current == 130


def test_register_is_idempotent(pool):
    rng = np.random.default_rng(0)
    m = make_dense(pool, "m", rng.standard_normal((4, 4)))
    again = pool.register(m.desc)
    assert again is pool.descriptor("m")


def test_cell_reads_cross_tile_boundaries(pool):
    rng = np.random.default_rng(1)
    a = rng.standard_normal((10, 12))
    m = make_dense(pool, "m", a, grid=(3, 4))
    assert np.array_equal(m.read_cell_dense(2, 9, 1, 11), a[2:9, 1:11])
    assert np.array_equal(m.read_cell_dense(0, 10, 0, 12), a)


def test_cell_writes_cross_tile_boundaries(pool):
    a = np.zeros((9, 9))
    m = make_dense(pool, "m", a, grid=(3, 3))
    patch = np.arange(20.0).reshape(4, 5)
    m.write_cell_dense(2, 6, 3, 8, patch)
    a[2:6, 3:8] = patch
    assert np.array_equal(m.to_array(), a)


def test_sparse_cell_reads(pool):
    rng = np.random.default_rng(2)
    a = np.zeros((8, 8))
    a[1, 2], a[5, 7], a[7, 0] = 3.0, -1.0, 9.0
    m = make_sparse(pool, "s", a, grid=(2, 2))
    rr, cc, vv = m.read_cell_sparse(1, 6, 0, 8)
    got = sorted(zip(rr.tolist(), cc.tolist(), vv.tolist()))
    assert got == [(1, 2, 3.0), (5, 7, -1.0)]


def test_transposed_view_reads(pool):
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 4))
    m = make_dense(pool, "m", a, grid=(2, 2))
    t = m.T
    assert t.shape == (4, 6)
    assert np.array_equal(t.read_cell_dense(0, 4, 0, 6), a.T)
    assert np.array_equal(t.read_cell_dense(1, 3, 2, 5), a.T[1:3, 2:5])
    assert np.array_equal(m.T.T.to_array(), a)


def test_frobenius_matches_numpy(pool):
    rng = np.random.default_rng(4)
    a = rng.standard_normal((15, 7))
    m = make_dense(pool, "m", a, grid=(4, 2))
    assert np.isclose(m.frobenius_sq(), np.sum(a * a), rtol=1e-13)
    s = make_sparse(pool, "s", np.where(np.abs(a) > 1, a, 0.0))
    assert np.isclose(s.frobenius_sq(), np.sum(np.where(np.abs(a) > 1, a, 0.0) ** 2), rtol=1e-13)


def test_budget_eviction_keeps_resident_bytes_bounded(tmp_path):
    limit = 4 * 50 * 8  # four 50-scalar rows of doubles
    pool = BlockPool(
        store=BlockStore(str(tmp_path / "w")),
        budget=MemoryBudget(per_matrix=limit),
    )
    rng = np.random.default_rng(5)
    a = rng.standard_normal((40, 50))
    mat = matrix_from_dense(pool, "m", a, precision=Precision.DOUBLE)
    assert pool.tracker.matrix_peak("m") <= limit
    # all tiles still readable after eviction round trips
    assert np.array_equal(mat.to_array(), a)
    assert pool.tracker.matrix_peak("m") <= limit
    pool.close()


def test_over_limit_without_store_raises(pool):
    pool.budget = MemoryBudget(per_matrix=64)
    with pytest.raises(BudgetError):
        make_dense(pool, "m", np.zeros((100, 100)))


def test_flush_persists_dirty_tiles(tmp_path):
    store = BlockStore(str(tmp_path / "w"))
    pool = BlockPool(store=store)
    rng = np.random.default_rng(6)
    a = rng.standard_normal((6, 6))
    mat = matrix_from_dense(pool, "m", a, precision=Precision.DOUBLE)
    pool.flush_matrix("m")
    assert store.has_block("m", 0, 0)
    assert np.array_equal(store.load_block("m", 0, 0).values, a)
    pool.close()


def test_drop_matrix_forgets_and_optionally_deletes(tmp_path):
    store = BlockStore(str(tmp_path / "w"))
    pool = BlockPool(store=store)
    mat = matrix_from_dense(pool, "m", np.ones((3, 3)), precision=Precision.DOUBLE)
    pool.flush_matrix("m")
    pool.drop_matrix("m", delete_files=True)
    assert not store.has_block("m", 0, 0)
    assert "m" not in pool.known_matrices()
    pool.close()


def test_pinned_tiles_survive_pressure(tmp_path):
    # 2x4 double tiles are 64 bytes; limit holds exactly two of the eight
    pool = BlockPool(
        store=BlockStore(str(tmp_path / "w")),
        budget=MemoryBudget(per_matrix=128),
    )
    rng = np.random.default_rng(7)
    a = rng.standard_normal((8, 8))
    mat = make_dense(pool, "m", a, grid=(4, 2))
    pool.flush_matrix("m", evict=True)
    first = mat.tile(0, 0, pin=True)
    # cycling every other tile through the one free slot cannot evict it
    for ti in range(mat.desc.partition.n_row_tiles):
        for tj in range(mat.desc.partition.n_col_tiles):
            if (ti, tj) != (0, 0):
                mat.tile(ti, tj)
    assert np.array_equal(first.values, a[0:2, 0:4])
    pool.unpin("m", 0, 0)
    pool.close()


def test_reload_after_eviction_is_bitwise(tmp_path):
    pool = BlockPool(
        store=BlockStore(str(tmp_path / "w")),
        budget=MemoryBudget(per_matrix=256),
    )
    rng = np.random.default_rng(8)
    a = rng.standard_normal((16, 16))
    mat = matrix_from_dense(pool, "m", a, precision=Precision.DOUBLE)
    pool.flush_matrix("m", evict=True)
    assert np.array_equal(mat.to_array(), a)
    pool.close()


def test_create_matrix_partition_respects_budget(tmp_path):
    pool = BlockPool(
        store=BlockStore(str(tmp_path / "w")),
        budget=MemoryBudget(per_matrix=1024),
    )
    mat = create_matrix(pool, "m", 128, 128, precision=Precision.DOUBLE)
    th, tw = mat.desc.partition.max_tile_shape()
    assert th * tw * 8 <= 1024
    pool.close()


def test_matrix_from_coo_duplicates_are_summed(pool):
    m = matrix_from_coo(pool, "s", 3, 3,
                        [0, 2, 0], [0, 1, 0], [1.5, -2.0, 2.5],
                        precision=Precision.DOUBLE)
    ref = np.zeros((3, 3))
    ref[0, 0], ref[2, 1] = 4.0, -2.0
    assert np.array_equal(m.to_array(), ref)
    assert m.desc.nnz == 2


def test_half_precision_cell_reads_keep_storage_dtype(pool):
    a = np.array([[1.0, 2.5], [-0.125, 300.0]])
    m = make_dense(pool, "h", a, precision=Precision.HALF)
    cell = m.read_cell_dense(0, 2, 0, 2)
    assert cell.dtype == np.float16
    assert np.array_equal(cell, a.astype(np.float16))
    assert m.to_array().dtype == np.float16
