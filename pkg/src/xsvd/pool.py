"""Resident-block management: budgets, eviction, and matrix handles.

The pool is the single gate for block residency. Every byte of block payload
held in memory is accounted against its matrix's effective limit and the
global limit; loads and puts evict least-recently-used unpinned blocks until
the new block fits. Planner-issued eviction directives run first at step
boundaries; LRU is the fallback inside a step.

Dirty evictions go to a background writer (the low-priority I/O lane), so
compute only waits for a write when it actually needs the space. Bytes stay
accounted until the write completes; the instrumented peaks are real RAM.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    CANONICAL_CELL,
    BlockPartition,
    Density,
    DenseBlock,
    MatrixDescriptor,
    SparseBlock,
    coo_combine,
    sparse_range_query,
    transpose_view,
)
from .errors import BlockAbsentError, BudgetError, ShapeError
from .planner import MemoryBudget


class MemoryTracker:
    """Byte accounting with high-water marks, per matrix and global."""

    def __init__(self):
        self.current: dict[str, int] = {}
        self.peak: dict[str, int] = {}
        self.global_current = 0
        self.global_peak = 0

    def alloc(self, matrix_id: str, nbytes: int):
        cur = self.current.get(matrix_id, 0) + nbytes
        self.current[matrix_id] = cur
        self.peak[matrix_id] = max(self.peak.get(matrix_id, 0), cur)
        self.global_current += nbytes
        self.global_peak = max(self.global_peak, self.global_current)

    def free(self, matrix_id: str, nbytes: int):
        self.current[matrix_id] = self.current.get(matrix_id, 0) - nbytes
        self.global_current -= nbytes

    def matrix_peak(self, matrix_id: str) -> int:
        return self.peak.get(matrix_id, 0)


class _IOLane(threading.Thread):
    """Single background writer draining eviction writes in FIFO order."""

    def __init__(self):
        super().__init__(daemon=True, name="xsvd-io-lane")
        self.tasks: queue.Queue = queue.Queue()
        self.error: Exception | None = None
        self.start()

    def run(self):
        while True:
            fn, on_done = self.tasks.get()
            if fn is None:
                self.tasks.task_done()
                return
            try:
                fn()
            except Exception as e:  # surfaced at the next pool operation
                self.error = self.error or e
            finally:
                on_done()
                self.tasks.task_done()

    def submit(self, fn, on_done):
        self.tasks.put((fn, on_done))

    def stop(self):
        self.tasks.put((None, lambda: None))


@dataclass
class _Entry:
    block: object
    nbytes: int
    dirty: bool
    pins: int = 0
    seq: int = 0


class BlockPool:
    def __init__(self, store=None, budget: MemoryBudget | None = None):
        self.store = store
        self.budget = budget or MemoryBudget()
        self.tracker = MemoryTracker()
        self._entries: dict[tuple[str, int, int], _Entry] = {}
        self._limits: dict[str, int | None] = {}
        self._descs: dict[str, MatrixDescriptor] = {}
        self._inflight: dict[str, int] = {}  # matrix_id -> bytes being written out
        self._cond = threading.Condition()
        self._seq = 0
        self._lane = _IOLane() if store is not None else None

    # -- registration ------------------------------------------------------

    def register(self, desc: MatrixDescriptor) -> MatrixDescriptor:
        with self._cond:
            if desc.matrix_id not in self._descs:
                self._limits[desc.matrix_id] = self.budget.limit_for()
                self._descs[desc.matrix_id] = desc
            return self._descs[desc.matrix_id]

    def descriptor(self, matrix_id: str) -> MatrixDescriptor:
        return self._descs[matrix_id]

    def update_descriptor(self, desc: MatrixDescriptor):
        """Replace a registered descriptor (e.g. once the exact nnz is known)."""
        if desc.matrix_id not in self._descs:
            raise KeyError(desc.matrix_id)
        self._descs[desc.matrix_id] = desc
        if self.store is not None:
            self.store.save_descriptor(desc)

    def known_matrices(self) -> dict[str, MatrixDescriptor]:
        with self._cond:
            return dict(self._descs)

    def limit_of(self, matrix_id: str) -> int | None:
        return self._limits.get(matrix_id)

    # -- internals ---------------------------------------------------------

    def _matrix_bytes(self, matrix_id: str) -> int:
        return self.tracker.current.get(matrix_id, 0)

    def _check_lane(self):
        if self._lane is not None and self._lane.error is not None:
            err, self._lane.error = self._lane.error, None
            raise err

    def _pick_victim(self, matrix_id: str | None):
        best = None
        for key, e in self._entries.items():
            if e.pins > 0:
                continue
            if matrix_id is not None and key[0] != matrix_id:
                continue
            if best is None or e.seq < best[1].seq:
                best = (key, e)
        return best

    def _evict_entry(self, key, entry: _Entry):
        mid, ti, tj = key
        del self._entries[key]
        if entry.dirty:
            if self.store is None:
                raise BudgetError(
                    f"matrix {mid} exceeds its memory limit and the pool has no "
                    "workdir to spill to"
                )
            desc = self._descs.get(mid)
            if desc is not None and desc.residency == "in-core":
                self._descs[mid] = replace(desc, residency="out-of-core")
            self._inflight[mid] = self._inflight.get(mid, 0) + entry.nbytes
            block = entry.block

            def write():
                self.store.store_block(mid, ti, tj, block)

            def done():
                with self._cond:
                    self._inflight[mid] -= entry.nbytes
                    self.tracker.free(mid, entry.nbytes)
                    self._cond.notify_all()

            self._lane.submit(write, done)
        else:
            self.tracker.free(mid, entry.nbytes)

    def _make_room(self, matrix_id: str, nbytes: int):
        # runs under self._cond
        limit = self._limits.get(matrix_id)
        glimit = self.budget.global_limit

        def fits() -> bool:
            if limit is not None and self._matrix_bytes(matrix_id) + nbytes > limit:
                return False
            if glimit is not None and self.tracker.global_current + nbytes > glimit:
                return False
            return True

        stalls = 0
        while not fits():
            over_matrix = limit is not None and self._matrix_bytes(matrix_id) + nbytes > limit
            victim = self._pick_victim(matrix_id if over_matrix else None)
            if victim is None and over_matrix:
                victim = self._pick_victim(None) if glimit is not None else None
            if victim is not None:
                stalls = 0
                self._evict_entry(*victim)
                continue
            pinned = any(e.pins > 0 for e in self._entries.values())
            if any(self._inflight.values()) or (pinned and stalls < 240):
                # pins are transient (a writer mutating one tile); wait them out
                stalls += 1
                self._cond.wait(timeout=0.25)
                self._check_lane()
                continue
            raise BudgetError(
                f"cannot fit {nbytes} bytes for matrix {matrix_id}: "
                f"limit {limit}, resident {self._matrix_bytes(matrix_id)}, all blocks pinned"
            )

    # -- block access ------------------------------------------------------

    def put(self, matrix_id: str, ti: int, tj: int, block, *, dirty: bool = True):
        nbytes = block.nbytes
        with self._cond:
            self._check_lane()
            limit = self._limits.get(matrix_id)
            if limit is not None and nbytes > limit:
                raise BudgetError(
                    f"one tile of matrix {matrix_id} is {nbytes} bytes, over its {limit}-byte limit"
                )
            key = (matrix_id, ti, tj)
            old = self._entries.pop(key, None)
            if old is not None:
                self.tracker.free(matrix_id, old.nbytes)
            self._make_room(matrix_id, nbytes)
            self._seq += 1
            pins = old.pins if old is not None else 0
            self._entries[key] = _Entry(block, nbytes, dirty, pins=pins, seq=self._seq)
            self.tracker.alloc(matrix_id, nbytes)

    def _acquire(self, matrix_id: str, ti: int, tj: int, creator, dirty: bool, pin: bool):
        """Return the resident block, admitting it via `creator` if needed.

        Room-making can release the lock to wait on writes, so after it
        returns we re-check whether another thread admitted the block first.
        """
        with self._cond:
            self._check_lane()
            key = (matrix_id, ti, tj)
            while True:
                entry = self._entries.get(key)
                if entry is not None:
                    self._seq += 1
                    entry.seq = self._seq
                    if pin:
                        entry.pins += 1
                    return entry.block
                block = creator()
                self._make_room(matrix_id, block.nbytes)
                if key in self._entries:
                    continue
                self._seq += 1
                entry = _Entry(block, block.nbytes, dirty, pins=1 if pin else 0, seq=self._seq)
                self._entries[key] = entry
                self.tracker.alloc(matrix_id, block.nbytes)
                return block

    def get(self, matrix_id: str, ti: int, tj: int, *, pin: bool = False):
        def load():
            if self.store is None:
                raise BlockAbsentError(f"block {matrix_id}[{ti},{tj}] not resident (no store)")
            self._wait_inflight(matrix_id)
            return self.store.load_block(matrix_id, ti, tj)

        return self._acquire(matrix_id, ti, tj, load, dirty=False, pin=pin)

    def get_or_create_dense(
        self, matrix_id: str, ti: int, tj: int, span, dtype, *, pin: bool = False
    ):
        """Fetch a tile, falling back to a zero-filled dense tile if it does
        not exist anywhere yet. Atomic, so concurrent writers of disjoint
        regions of one tile cannot double-create it."""
        r0, r1, c0, c1 = span

        def load_or_zero():
            if self.store is not None:
                self._wait_inflight(matrix_id)
                try:
                    return self.store.load_block(matrix_id, ti, tj)
                except BlockAbsentError:
                    pass
            return DenseBlock(r0, r1, c0, c1, np.zeros((r1 - r0, c1 - c0), dtype=dtype))

        return self._acquire(matrix_id, ti, tj, load_or_zero, dirty=True, pin=pin)

    def unpin(self, matrix_id: str, ti: int, tj: int):
        with self._cond:
            entry = self._entries.get((matrix_id, ti, tj))
            if entry is not None and entry.pins > 0:
                entry.pins -= 1
                if entry.pins == 0:
                    self._cond.notify_all()

    def _wait_inflight(self, matrix_id: str):
        # a queued eviction write must land before we re-read that matrix
        while self._inflight.get(matrix_id, 0) > 0:
            self._cond.wait(timeout=5.0)
            self._check_lane()

    # -- lifecycle ---------------------------------------------------------

    def flush_matrix(self, matrix_id: str, *, evict: bool = False):
        """Synchronously persist the matrix's dirty blocks; optionally drop
        them from memory. On return every block of the matrix is durable,
        which is what step completion records rely on."""
        with self._cond:
            self._check_lane()
            self._wait_inflight(matrix_id)
            for key in sorted(k for k in self._entries if k[0] == matrix_id):
                entry = self._entries[key]
                if entry.dirty:
                    if self.store is None:
                        raise BudgetError("cannot persist blocks without a workdir")
                    self.store.store_block(key[0], key[1], key[2], entry.block)
                    entry.dirty = False
                if evict and entry.pins == 0:
                    del self._entries[key]
                    self.tracker.free(matrix_id, entry.nbytes)
            if evict:
                desc = self._descs.get(matrix_id)
                if desc is not None and desc.residency == "in-core":
                    self._descs[matrix_id] = replace(desc, residency="out-of-core")

    def drop_matrix(self, matrix_id: str, *, delete_files: bool = False):
        """Forget a matrix entirely (scratch disposal); optionally remove its files."""
        with self._cond:
            self._wait_inflight(matrix_id)
            for key in [k for k in self._entries if k[0] == matrix_id]:
                e = self._entries.pop(key)
                self.tracker.free(matrix_id, e.nbytes)
            self._descs.pop(matrix_id, None)
            self._limits.pop(matrix_id, None)
        if delete_files and self.store is not None:
            self.store.delete_matrix_blocks(matrix_id)

    def drain(self):
        """Wait for all queued writes; re-raise any background error."""
        if self._lane is not None:
            self._lane.tasks.join()
        with self._cond:
            self._check_lane()

    def close(self):
        if self._lane is not None:
            self.drain()
            self._lane.stop()
            self._lane = None


class StoredMatrix:
    """Handle on one matrix: descriptor plus the pool holding its blocks."""

    def __init__(self, desc: MatrixDescriptor, pool: BlockPool):
        self.desc = desc
        self.pool = pool

    # -- basics ------------------------------------------------------------

    @property
    def matrix_id(self) -> str:
        return self.desc.matrix_id

    @property
    def shape(self) -> tuple[int, int]:
        return self.desc.shape

    @property
    def T(self) -> "StoredMatrix":
        return StoredMatrix(transpose_view(self.desc), self.pool)

    def tile(self, ti: int, tj: int, *, pin: bool = False):
        return self.pool.get(self.matrix_id, ti, tj, pin=pin)

    def set_tile(self, ti: int, tj: int, block):
        self.pool.put(self.matrix_id, ti, tj, block)

    def _canonical_range(self, r0, r1, c0, c1):
        if self.desc.transposed:
            return c0, c1, r0, r1
        return r0, r1, c0, c1

    # -- cell reads (view coordinates) ------------------------------------

    def read_cell_dense(self, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
        """Copy of the view-rectangle as a storage-dtype array."""
        if self.desc.density is not Density.DENSE:
            raise ShapeError("dense cell read on a sparse matrix")
        cr0, cr1, cc0, cc1 = self._canonical_range(r0, r1, c0, c1)
        part = self.desc.partition
        out = np.empty((r1 - r0, c1 - c0), dtype=self.desc.precision.storage_dtype)
        ti0, ti1 = part.locate_row(cr0), part.locate_row(cr1 - 1)
        tj0, tj1 = part.locate_col(cc0), part.locate_col(cc1 - 1)
        for ti in range(ti0, ti1 + 1):
            tr0, tr1 = part.row_span(ti)
            a0, a1 = max(tr0, cr0), min(tr1, cr1)
            for tj in range(tj0, tj1 + 1):
                tc0, tc1 = part.col_span(tj)
                b0, b1 = max(tc0, cc0), min(tc1, cc1)
                block = self.tile(ti, tj)
                piece = block.values[a0 - tr0:a1 - tr0, b0 - tc0:b1 - tc0]
                if self.desc.transposed:
                    out[b0 - cc0:b1 - cc0, a0 - cr0:a1 - cr0] = piece.T
                else:
                    out[a0 - cr0:a1 - cr0, b0 - cc0:b1 - cc0] = piece
        return out

    def read_cell_sparse(self, r0: int, r1: int, c0: int, c1: int):
        """Entries of the view-rectangle, (rows, cols, values) in view coords,
        sorted by (row, col). Index arrays are int64."""
        cr0, cr1, cc0, cc1 = self._canonical_range(r0, r1, c0, c1)
        part = self.desc.partition
        rr, cc, vv = [], [], []
        ti0, ti1 = part.locate_row(cr0), part.locate_row(cr1 - 1)
        tj0, tj1 = part.locate_col(cc0), part.locate_col(cc1 - 1)
        for ti in range(ti0, ti1 + 1):
            for tj in range(tj0, tj1 + 1):
                block = self.tile(ti, tj)
                r, c, v = sparse_range_query(block, cr0, cr1, cc0, cc1)
                if len(v):
                    rr.append(r.astype(np.int64))
                    cc.append(c.astype(np.int64))
                    vv.append(v)
        if not vv:
            e = np.empty(0, dtype=np.int64)
            return e, e.copy(), np.empty(0, dtype=self.desc.precision.storage_dtype)
        rows = np.concatenate(rr)
        cols = np.concatenate(cc)
        vals = np.concatenate(vv)
        if self.desc.transposed:
            rows, cols = cols, rows
        order = np.lexsort((cols, rows))
        return rows[order], cols[order], vals[order]

    # -- cell writes (canonical orientation only) --------------------------

    def write_cell_dense(self, r0: int, r1: int, c0: int, c1: int, cell: np.ndarray):
        """Store a computed rectangle into the tiles it overlaps.

        Output matrices are built in canonical orientation; rectangles from
        one builder are disjoint, so this is an assignment, not an add.
        """
        if self.desc.transposed:
            raise ShapeError("cell writes target canonical matrices only")
        part = self.desc.partition
        dtype = self.desc.precision.storage_dtype
        ti0, ti1 = part.locate_row(r0), part.locate_row(r1 - 1)
        tj0, tj1 = part.locate_col(c0), part.locate_col(c1 - 1)
        for ti in range(ti0, ti1 + 1):
            tr0, tr1 = part.row_span(ti)
            a0, a1 = max(tr0, r0), min(tr1, r1)
            for tj in range(tj0, tj1 + 1):
                tc0, tc1 = part.col_span(tj)
                b0, b1 = max(tc0, c0), min(tc1, c1)
                block = self.pool.get_or_create_dense(
                    self.matrix_id, ti, tj, (tr0, tr1, tc0, tc1), dtype, pin=True
                )
                try:
                    block.values[a0 - tr0:a1 - tr0, b0 - tc0:b1 - tc0] = cell[
                        a0 - r0:a1 - r0, b0 - c0:b1 - c0
                    ]
                    # mutated in place: re-put so the entry is marked dirty
                    self.set_tile(ti, tj, block)
                finally:
                    self.pool.unpin(self.matrix_id, ti, tj)

    # -- whole-matrix helpers ---------------------------------------------

    def to_array(self) -> np.ndarray:
        """Materialize the full (view-aware) matrix. Test/debug scale only."""
        rows, cols = self.shape
        if self.desc.density is Density.DENSE:
            return self.read_cell_dense(0, rows, 0, cols)
        out = np.zeros((rows, cols), dtype=self.desc.precision.storage_dtype)
        r, c, v = self.read_cell_sparse(0, rows, 0, cols)
        np.add.at(out, (r, c), v)
        return out

    def frobenius_sq(self) -> float:
        """Sum of squared entries, accumulated over the canonical cell grid in
        a fixed order so the result is identical under any partition."""
        rows, cols = self.shape
        total = 0.0
        for r0 in range(0, rows, CANONICAL_CELL):
            r1 = min(rows, r0 + CANONICAL_CELL)
            for c0 in range(0, cols, CANONICAL_CELL):
                c1 = min(cols, c0 + CANONICAL_CELL)
                if self.desc.density is Density.DENSE:
                    cell = self.read_cell_dense(r0, r1, c0, c1).astype(np.float64)
                    total += float(np.sum(cell * cell))
                else:
                    _, _, v = self.read_cell_sparse(r0, r1, c0, c1)
                    v = v.astype(np.float64)
                    total += float(np.sum(v * v))
        return total

    def flush(self, *, evict: bool = False):
        self.pool.flush_matrix(self.matrix_id, evict=evict)


def create_matrix(
    pool: BlockPool,
    matrix_id: str,
    rows: int,
    cols: int,
    *,
    precision,
    density: Density = Density.DENSE,
    nnz: int | None = None,
) -> StoredMatrix:
    """Register a fresh matrix, partitioned for its effective budget."""
    from .core import IndexWidth
    from .planner import partition_for_budget

    limit = pool.budget.limit_for()
    iw = IndexWidth.for_shape(rows, cols)
    part = partition_for_budget(
        rows,
        cols,
        precision=precision,
        density=density,
        nnz=nnz or 0,
        index_width=iw,
        limit=limit,
    )
    desc = MatrixDescriptor(
        matrix_id=matrix_id,
        rows=rows,
        cols=cols,
        density=density,
        precision=precision,
        index_width=iw,
        partition=part,
        nnz=nnz if nnz is not None else (rows * cols if density is Density.DENSE else 0),
    )
    desc = pool.register(desc)
    if pool.store is not None:
        pool.store.save_descriptor(desc)
    return StoredMatrix(desc, pool)


def matrix_from_dense(
    pool: BlockPool, matrix_id: str, array: np.ndarray, *, precision
) -> StoredMatrix:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ShapeError(f"expected a 2-d array, got shape {array.shape}")
    mat = create_matrix(
        pool, matrix_id, array.shape[0], array.shape[1], precision=precision
    )
    dtype = precision.storage_dtype
    part = mat.desc.partition
    for ti in range(part.n_row_tiles):
        r0, r1 = part.row_span(ti)
        for tj in range(part.n_col_tiles):
            c0, c1 = part.col_span(tj)
            vals = np.ascontiguousarray(array[r0:r1, c0:c1], dtype=dtype)
            mat.set_tile(ti, tj, DenseBlock(r0, r1, c0, c1, vals))
    return mat


def matrix_from_coo(
    pool: BlockPool,
    matrix_id: str,
    rows: int,
    cols: int,
    coo_rows: np.ndarray,
    coo_cols: np.ndarray,
    coo_values: np.ndarray,
    *,
    precision,
) -> StoredMatrix:
    """Build a sparse matrix from unordered coordinate triplets.

    Duplicate (row, col) pairs are summed, the standard COO assembly rule.
    """
    vdt = precision.storage_dtype
    r = np.asarray(coo_rows, dtype=np.int64)
    c = np.asarray(coo_cols, dtype=np.int64)
    v = np.asarray(coo_values, dtype=vdt)
    r, c, v = coo_combine(r, c, v)
    mat = create_matrix(
        pool,
        matrix_id,
        rows,
        cols,
        precision=precision,
        density=Density.SPARSE,
        nnz=len(v),
    )
    part = mat.desc.partition
    idt = mat.desc.index_width.dtype
    for ti in range(part.n_row_tiles):
        r0, r1 = part.row_span(ti)
        lo, hi = np.searchsorted(r, r0), np.searchsorted(r, r1)
        band_r, band_c, band_v = r[lo:hi], c[lo:hi], v[lo:hi]
        for tj in range(part.n_col_tiles):
            c0, c1 = part.col_span(tj)
            mask = (band_c >= c0) & (band_c < c1)
            tr, tc, tv = band_r[mask], band_c[mask], band_v[mask]
            block = SparseBlock(
                r0, r1, c0, c1,
                tr.astype(idt), tc.astype(idt), np.ascontiguousarray(tv, dtype=vdt),
            )
            mat.set_tile(ti, tj, block)
    return mat
