"""Block-wise compute kernels: multiply, thin QR, and the small-factor SVD.

Every kernel walks its operands on the fixed canonical cell grid, never on
the storage partition. Storage tiles are assembled into cells before any
arithmetic, so the floating-point operation sequence, and therefore the
result bytes, are identical whatever the memory budget cut the matrices
into. Parallel work is partitioned by output cell, with the inner-dimension
chunks of each cell always reduced in ascending order: thread count cannot
change results either.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import CANONICAL_CELL, Density, Precision, wider
from .errors import ConvergenceError, ShapeError
from .planner import CostEstimate, choose_threads, estimate_product
from .pool import BlockPool, StoredMatrix, create_matrix, matrix_from_dense


def _spans(extent: int, step: int = CANONICAL_CELL):
    return [(lo, min(extent, lo + step)) for lo in range(0, extent, step)]


# storage precision whose dtype equals the given compute dtype; scratch that
# must round-trip exactly (QR panel stashes) is stored at this precision
def _carrier(compute_dtype) -> Precision:
    return Precision.DOUBLE if compute_dtype == np.dtype("<f8") else Precision.SINGLE


@dataclass(frozen=True)
class ProductTask:
    """One output cell of a block product: rows [row0,row1) x cols [col0,col1)."""

    row0: int
    row1: int
    col0: int
    col1: int


@dataclass
class MultiplyStats:
    multiply_adds: int = 0
    skipped_cells: int = 0
    threads_used: int = 1
    estimate: CostEstimate | None = None


@dataclass
class QRResult:
    q: StoredMatrix
    r: np.ndarray
    deficient_columns: tuple[int, ...] = ()


@dataclass
class SmallSVDResult:
    u: np.ndarray  # r x r orthogonal
    s: np.ndarray  # r nonnegative, non-increasing
    v: np.ndarray  # n x r orthonormal columns


# -- multiply --------------------------------------------------------------


def _cell_accumulate(x, y, task: ProductTask, kk, cdt, acc, hits):
    """Accumulate x[task rows, :] @ y[:, task cols] into acc, k-chunks in
    ascending order. Returns (multiply_adds, skipped_chunks)."""
    r0, r1, c0, c1 = task.row0, task.row1, task.col0, task.col1
    x_dense = x.desc.density is Density.DENSE
    y_dense = y.desc.density is Density.DENSE
    ops = 0
    skipped = 0
    for k0, k1 in kk:
        if x_dense and y_dense:
            a = x.read_cell_dense(r0, r1, k0, k1).astype(cdt)
            b = y.read_cell_dense(k0, k1, c0, c1).astype(cdt)
            acc += a @ b
            ops += (r1 - r0) * (c1 - c0) * (k1 - k0)
        elif not x_dense and y_dense:
            er, ek, ev = x.read_cell_sparse(r0, r1, k0, k1)
            if len(ev) == 0:
                skipped += 1
                continue
            b = y.read_cell_dense(k0, k1, c0, c1).astype(cdt)
            ev = ev.astype(cdt)
            er = er.astype(np.int64) - r0
            ek = ek.astype(np.int64) - k0
            for s in range(0, len(ev), 8192):
                sl = slice(s, s + 8192)
                np.add.at(acc, er[sl], ev[sl, None] * b[ek[sl], :])
            ops += len(ev) * (c1 - c0)
        elif x_dense and not y_dense:
            ek, ec, ev = y.read_cell_sparse(k0, k1, c0, c1)
            if len(ev) == 0:
                skipped += 1
                continue
            a = x.read_cell_dense(r0, r1, k0, k1).astype(cdt)
            at = a.T
            ev = ev.astype(cdt)
            ek = ek.astype(np.int64) - k0
            ec = ec.astype(np.int64) - c0
            acc_t = acc.T
            for s in range(0, len(ev), 8192):
                sl = slice(s, s + 8192)
                np.add.at(acc_t, ec[sl], ev[sl, None] * at[ek[sl], :])
            ops += len(ev) * (r1 - r0)
        else:
            ar, ak, av = x.read_cell_sparse(r0, r1, k0, k1)
            if len(av) == 0:
                skipped += 1
                continue
            bk, bc, bv = y.read_cell_sparse(k0, k1, c0, c1)
            if len(bv) == 0:
                skipped += 1
                continue
            ak64 = ak.astype(np.int64)
            bk64 = bk.astype(np.int64)
            starts = np.searchsorted(bk64, ak64, side="left")
            ends = np.searchsorted(bk64, ak64, side="right")
            counts = ends - starts
            total = int(counts.sum())
            if total == 0:
                skipped += 1
                continue
            rep = np.repeat(np.arange(len(av)), counts)
            base = np.repeat(starts, counts)
            within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            gi = base + within
            rr = ar.astype(np.int64)[rep] - r0
            cc = bc.astype(np.int64)[gi] - c0
            vv = av.astype(cdt)[rep] * bv.astype(cdt)[gi]
            np.add.at(acc, (rr, cc), vv)
            if hits is not None:
                hits[rr, cc] = True
            ops += total
    return ops, skipped


def block_multiply(
    pool: BlockPool,
    x: StoredMatrix,
    y: StoredMatrix,
    out_id: str,
    *,
    threads: int = 1,
    out_precision: Precision | None = None,
) -> tuple[StoredMatrix, MultiplyStats]:
    """out = x @ y over the canonical cell grid.

    Density rule: sparse x sparse stays sparse, anything involving a dense
    operand is dense. Returns the product and the op-count bookkeeping.
    """
    m, k = x.shape
    k2, n = y.shape
    if k != k2:
        raise ShapeError(f"inner dimensions disagree: {x.shape} x {y.shape}")
    both_sparse = (
        x.desc.density is Density.SPARSE and y.desc.density is Density.SPARSE
    )
    prec = out_precision or wider(x.desc.precision, y.desc.precision)
    cdt = prec.compute_dtype
    est = estimate_product(x.desc, y.desc)
    nthreads = choose_threads(est.multiply_adds, threads)
    stats = MultiplyStats(threads_used=nthreads, estimate=est)

    kk = _spans(k)
    tasks = [
        ProductTask(r0, r1, c0, c1) for r0, r1 in _spans(m) for c0, c1 in _spans(n)
    ]

    if not both_sparse:
        out = create_matrix(pool, out_id, m, n, precision=prec, density=Density.DENSE)

        def run_dense(task: ProductTask):
            acc = np.zeros((task.row1 - task.row0, task.col1 - task.col0), dtype=cdt)
            ops, skipped = _cell_accumulate(x, y, task, kk, cdt, acc, None)
            out.write_cell_dense(
                task.row0, task.row1, task.col0, task.col1,
                acc.astype(prec.storage_dtype),
            )
            return ops, skipped

        results = _run_tasks(run_dense, tasks, nthreads)
        for ops, skipped in results:
            stats.multiply_adds += ops
            stats.skipped_cells += skipped
        return out, stats

    # sparse x sparse: gather per-cell entry lists first (bounded by output
    # nnz), then size the output partition from the exact count
    def run_sparse(task: ProductTask):
        shape = (task.row1 - task.row0, task.col1 - task.col0)
        acc = np.zeros(shape, dtype=cdt)
        hits = np.zeros(shape, dtype=bool)
        ops, skipped = _cell_accumulate(x, y, task, kk, cdt, acc, hits)
        ri, ci = np.nonzero(hits)
        vals = acc[ri, ci].astype(prec.storage_dtype)
        return ops, skipped, ri + task.row0, ci + task.col0, vals

    results = _run_tasks(run_sparse, tasks, nthreads)
    rows_l, cols_l, vals_l = [], [], []
    for ops, skipped, ri, ci, vals in results:
        stats.multiply_adds += ops
        stats.skipped_cells += skipped
        if len(vals):
            rows_l.append(ri)
            cols_l.append(ci)
            vals_l.append(vals)
    if rows_l:
        rows = np.concatenate(rows_l)
        cols = np.concatenate(cols_l)
        vals = np.concatenate(vals_l)
    else:
        rows = np.empty(0, dtype=np.int64)
        cols = np.empty(0, dtype=np.int64)
        vals = np.empty(0, dtype=prec.storage_dtype)
    from .pool import matrix_from_coo

    out = matrix_from_coo(
        pool, out_id, m, n, rows, cols, vals, precision=prec
    )
    return out, stats


def _run_tasks(fn, tasks, nthreads):
    """Results in task order regardless of completion order."""
    if nthreads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=nthreads) as ex:
        return list(ex.map(fn, tasks))


def gram(pool: BlockPool, b: StoredMatrix, out_id: str, *, threads: int = 1):
    """BᵀB through the ordinary block product of the transpose view with B."""
    return block_multiply(pool, b.T, b, out_id, threads=threads)


# -- thin QR ---------------------------------------------------------------


def _house(x: np.ndarray):
    """Householder vector (packed, v[0]=1) and beta for a 1-d input.

    (I - beta v vᵀ) x = ±‖x‖ e₁, following the numerically safe split on
    the sign of x[0]. Zero tail → beta 0 (x[0] ≥ 0) or 2 (x[0] < 0).
    """
    v = np.array(x, dtype=np.float64, copy=True)
    x0 = float(v[0])
    sigma = float(v[1:] @ v[1:])
    v[0] = 1.0
    if sigma == 0.0:
        return v, 0.0 if x0 >= 0.0 else 2.0
    mu = math.sqrt(x0 * x0 + sigma)
    if x0 <= 0.0:
        v0 = x0 - mu
    else:
        v0 = -sigma / (x0 + mu)
    beta = 2.0 * v0 * v0 / (sigma + v0 * v0)
    v[1:] /= v0
    return v, beta


def _householder_qr(s: np.ndarray):
    """In-place QR of s (rows x r, rows >= 1). Returns (R, V packed, betas)."""
    rows, r = s.shape
    V = np.zeros((rows, r), dtype=s.dtype)
    betas = np.zeros(r, dtype=np.float64)
    for j in range(min(r, rows)):
        v, beta = _house(s[j:, j])
        V[j:, j] = v
        betas[j] = beta
        if beta != 0.0:
            w = beta * (v @ s[j:, j:])
            s[j:, j:] -= np.outer(v, w)
    R = np.triu(s[:r, :r]).copy()
    return R, V, betas


def _apply_reflectors(V: np.ndarray, betas: np.ndarray, m: np.ndarray):
    """m <- (H_0 H_1 ... H_{r-1}) m, applying the packed reflectors."""
    for j in range(V.shape[1] - 1, -1, -1):
        beta = betas[j]
        if beta == 0.0:
            continue
        v = V[j:, j]
        w = beta * (v @ m[j:, :])
        m[j:, :] -= np.outer(v, w)
    return m


def thin_qr(pool: BlockPool, y: StoredMatrix, q_id: str) -> QRResult:
    """Orthonormalize a tall dense matrix, streaming fixed-height row panels.

    Forward pass: each panel is stacked under the running R and reduced by
    Householder QR; the packed reflectors are stashed through the pool (so
    they spill under tight budgets). Backward pass rebuilds the thin Q one
    panel at a time from an r x r carry. Only O(panel x r) floats are live.
    """
    m, r = y.shape
    if m < r or r < 1:
        raise ShapeError(f"thin QR needs rows >= cols >= 1, got {m}x{r}")
    # factor in float64 whatever the storage precision; panels are canonical
    # so the reflector sequence is partition-independent
    panel = max(r, CANONICAL_CELL)
    spans = _spans(m, panel)

    R = None
    stashes = []
    for idx, (p0, p1) in enumerate(spans):
        w = y.read_cell_dense(p0, p1, 0, r).astype(np.float64)
        stacked = w if R is None else np.vstack([R, w])
        R, V, betas = _householder_qr(stacked)
        stash = matrix_from_dense(
            pool,
            f"{q_id}#stash{idx}",
            np.vstack([V, betas[None, :]]),
            precision=Precision.DOUBLE,
        )
        stashes.append(stash)

    norm = float(np.sqrt(np.sum(R * R)))
    eps = float(np.finfo(y.desc.precision.compute_dtype).eps)
    deficient = tuple(
        int(i) for i in range(r) if abs(float(R[i, i])) <= eps * norm
    )

    q = create_matrix(pool, q_id, m, r, precision=y.desc.precision)
    sdt = y.desc.precision.storage_dtype
    carry = np.eye(r, dtype=np.float64)
    for idx in range(len(spans) - 1, -1, -1):
        p0, p1 = spans[idx]
        packed = stashes[idx].to_array()
        V, betas = packed[:-1, :], packed[-1, :]
        mbuf = np.zeros((V.shape[0], r), dtype=np.float64)
        mbuf[:r, :] = carry
        g = _apply_reflectors(V, betas, mbuf)
        if idx == 0:
            q.write_cell_dense(p0, p1, 0, r, g.astype(sdt))
        else:
            carry = g[:r, :].copy()
            q.write_cell_dense(p0, p1, 0, r, g[r:, :].astype(sdt))
    for stash in stashes:
        pool.drop_matrix(stash.matrix_id, delete_files=True)

    return QRResult(q=q, r=R, deficient_columns=deficient)


# -- small SVD -------------------------------------------------------------


def _rot(f: float, g: float):
    """Givens pair: [c s; -s c] @ [f; g] = [r; 0]."""
    if g == 0.0:
        return 1.0, 0.0, f
    if f == 0.0:
        return 0.0, 1.0, g
    r = math.hypot(f, g)
    return f / r, g / r, r


def _rot_cols(m: np.ndarray, i: int, j: int, c: float, s: float):
    ci = c * m[:, i] + s * m[:, j]
    m[:, j] = -s * m[:, i] + c * m[:, j]
    m[:, i] = ci


def _bidiagonalize(a: np.ndarray):
    """Householder bidiagonalization of a tall matrix (m >= n).

    Returns (U thin m x n, d, e, V n x n) with U diag(d, e) Vᵀ = a, d the
    diagonal and e the superdiagonal.
    """
    a = a.astype(np.float64, copy=True)
    m, n = a.shape
    left = []
    right = []
    for k in range(n):
        v, beta = _house(a[k:, k])
        left.append((v, beta))
        if beta != 0.0:
            w = beta * (v @ a[k:, k:])
            a[k:, k:] -= np.outer(v, w)
        if k < n - 2:
            v, beta = _house(a[k, k + 1 :])
            right.append((v, beta))
            if beta != 0.0:
                w = beta * (a[k:, k + 1 :] @ v)
                a[k:, k + 1 :] -= np.outer(w, v)
    d = np.diagonal(a).copy()
    e = np.diagonal(a, offset=1).copy() if n > 1 else np.empty(0)
    u = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        v, beta = left[k]
        if beta != 0.0:
            w = beta * (v @ u[k:, k:])
            u[k:, k:] -= np.outer(v, w)
    vmat = np.eye(n)
    for k in range(len(right) - 1, -1, -1):
        v, beta = right[k]
        if beta != 0.0:
            w = beta * (v @ vmat[k + 1 :, k + 1 :])
            vmat[k + 1 :, k + 1 :] -= np.outer(v, w)
    return u, d, e, vmat


def _gk_step(d, e, p, q, u_rot, v_rot):
    """One implicit-shift bidiagonal QR sweep on the unreduced block [p, q]."""
    dm, dn = float(d[q - 1]), float(d[q])
    em = float(e[q - 1])
    em1 = float(e[q - 2]) if q - 1 > p else 0.0
    t11 = dm * dm + em1 * em1
    t12 = dm * em
    t22 = dn * dn + em * em
    delta = 0.5 * (t11 - t22)
    if delta == 0.0 and t12 == 0.0:
        mu = t22
    else:
        denom = delta + math.copysign(math.hypot(delta, t12), delta if delta != 0.0 else 1.0)
        mu = t22 - (t12 * t12) / denom if denom != 0.0 else t22
    y = float(d[p]) * float(d[p]) - mu
    z = float(d[p]) * float(e[p])
    for k in range(p, q):
        c, s, r = _rot(y, z)
        if k > p:
            e[k - 1] = r
        f = c * d[k] + s * e[k]
        e[k] = c * e[k] - s * d[k]
        g = s * d[k + 1]
        d[k + 1] = c * d[k + 1]
        d[k] = f
        _rot_cols(v_rot, k, k + 1, c, s)
        c, s, r = _rot(float(d[k]), float(g))
        d[k] = r
        f = c * e[k] + s * d[k + 1]
        d[k + 1] = c * d[k + 1] - s * e[k]
        e[k] = f
        if k < q - 1:
            g = s * e[k + 1]
            e[k + 1] = c * e[k + 1]
        _rot_cols(u_rot, k, k + 1, c, s)
        if k < q - 1:
            y = float(e[k])
            z = float(g)


def _zero_row_chase(d, e, k, q, u_rot):
    """d[k] vanished: rotate the stray e[k] down and out against d[k+1..q]."""
    f = float(e[k])
    e[k] = 0.0
    for j in range(k + 1, q + 1):
        c, s, r = _rot(float(d[j]), f)
        # mix so row k's stray entry cancels against row j
        d[j] = r
        _rot_cols(u_rot, j, k, c, s)
        if j < q:
            f = -s * float(e[j])
            e[j] = c * float(e[j])


def _zero_col_chase(d, e, p, q, v_rot):
    """d[q] vanished: rotate e[q-1] up and out against d[p..q-1]."""
    f = float(e[q - 1])
    e[q - 1] = 0.0
    for j in range(q - 1, p - 1, -1):
        c, s, r = _rot(float(d[j]), f)
        d[j] = r
        _rot_cols(v_rot, j, q, c, s)
        if j > p:
            f = -s * float(e[j - 1])
            e[j - 1] = c * float(e[j - 1])


def _bidiagonal_svd(d: np.ndarray, e: np.ndarray, eps: float):
    """Diagonalize the bidiagonal (d, e). Returns (s, U_rot, V_rot) with
    diag(d,e) = U_rot diag(s) V_rotᵀ; s unsorted, signs unfixed."""
    n = len(d)
    d = d.astype(np.float64, copy=True)
    e = e.astype(np.float64, copy=True)
    u_rot = np.eye(n)
    v_rot = np.eye(n)
    if n == 1:
        return d, u_rot, v_rot
    anorm = float(np.max(np.abs(d))) + (float(np.max(np.abs(e))) if len(e) else 0.0)
    max_steps = 30 * n
    steps = 0
    while True:
        for i in range(n - 1):
            if abs(e[i]) <= eps * (abs(d[i]) + abs(d[i + 1])):
                e[i] = 0.0
        q = n - 1
        while q > 0 and e[q - 1] == 0.0:
            q -= 1
        if q == 0:
            break
        p = q - 1
        while p > 0 and e[p - 1] != 0.0:
            p -= 1
        if anorm > 0.0:
            zeroed = False
            for k in range(p, q):
                if abs(d[k]) <= eps * anorm:
                    _zero_row_chase(d, e, k, q, u_rot)
                    zeroed = True
                    break
            if zeroed:
                continue
            if abs(d[q]) <= eps * anorm:
                _zero_col_chase(d, e, p, q, v_rot)
                continue
        steps += 1
        if steps > max_steps:
            raise ConvergenceError(
                f"bidiagonal SVD did not converge in {max_steps} sweeps",
                residual=float(np.max(np.abs(e))),
            )
        _gk_step(d, e, p, q, u_rot, v_rot)
    return d, u_rot, v_rot


def _svd_tall(a: np.ndarray):
    """Full thin SVD of a tall dense array (m >= n), all factors returned."""
    m, n = a.shape
    u0, d, e, v0 = _bidiagonalize(a)
    eps = float(np.finfo(np.float64).eps)
    s, u_rot, v_rot = _bidiagonal_svd(d, e, eps)
    neg = s < 0
    s = np.abs(s)
    u_rot[:, neg] = -u_rot[:, neg]
    order = np.argsort(-s, kind="stable")
    s = s[order]
    u = u0 @ u_rot[:, order]
    v = v0 @ v_rot[:, order]
    return u, s, v


def svd_small(b: np.ndarray) -> SmallSVDResult:
    """SVD of the small dense factor B (r x n, r <= n): B = U diag(S) Vᵀ.

    Bidiagonalize the transpose (tall), run implicit-shift QR sweeps, then
    swap the factors back. Columns of U are sign-fixed so their largest-
    magnitude entry is positive; ties resolve to the earliest row.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"svd_small expects a matrix, got shape {b.shape}")
    r, n = b.shape
    if r > n:
        raise ShapeError(f"svd_small expects r <= n, got {r}x{n}")
    ut, s, vt = _svd_tall(b.T.copy())  # b.T = ut s vtᵀ  =>  b = vt s utᵀ
    u, v = vt, ut
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return SmallSVDResult(u=u, s=s, v=v)


def full_svd_array(a: np.ndarray):
    """Thin SVD of any dense array: returns (U m x k, s k, Vt k x n)."""
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if m >= n:
        u, s, v = _svd_tall(a.copy())
    else:
        v, s, u = _svd_tall(a.T.copy())
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, s, v.T
