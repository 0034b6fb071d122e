"""Cost estimation, partitioning, association ordering, and residency planning.

Multiply-add counts are exact for dense x dense and for products with one
sparse operand; sparse x sparse counts are upper bounds because the overlap
pattern is unknown before the product is formed. The planner decides tile
grids from memory limits alone; it never looks at the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import (
    CANONICAL_CELL,
    BlockPartition,
    Density,
    IndexWidth,
    MatrixDescriptor,
    Precision,
    wider,
)
from .errors import BudgetError, ShapeError


@dataclass(frozen=True)
class MemoryBudget:
    """Per-matrix / new-matrix / global byte limits; None means unset.

    An unset limit is substituted by the next one down the chain:
    per_matrix, else new_matrix, else global_limit, else unlimited in-core.
    """

    per_matrix: int | None = None
    new_matrix: int | None = None
    global_limit: int | None = None

    def limit_for(self) -> int | None:
        if self.per_matrix is not None:
            return self.per_matrix
        if self.new_matrix is not None:
            return self.new_matrix
        return self.global_limit

    @property
    def unlimited(self) -> bool:
        return self.per_matrix is None and self.new_matrix is None and self.global_limit is None


@dataclass
class CostEstimate:
    multiply_adds: int
    peak_resident_bytes: int
    output_bytes: int
    exact: bool


@dataclass
class ProductNode:
    """One node of an association tree; leaves carry chain indices."""

    index: int | None = None
    left: "ProductNode | None" = None
    right: "ProductNode | None" = None
    estimate: CostEstimate | None = None
    desc: MatrixDescriptor | None = None

    @property
    def is_leaf(self) -> bool:
        return self.index is not None

    def total_multiply_adds(self) -> int:
        if self.is_leaf:
            return 0
        return (
            self.estimate.multiply_adds
            + self.left.total_multiply_adds()
            + self.right.total_multiply_adds()
        )

    def order(self) -> str:
        if self.is_leaf:
            return chr(ord("A") + self.index)
        return f"({self.left.order()}{self.right.order()})"


def _entry_bytes(precision: Precision, index_width: IndexWidth) -> int:
    return precision.nbytes + 2 * index_width.nbytes


def estimate_product(a: MatrixDescriptor, b: MatrixDescriptor) -> CostEstimate:
    """Cost of a @ b under the density-aware model (view-aware shapes)."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"cannot multiply {m}x{k} by {k2}x{n}")
    prec = wider(a.precision, b.precision)
    dense_ops = m * k * n
    if a.density is Density.DENSE and b.density is Density.DENSE:
        ops, exact = dense_ops, True
        out_bytes = m * n * prec.nbytes
    elif a.density is Density.SPARSE and b.density is Density.DENSE:
        ops, exact = a.nnz * n, True
        out_bytes = m * n * prec.nbytes
    elif a.density is Density.DENSE and b.density is Density.SPARSE:
        ops, exact = b.nnz * m, True
        out_bytes = m * n * prec.nbytes
    else:
        ops, exact = min(a.nnz * n, b.nnz * m, dense_ops), False
        iw = IndexWidth.for_shape(m, n)
        out_bytes = min(m * n, a.nnz * b.nnz) * _entry_bytes(prec, iw)
    peak = a.payload_bytes() + b.payload_bytes() + out_bytes
    return CostEstimate(ops, peak, out_bytes, exact)


def product_descriptor(a: MatrixDescriptor, b: MatrixDescriptor, matrix_id: str) -> MatrixDescriptor:
    """Descriptor template for a @ b (shape, density, precision, nnz bound)."""
    m, k = a.shape
    _, n = b.shape
    prec = wider(a.precision, b.precision)
    if a.density is Density.SPARSE and b.density is Density.SPARSE:
        density = Density.SPARSE
        nnz = min(m * n, a.nnz * b.nnz)
    else:
        density = Density.DENSE
        nnz = m * n
    return MatrixDescriptor(
        matrix_id=matrix_id,
        rows=m,
        cols=n,
        density=density,
        precision=prec,
        index_width=IndexWidth.for_shape(m, n),
        nnz=nnz,
    )


def choose_association(chain: list[MatrixDescriptor]) -> ProductNode:
    """Matrix-chain ordering by dynamic programming over estimated multiply-adds.

    Cost ties resolve toward right-association (smallest split point wins),
    recursively, so an all-tied chain comes out fully right-leaning.
    """
    n = len(chain)
    if n == 0:
        raise ShapeError("empty product chain")
    if n == 1:
        return ProductNode(index=0, desc=chain[0])
    for a, b in zip(chain, chain[1:]):
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"chain link {a.shape} x {b.shape} mismatched")

    best_cost: dict[tuple[int, int], int] = {}
    best_node: dict[tuple[int, int], ProductNode] = {}

    def solve(i: int, j: int) -> tuple[int, ProductNode]:
        key = (i, j)
        if key in best_cost:
            return best_cost[key], best_node[key]
        if j - i == 1:
            node = ProductNode(index=i, desc=chain[i])
            best_cost[key], best_node[key] = 0, node
            return 0, node
        winner = None
        winner_cost = None
        for s in range(i + 1, j):
            lc, ln = solve(i, s)
            rc, rn = solve(s, j)
            est = estimate_product(ln.desc, rn.desc)
            cost = lc + rc + est.multiply_adds
            if winner_cost is None or cost < winner_cost:
                winner_cost = cost
                winner = ProductNode(
                    left=ln,
                    right=rn,
                    estimate=est,
                    desc=product_descriptor(ln.desc, rn.desc, f"chain{i}_{j}"),
                )
        best_cost[key], best_node[key] = winner_cost, winner
        return winner_cost, winner

    return solve(0, n)[1]


def _min_grid(rows: int, cols: int, fits) -> tuple[int, int]:
    """Smallest nr x nc equal-cut grid whose max tile satisfies `fits`.

    fits(tile_rows) -> max tile cols allowed for that height (0 if none).
    Among minimal-count grids, grids that keep a compute-cell-narrow axis
    in one piece win (cell reads span such an axis end to end, so cutting
    it turns every read into a multi-tile assembly), then the squarest.
    """
    best = None
    # distinct values of ceil(rows/nr) via the floor identity on rows-1
    heights = {1}
    m = rows - 1
    i = 1
    while i * i <= m:
        heights.add(m // i + 1)
        heights.add(i + 1)
        i += 1
    if m >= 1:
        heights.add(m + 1)
    for h in sorted(heights):
        w_cap = fits(h)
        if w_cap < 1:
            continue
        nr_h = -(-rows // h)
        nc = -(-cols // w_cap)
        narrow_cuts = (nr_h > 1 and rows <= CANONICAL_CELL) + (
            nc > 1 and cols <= CANONICAL_CELL
        )
        cand = (nr_h * nc, narrow_cuts, abs(nr_h - nc), nr_h, nc)
        if best is None or cand < best:
            best = cand
    if best is None:
        raise BudgetError(
            f"memory limit admits no tile of a {rows}x{cols} matrix; "
            "limit is below one scalar plus bookkeeping"
        )
    return best[3], best[4]


def partition_for_budget(
    rows: int,
    cols: int,
    *,
    precision: Precision,
    density: Density = Density.DENSE,
    nnz: int = 0,
    index_width: IndexWidth = IndexWidth.I64,
    limit: int | None = None,
) -> BlockPartition:
    """Equal-cut grid with as few, as equal tiles as the byte limit allows.

    Dense tiles are sized exactly; sparse tiles use the uniform-density
    expectation from the descriptor nnz (construction refines the grid if
    the actual data is skewed). No limit means a single tile.
    """
    if limit is None:
        return BlockPartition.single(rows, cols)
    if density is Density.DENSE:
        cap = limit // precision.nbytes

        def fits(h: int) -> int:
            return min(cols, cap // h)

    else:
        if nnz == 0:
            return BlockPartition.single(rows, cols)
        eb = _entry_bytes(precision, index_width)
        if limit < eb:
            raise BudgetError("memory limit below the bytes of a single sparse entry")

        def fits(h: int) -> int:
            # expected tile entries: nnz * (h/rows) * (w/cols) <= limit/eb
            w = (limit * rows * cols) // (eb * nnz * h)
            return min(cols, w)

    nr, nc = _min_grid(rows, cols, fits)
    return BlockPartition.grid(rows, cols, nr, nc)


def choose_threads(multiply_adds: int, available: int, min_ops_per_thread: int = 100_000) -> int:
    """Clamp(ops / min_ops, 1, available): small tasks stay single-threaded."""
    return max(1, min(available, multiply_adds // min_ops_per_thread))


@dataclass
class StepFootprint:
    """Resident items one plan step touches: (item_id, bytes) pairs."""

    step_id: int
    touches: list[tuple[str, int]] = field(default_factory=list)


@dataclass(frozen=True)
class EvictDirective:
    item_id: str
    before_step: int


def residency_check(steps: list[StepFootprint], global_limit: int | None) -> list[EvictDirective]:
    """Predictive spill schedule keeping total residency under the global limit.

    Walks the plan before execution; when a step's loads would overflow,
    least-recently-touched items outside that step's working set are
    scheduled for eviction ahead of it. A single step whose own working set
    exceeds the limit is infeasible.
    """
    if global_limit is None:
        return []
    directives: list[EvictDirective] = []
    resident: dict[str, int] = {}  # id -> bytes, insertion order tracks recency
    for step in steps:
        working = dict(step.touches)
        need = sum(b for i, b in working.items())
        if need > global_limit:
            raise BudgetError(
                f"step {step.step_id} working set {need} bytes exceeds global limit {global_limit}"
            )
        for item_id, nbytes in step.touches:
            if item_id in resident:
                resident[item_id] = resident.pop(item_id)  # refresh recency
                continue
            while sum(resident.values()) + nbytes > global_limit:
                victim = next(i for i in resident if i not in working)
                del resident[victim]
                directives.append(EvictDirective(victim, step.step_id))
            resident[item_id] = nbytes
    return directives
