"""Randomized SVD driver: sketch, power passes, thin QR, small SVD.

A factorization is a linear plan of steps. Every step writes a durable
record before and after it runs, and its output matrices are flushed to the
store before the completion record lands, so a run killed between any two
steps can be resumed and will finish with bitwise-identical outputs. Step
granularity is one block-level operation (one product, one QR, one SVD);
stage timings aggregate steps under the fixed profile stage names.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .core import DenseBlock, Density, Precision, transpose_view
from .errors import ConfigMismatchError, PlanNotFoundError, ShapeError
from .kernels import block_multiply, svd_small, thin_qr
from .planner import MemoryBudget, choose_association
from .pool import BlockPool, StoredMatrix, create_matrix, matrix_from_dense
from .rng import gaussian_band
from .store import BlockStore, StepRecord

# Fixed profile keys. Regression tooling greps for these exact strings, so
# they are spelled once here and nowhere else.
STAGE_PARSE = "Text Parsing"
STAGE_GAUSSIAN = "Preparation of O"
STAGE_SKETCH = "O*A^T"
STAGE_ORTHO = "Orthogonalization"
STAGE_PROJECT = "A^T*Q_r"
STAGE_SVD_PREP = "SVD0 Preparation"
STAGE_SVD = "SVD0"
STAGE_POST = "Postprocessing"

STAGE_NAMES = (
    STAGE_PARSE,
    STAGE_GAUSSIAN,
    STAGE_SKETCH,
    STAGE_ORTHO,
    STAGE_PROJECT,
    STAGE_SVD_PREP,
    STAGE_SVD,
    STAGE_POST,
)

# test seam: hard-stop the process after N freshly executed steps
ABORT_ENV = "XSVD_ABORT_AFTER_STEPS"
ABORT_EXIT_CODE = 70


def _abort_after() -> int | None:
    raw = os.environ.get(ABORT_ENV)
    return int(raw) if raw else None


class StageClock:
    """Wall-clock accumulator keyed by stage name."""

    def __init__(self):
        self.seconds = {name: 0.0 for name in STAGE_NAMES}

    @contextmanager
    def timing(self, stage: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[stage] += time.perf_counter() - t0


@dataclass(frozen=True)
class RsvdConfig:
    """Everything that determines a factorization's output bytes.

    `power` is either the string "auto" or a fixed exponent; `digest()`
    fingerprints the configuration so a resumed run can refuse to continue
    under different settings. The working directory is deliberately outside
    the digest: moving a plan does not change what it computes.
    """

    rank: int
    power: int | str = "auto"
    q_max: int = 5
    tau: float = 1e-6
    seed: int = 0
    precision: Precision = Precision.DOUBLE
    oversample: int = 0
    gram_path: bool = False
    budget: MemoryBudget = field(default_factory=MemoryBudget)
    workdir: str | None = None

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be at least 1, got {self.rank}")
        if self.q_max < 0:
            raise ValueError(f"q_max must be nonnegative, got {self.q_max}")
        if isinstance(self.power, str):
            if self.power != "auto":
                raise ValueError(f"power must be 'auto' or an integer, got {self.power!r}")
        elif not 0 <= self.power <= self.q_max:
            raise ValueError(f"power {self.power} outside 0..{self.q_max}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.oversample < 0:
            raise ValueError(f"oversample must be nonnegative, got {self.oversample}")

    @property
    def auto_power(self) -> bool:
        return self.power == "auto"

    def to_json(self) -> dict:
        return {
            "rank": self.rank,
            "power": self.power,
            "q_max": self.q_max,
            "tau": self.tau,
            "seed": self.seed,
            "precision": self.precision.value,
            "oversample": self.oversample,
            "gram_path": self.gram_path,
            "per_matrix": self.budget.per_matrix,
            "new_matrix": self.budget.new_matrix,
            "global_limit": self.budget.global_limit,
        }

    @classmethod
    def from_json(cls, d: dict, workdir: str | None = None) -> "RsvdConfig":
        return cls(
            rank=d["rank"],
            power=d["power"],
            q_max=d["q_max"],
            tau=d["tau"],
            seed=d["seed"],
            precision=Precision(d["precision"]),
            oversample=d["oversample"],
            gram_path=d["gram_path"],
            budget=MemoryBudget(d["per_matrix"], d["new_matrix"], d["global_limit"]),
            workdir=workdir,
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RsvdResult:
    u: StoredMatrix
    s: np.ndarray
    v: StoredMatrix
    chosen_q: int
    stage_seconds: dict[str, float]
    deficient_columns: tuple[int, ...] = ()


class PlanRunner:
    """Executes plan steps in order, skipping ones already durably done.

    Step ids are assigned by call order, which is deterministic given the
    config, so a resumed process walks the same sequence and each `step`
    call lines up with its prior record. A completed step returns its
    recorded meta instead of running, letting data-dependent decisions
    (auto power selection) replay without recomputation.
    """

    def __init__(
        self,
        store: BlockStore | None,
        pool: BlockPool,
        plan_id: str,
        clock: StageClock,
        *,
        completed: dict[int, StepRecord] | None = None,
        abort_after: int | None = None,
    ):
        self.store = store
        self.pool = pool
        self.plan_id = plan_id
        self.clock = clock
        self.completed = completed or {}
        self.abort_after = abort_after
        self.next_id = 0
        self.ran = 0
        self.stage_threads: dict[str, int] = {}

    def step(
        self,
        op: str,
        *,
        stage: str,
        fn,
        inputs=(),
        outputs=(),
        seed: int | None = None,
        self_clocked: bool = False,
    ) -> dict:
        step_id = self.next_id
        self.next_id += 1
        prior = self.completed.get(step_id)
        if (
            prior is not None
            and prior.status == "done"
            and prior.op == op
            and prior.plan_id == self.plan_id
        ):
            self._note_threads(stage, prior.meta)
            return dict(prior.meta)

        record = StepRecord(
            self.plan_id, step_id, op, list(inputs), list(outputs), "pending", seed
        )
        if self.store is not None:
            with self.clock.timing(stage):
                self.store.write_step(record)
        if self_clocked:
            meta = fn() or {}
        else:
            with self.clock.timing(stage):
                meta = fn() or {}
        with self.clock.timing(stage):
            if self.store is not None:
                for matrix_id in outputs:
                    self.pool.flush_matrix(matrix_id)
                record.status = "done"
                record.meta = meta
                self.store.write_step(record)
        self._note_threads(stage, meta)
        self.ran += 1
        if self.abort_after is not None and self.ran >= self.abort_after:
            os._exit(ABORT_EXIT_CODE)  # simulated kill between two steps
        return meta

    def _note_threads(self, stage: str, meta: dict):
        t = meta.get("threads")
        if t:
            self.stage_threads[stage] = max(self.stage_threads.get(stage, 0), t)

    def matrix(self, matrix_id: str) -> StoredMatrix:
        """Handle on a step output, whether produced now or in a prior run."""
        try:
            return StoredMatrix(self.pool.descriptor(matrix_id), self.pool)
        except KeyError:
            if self.store is None:
                raise
            desc = self.pool.register(self.store.load_descriptor(matrix_id))
            return StoredMatrix(desc, self.pool)


# -- building blocks -------------------------------------------------------


def gaussian_matrix(
    pool: BlockPool,
    matrix_id: str,
    rows: int,
    cols: int,
    seed: int,
    *,
    precision: Precision = Precision.DOUBLE,
) -> StoredMatrix:
    """Standard-normal matrix whose entries depend only on (seed, position).

    Each matrix row is generated from its own counter stream, so the content
    is identical under every partition and budget.
    """
    mat = create_matrix(pool, matrix_id, rows, cols, precision=precision)
    part = mat.desc.partition
    dtype = precision.storage_dtype
    for ti in range(part.n_row_tiles):
        r0, r1 = part.row_span(ti)
        band = gaussian_band(seed, r0, r1, cols)
        for tj in range(part.n_col_tiles):
            c0, c1 = part.col_span(tj)
            mat.set_tile(
                ti, tj, DenseBlock(r0, r1, c0, c1, np.ascontiguousarray(band[:, c0:c1], dtype=dtype))
            )
    return mat


_EVEN_ID = "power.even"  # holds A-side products, rows x rank
_ODD_ID = "power.odd"  # holds transpose-side products, cols x rank


def _null_runner(pool: BlockPool) -> PlanRunner:
    return PlanRunner(None, pool, "unplanned", StageClock())


def _sketch_and_power(
    runner: PlanRunner,
    pool: BlockPool,
    a: StoredMatrix,
    o: StoredMatrix,
    *,
    power,
    q_max: int,
    tau: float,
    threads: int,
    precision: Precision,
) -> tuple[StoredMatrix, int, list[float]]:
    """Y = (A Aᵀ)^q A O through two alternating thin buffers.

    With `power` fixed, runs exactly that many passes. With "auto", watches
    the normalized sketch magnitude after each pass: stop when it collapses
    below tau of its initial value, or when its ratio between consecutive
    passes stabilizes to within 1%, or at q_max. Each pass reuses the
    previous buffer, so selection costs no more than the chosen power run.
    """
    m, n = a.shape
    r = o.shape[1]
    auto = power == "auto"
    limit = q_max if auto else int(power)
    scale = 1.0 / math.sqrt(m * r)

    def sketch():
        y, stats = block_multiply(pool, a, o, _EVEN_ID, threads=threads, out_precision=precision)
        meta = {"threads": stats.threads_used}
        if auto:
            meta["nu"] = math.sqrt(y.frobenius_sq()) * scale
        return meta

    meta = runner.step(
        "sketch", stage=STAGE_SKETCH, inputs=[a.matrix_id, o.matrix_id], outputs=[_EVEN_ID], fn=sketch
    )
    nus = [meta["nu"]] if auto else []
    if auto and not nus[0] > 0.0:
        # zero sketch: no spectrum to sharpen, further passes change nothing
        return runner.matrix(_EVEN_ID), 0, nus

    chosen = 0
    prev_rho = 1.0
    for q in range(1, limit + 1):

        def left():
            _, stats = block_multiply(
                pool, a.T, runner.matrix(_EVEN_ID), _ODD_ID, threads=threads, out_precision=precision
            )
            return {"threads": stats.threads_used}

        runner.step(
            "power-left", stage=STAGE_SKETCH, inputs=[a.matrix_id, _EVEN_ID], outputs=[_ODD_ID], fn=left
        )

        def right():
            y, stats = block_multiply(
                pool, a, runner.matrix(_ODD_ID), _EVEN_ID, threads=threads, out_precision=precision
            )
            meta = {"threads": stats.threads_used}
            if auto:
                meta["nu"] = math.sqrt(y.frobenius_sq()) * scale
            return meta

        meta = runner.step(
            "power-right", stage=STAGE_SKETCH, inputs=[a.matrix_id, _ODD_ID], outputs=[_EVEN_ID], fn=right
        )
        chosen = q
        if auto:
            nu = meta["nu"]
            nus.append(nu)
            if nu < tau * nus[0]:
                break
            rho = nu / nus[q - 1]
            if abs(rho - prev_rho) <= 0.01 * rho:
                break
            prev_rho = rho
    return runner.matrix(_EVEN_ID), chosen, nus


def power_apply(
    pool: BlockPool,
    a: StoredMatrix,
    o: StoredMatrix,
    q: int,
    *,
    threads: int = 1,
    precision: Precision | None = None,
) -> StoredMatrix:
    """(A Aᵀ)^q A O as 2q+1 thin products; q = 0 is the plain sketch."""
    if q < 0:
        raise ValueError(f"power must be nonnegative, got {q}")
    if a.shape[1] != o.shape[0]:
        raise ShapeError(f"sketch shapes disagree: {a.shape} x {o.shape}")
    precision = precision or o.desc.precision
    y, _, _ = _sketch_and_power(
        _null_runner(pool), pool, a, o, power=q, q_max=q, tau=1e-6, threads=threads, precision=precision
    )
    return y


def auto_select_q(
    pool: BlockPool,
    a: StoredMatrix,
    rank: int,
    *,
    q_max: int = 5,
    tau: float = 1e-6,
    seed: int = 0,
    threads: int = 1,
    precision: Precision | None = None,
) -> int:
    """Pick the power exponent by running the sketch loop on scratch buffers."""
    precision = precision or a.desc.precision
    o = gaussian_matrix(pool, "power.probe", a.shape[1], rank, seed, precision=precision)
    try:
        _, chosen, _ = _sketch_and_power(
            _null_runner(pool), pool, a, o, power="auto", q_max=q_max, tau=tau,
            threads=threads, precision=precision,
        )
    finally:
        for matrix_id in ("power.probe", _EVEN_ID, _ODD_ID):
            pool.drop_matrix(matrix_id, delete_files=True)
    return chosen


def _densify(pool: BlockPool, a: StoredMatrix, out_id: str, *, precision: Precision) -> StoredMatrix:
    """Dense copy of a sparse matrix, assembled cell by cell."""
    from .kernels import CANONICAL_CELL  # local to avoid a module cycle at import

    m, n = a.shape
    out = create_matrix(pool, out_id, m, n, precision=precision)
    dtype = precision.storage_dtype
    for r0 in range(0, m, CANONICAL_CELL):
        r1 = min(r0 + CANONICAL_CELL, m)
        for c0 in range(0, n, CANONICAL_CELL):
            c1 = min(c0 + CANONICAL_CELL, n)
            cell = np.zeros((r1 - r0, c1 - c0), dtype=dtype)
            rows, cols, vals = a.read_cell_sparse(r0, r1, c0, c1)
            cell[rows - r0, cols - c0] = vals
            out.write_cell_dense(r0, r1, c0, c1, cell)
    return out


# -- the pipeline ----------------------------------------------------------


def randomized_svd(
    pool: BlockPool,
    a: StoredMatrix,
    config: RsvdConfig,
    *,
    threads: int = 1,
    runner: PlanRunner | None = None,
    clock: StageClock | None = None,
) -> RsvdResult:
    """Rank-r randomized factorization A ≈ U diag(s) Vᵀ.

    Draw a Gaussian test matrix, optionally sharpen the spectrum with power
    passes, orthonormalize the sketch, project the input onto that basis,
    and take the exact SVD of the small projected factor. When the pool has
    a store, every step leaves a durable record and the run can be resumed.
    """
    m, n = a.shape
    r_work = config.rank + config.oversample
    if r_work > min(m, n):
        raise ShapeError(
            f"rank {config.rank} (+{config.oversample} oversampling) exceeds "
            f"min{a.shape} = {min(m, n)}"
        )
    clock = clock or (runner.clock if runner is not None else StageClock())
    if runner is None:
        runner = PlanRunner(
            pool.store, pool, config.digest(), clock, abort_after=_abort_after()
        )
        if pool.store is not None:
            pool.store.save_plan_config(
                {
                    "command": None,
                    "input_matrix": a.matrix_id,
                    "config": config.to_json(),
                    "digest": config.digest(),
                }
            )
            input_id = a.matrix_id

            def ingest():
                pool.flush_matrix(input_id)
                return {}

            runner.step("ingest", stage=STAGE_PARSE, outputs=[a.matrix_id], fn=ingest)

    runner.step(
        "gaussian",
        stage=STAGE_GAUSSIAN,
        outputs=["O"],
        seed=config.seed,
        fn=lambda: gaussian_matrix(
            pool, "O", n, r_work, config.seed, precision=config.precision
        )
        and {},
    )
    o = runner.matrix("O")

    y, chosen_q, _ = _sketch_and_power(
        runner,
        pool,
        a,
        o,
        power=config.power,
        q_max=config.q_max,
        tau=config.tau,
        threads=threads,
        precision=config.precision,
    )

    def orthogonalize():
        res = thin_qr(pool, y, "qr.Q")
        matrix_from_dense(pool, "qr.R", res.r, precision=Precision.DOUBLE)
        return {"deficient": [int(i) for i in res.deficient_columns]}

    qr_meta = runner.step(
        "orthogonalize",
        stage=STAGE_ORTHO,
        inputs=[y.matrix_id],
        outputs=["qr.Q", "qr.R"],
        fn=orthogonalize,
    )
    q_mat = runner.matrix("qr.Q")

    def project():
        if config.gram_path and chosen_q > 0:
            # project the power matrix itself, Qᵀ(AAᵀ)^q A, as 2q+1 thin
            # products; SVD0 then sees the powered spectrum it will unwind
            names = [f"proj.pow.{i}" for i in range(2 * chosen_q)]
            for mid in names + ["proj.B"]:
                pool.drop_matrix(mid, delete_files=True)
            cur, stats = block_multiply(
                pool, q_mat.T, a, names[0], threads=threads, out_precision=config.precision
            )
            used = stats.threads_used
            for i in range(chosen_q):
                half, s1 = block_multiply(
                    pool, cur, a.T, names[2 * i + 1], threads=threads,
                    out_precision=config.precision,
                )
                out_id = "proj.B" if i == chosen_q - 1 else names[2 * i + 2]
                nxt, s2 = block_multiply(
                    pool, half, a, out_id, threads=threads, out_precision=config.precision
                )
                used = max(used, s1.threads_used, s2.threads_used)
                pool.drop_matrix(cur.matrix_id, delete_files=True)
                pool.drop_matrix(half.matrix_id, delete_files=True)
                cur = nxt
            return {"threads": used}
        _, stats = block_multiply(
            pool, q_mat.T, a, "proj.B", threads=threads, out_precision=config.precision
        )
        return {"threads": stats.threads_used}

    runner.step(
        "project",
        stage=STAGE_PROJECT,
        inputs=["qr.Q", a.matrix_id],
        outputs=["proj.B"],
        fn=project,
    )

    def small_svd():
        if config.gram_path:
            # r x r Gram factor of the projected power matrix: eigenvalues
            # are the squared powered singular values, unwound through the
            # 1/(2q+1) exponent
            with clock.timing(STAGE_SVD_PREP):
                b = runner.matrix("proj.B").to_array().astype(np.float64)
                g = b @ b.T
            with clock.timing(STAGE_SVD):
                eig = svd_small(g)
                sigma_pow = np.sqrt(np.maximum(eig.s, 0.0))
                exponent = 1.0 / (2 * chosen_q + 1)
                s = sigma_pow**exponent if chosen_q > 0 else sigma_pow
                u_b = eig.u
                v = b.T @ u_b
                norms = np.sqrt(np.sum(v * v, axis=0))
                nonzero = norms > 0
                v[:, nonzero] /= norms[nonzero]
        else:
            with clock.timing(STAGE_SVD_PREP):
                b = runner.matrix("proj.B").to_array().astype(np.float64)
            with clock.timing(STAGE_SVD):
                res = svd_small(b)
                u_b, s, v = res.u, res.s, res.v
        with clock.timing(STAGE_SVD):
            k = config.rank
            matrix_from_dense(pool, "svd.UB", u_b[:, :k], precision=Precision.DOUBLE)
            matrix_from_dense(pool, "S", s[:k].reshape(-1, 1), precision=Precision.DOUBLE)
            matrix_from_dense(pool, "V", v[:, :k], precision=config.precision)
        return {}

    runner.step(
        "svd0",
        stage=STAGE_SVD,
        inputs=["proj.B"],
        outputs=["svd.UB", "S", "V"],
        fn=small_svd,
        self_clocked=True,
    )

    def postprocess():
        _, stats = block_multiply(
            pool,
            q_mat,
            runner.matrix("svd.UB"),
            "U",
            threads=threads,
            out_precision=config.precision,
        )
        return {"threads": stats.threads_used}

    runner.step(
        "postprocess", stage=STAGE_POST, inputs=["qr.Q", "svd.UB"], outputs=["U"], fn=postprocess
    )

    return RsvdResult(
        u=runner.matrix("U"),
        s=runner.matrix("S").to_array().astype(np.float64).ravel(),
        v=runner.matrix("V"),
        chosen_q=chosen_q,
        stage_seconds=dict(clock.seconds),
        deficient_columns=tuple(qr_meta.get("deficient", ())),
    )


def full_svd(
    pool: BlockPool,
    a: StoredMatrix,
    config: RsvdConfig | None = None,
    *,
    threads: int = 1,
    runner: PlanRunner | None = None,
    clock: StageClock | None = None,
) -> RsvdResult:
    """Exact thin SVD, no sketching: orthonormalize the tall orientation,
    then factor the small triangular rest. Feasible whenever min(m, n) is
    small enough for an in-core min-dim square factor."""
    m, n = a.shape
    k = min(m, n)
    precision = config.precision if config is not None else a.desc.precision
    clock = clock or (runner.clock if runner is not None else StageClock())
    if runner is None:
        # standalone calls compute without plan records; the resumable route
        # is run_command("svd", ...)
        runner = PlanRunner(None, pool, "full-svd", clock)

    work = a
    if a.desc.density is Density.SPARSE:
        runner.step(
            "densify",
            stage=STAGE_SVD_PREP,
            inputs=[a.matrix_id],
            outputs=["full.dense"],
            fn=lambda: _densify(pool, a, "full.dense", precision=precision) and {},
        )
        work = runner.matrix("full.dense")
    tall = work if m >= n else work.T

    def orthogonalize():
        res = thin_qr(pool, tall, "qr.Q")
        matrix_from_dense(pool, "qr.R", res.r, precision=Precision.DOUBLE)
        return {"deficient": [int(i) for i in res.deficient_columns]}

    qr_meta = runner.step(
        "orthogonalize", stage=STAGE_ORTHO, inputs=[a.matrix_id], outputs=["qr.Q", "qr.R"], fn=orthogonalize
    )

    # the small factor of the tall orientation lands in-core; the big factor
    # is rebuilt block-wise in postprocessing
    small_id = "V" if m >= n else "U"
    big_id = "U" if m >= n else "V"

    def small_svd():
        with clock.timing(STAGE_SVD_PREP):
            rr = runner.matrix("qr.R").to_array().astype(np.float64)
        with clock.timing(STAGE_SVD):
            res = svd_small(rr)
            matrix_from_dense(pool, "svd.UB", res.u, precision=Precision.DOUBLE)
            matrix_from_dense(pool, "S", res.s.reshape(-1, 1), precision=Precision.DOUBLE)
            matrix_from_dense(pool, small_id, res.v, precision=precision)
        return {}

    runner.step(
        "svd0",
        stage=STAGE_SVD,
        inputs=["qr.R"],
        outputs=["svd.UB", "S", small_id],
        fn=small_svd,
        self_clocked=True,
    )

    def postprocess():
        _, stats = block_multiply(
            pool,
            runner.matrix("qr.Q"),
            runner.matrix("svd.UB"),
            big_id,
            threads=threads,
            out_precision=precision,
        )
        return {"threads": stats.threads_used}

    runner.step(
        "postprocess", stage=STAGE_POST, inputs=["qr.Q", "svd.UB"], outputs=[big_id], fn=postprocess
    )

    return RsvdResult(
        u=runner.matrix("U"),
        s=runner.matrix("S").to_array().astype(np.float64).ravel(),
        v=runner.matrix("V"),
        chosen_q=0,
        stage_seconds=dict(clock.seconds),
        deficient_columns=tuple(qr_meta.get("deficient", ())),
    )


# -- command drivers (shared by the CLI and resume) ------------------------


def _export_steps(runner: PlanRunner, outdir: str):
    from .formats import write_block_file

    os.makedirs(outdir, exist_ok=True)
    for matrix_id, filename in (("U", "U.blk"), ("S", "S.blk"), ("V", "V.blk")):

        def export(matrix_id=matrix_id, filename=filename):
            mat = runner.matrix(matrix_id)
            write_block_file(os.path.join(outdir, filename), mat)
            if matrix_id == "S":
                values = mat.to_array().astype(np.float64).ravel()
                tmp = os.path.join(outdir, "S.txt.tmp")
                with open(tmp, "w") as f:
                    for value in values:
                        f.write(f"{value:.17g}\n")
                os.replace(tmp, os.path.join(outdir, "S.txt"))
            return {}

        runner.step(f"export-{matrix_id.lower()}", stage=STAGE_POST, inputs=[matrix_id], fn=export)


def _drive_rsvd(runner, pool, config, threads, input_path, outdir) -> RsvdResult:
    from .formats import parse_matrix_market

    runner.step(
        "parse",
        stage=STAGE_PARSE,
        outputs=["A"],
        fn=lambda: parse_matrix_market(input_path, pool, "A", precision=config.precision) and {},
    )
    result = randomized_svd(
        pool, runner.matrix("A"), config, threads=threads, runner=runner
    )
    _export_steps(runner, outdir)
    return result


def _drive_full_svd(runner, pool, config, threads, input_path, outdir) -> RsvdResult:
    from .formats import parse_matrix_market

    runner.step(
        "parse",
        stage=STAGE_PARSE,
        outputs=["A"],
        fn=lambda: parse_matrix_market(input_path, pool, "A", precision=config.precision) and {},
    )
    result = full_svd(pool, runner.matrix("A"), config, threads=threads, runner=runner)
    _export_steps(runner, outdir)
    return result


def _drive_compress_image(runner, pool, config, threads, input_path, output_path) -> RsvdResult:
    from .formats import matrix_from_pgm, write_pgm

    runner.step(
        "parse-image",
        stage=STAGE_PARSE,
        outputs=["A"],
        fn=lambda: matrix_from_pgm(input_path, pool, "A", precision=config.precision) and {},
    )
    result = randomized_svd(
        pool, runner.matrix("A"), config, threads=threads, runner=runner
    )

    runner.step(
        "diagonal",
        stage=STAGE_POST,
        inputs=["S"],
        outputs=["rec.S"],
        fn=lambda: matrix_from_dense(
            pool, "rec.S", np.diag(runner.matrix("S").to_array().ravel()), precision=config.precision
        )
        and {},
    )

    # rebuild U * diag(s) * Vᵀ in whichever association order costs least
    chain_mats = [runner.matrix("U"), runner.matrix("rec.S"), runner.matrix("V").T]
    tree = choose_association([m.desc for m in chain_mats])
    counter = [0]

    def run_node(node) -> StoredMatrix:
        if node.index is not None:
            return chain_mats[node.index]
        left = run_node(node.left)
        right = run_node(node.right)
        out_id = f"rec.t{counter[0]}"
        counter[0] += 1

        def multiply():
            _, stats = block_multiply(
                pool, left, right, out_id, threads=threads, out_precision=config.precision
            )
            return {"threads": stats.threads_used}

        runner.step(
            "reconstruct",
            stage=STAGE_POST,
            inputs=[left.matrix_id, right.matrix_id],
            outputs=[out_id],
            fn=multiply,
        )
        return runner.matrix(out_id)

    image_mat = run_node(tree)

    def write_image():
        write_pgm(output_path, image_mat.to_array().astype(np.float64))
        return {}

    runner.step("write-image", stage=STAGE_POST, inputs=[image_mat.matrix_id], fn=write_image)
    return result


_DRIVERS = {
    "rsvd": _drive_rsvd,
    "svd": _drive_full_svd,
    "compress-image": _drive_compress_image,
}


def run_command(
    command: str,
    input_path: str,
    output_path: str,
    config: RsvdConfig,
    *,
    threads: int = 1,
    fresh: bool = True,
    profile_out: str | None = None,
) -> tuple[RsvdResult, BlockPool, PlanRunner]:
    """Run one factorization command with a durable plan in config.workdir.

    `fresh` wipes any previous plan first; resume goes through `resume()`
    instead, which replays the sequence and completes only pending steps.
    """
    if config.workdir is None:
        raise ValueError("run_command needs config.workdir for its plan state")
    clock = StageClock()
    with clock.timing(STAGE_PARSE):
        store = BlockStore(config.workdir)
        if fresh:
            store.clear_plan()
        store.save_plan_config(
            {
                "command": command,
                "input": os.path.abspath(input_path),
                "output": os.path.abspath(output_path),
                "threads": threads,
                "profile_out": os.path.abspath(profile_out) if profile_out else None,
                "config": config.to_json(),
                "digest": config.digest(),
            }
        )
        pool = BlockPool(store, config.budget)
    runner = PlanRunner(store, pool, config.digest(), clock, abort_after=_abort_after())
    result = _DRIVERS[command](runner, pool, config, threads, input_path, output_path)
    result.stage_seconds = dict(clock.seconds)
    return result, pool, runner


def resume(
    workdir: str, config: RsvdConfig | None = None, *, threads: int | None = None
) -> tuple[RsvdResult, BlockPool, PlanRunner]:
    """Finish an interrupted plan. Refuses to continue under changed settings."""
    config_path = os.path.join(workdir, "plan", "config.json")
    if not os.path.exists(config_path):
        raise PlanNotFoundError(f"no execution plan under {workdir}")
    store = BlockStore(workdir)
    saved = store.load_plan_config()
    if saved is None or "config" not in saved or "digest" not in saved:
        raise PlanNotFoundError(f"plan configuration under {workdir} is unreadable")
    try:
        saved_config = RsvdConfig.from_json(saved["config"], workdir=workdir)
    except (KeyError, ValueError) as e:
        raise PlanNotFoundError(f"plan configuration under {workdir} is unreadable: {e}")
    if saved_config.digest() != saved["digest"]:
        raise ConfigMismatchError(
            "plan configuration does not match its recorded digest; refusing to resume"
        )
    if config is not None and config.digest() != saved["digest"]:
        raise ConfigMismatchError(
            "supplied configuration differs from the one this plan was started with"
        )

    pool = BlockPool(store, saved_config.budget)
    clock = StageClock()
    with clock.timing(STAGE_PARSE):
        completed = {
            step_id: record
            for step_id, record in store.scan_plan().items()
            if record.status == "done" and record.plan_id == saved["digest"]
        }
    runner = PlanRunner(
        store, pool, saved["digest"], clock, completed=completed, abort_after=_abort_after()
    )
    if threads is None:
        threads = saved.get("threads", 1)
    command = saved.get("command")
    if command is None:
        input_id = saved.get("input_matrix", "A")
        a = runner.matrix(input_id)
        runner.next_id = 1  # slot 0 was the original run's ingest step
        result = randomized_svd(pool, a, saved_config, threads=threads, runner=runner)
    else:
        result = _DRIVERS[command](
            runner, pool, saved_config, threads, saved["input"], saved["output"]
        )
    result.stage_seconds = dict(clock.seconds)
    return result, pool, runner
