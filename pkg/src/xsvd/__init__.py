"""Out-of-core randomized SVD with block-tiled, budgeted matrix storage.

Matrices live as grids of tiles that move between memory and disk under
per-matrix byte budgets; every kernel walks a fixed compute-cell grid so
results are bitwise identical across budgets and thread counts. The
pipeline factorizes via Gaussian sketching, optional power passes, panel
QR, and an exact small SVD, leaving a durable step plan that can resume
after interruption.
"""

from .core import (
    BlockPartition,
    DenseBlock,
    Density,
    IndexWidth,
    MatrixDescriptor,
    Precision,
    SparseBlock,
    transpose_view,
)
from .errors import (
    BlockAbsentError,
    BlockCorruptError,
    BudgetError,
    ConfigMismatchError,
    ConvergenceError,
    FormatError,
    ParseError,
    PlanNotFoundError,
    ShapeError,
    XsvdError,
)
from .formats import (
    matrix_from_pgm,
    parse_matrix_market,
    read_block_file,
    read_matrix_market_info,
    read_pgm,
    write_block_file,
    write_matrix_market,
    write_pgm,
)
from .kernels import (
    MultiplyStats,
    QRResult,
    SmallSVDResult,
    block_multiply,
    full_svd_array,
    gram,
    svd_small,
    thin_qr,
)
from .planner import (
    CostEstimate,
    MemoryBudget,
    choose_association,
    choose_threads,
    estimate_product,
    partition_for_budget,
    residency_check,
)
from .pool import (
    BlockPool,
    StoredMatrix,
    create_matrix,
    matrix_from_coo,
    matrix_from_dense,
)
from .pipeline import (
    STAGE_NAMES,
    PlanRunner,
    RsvdConfig,
    RsvdResult,
    StageClock,
    auto_select_q,
    full_svd,
    gaussian_matrix,
    power_apply,
    randomized_svd,
    resume,
    run_command,
)
from .store import BlockStore, StepRecord

__version__ = "0.1.0"

__all__ = [
    "BlockAbsentError",
    "BlockCorruptError",
    "BlockPartition",
    "BlockPool",
    "BlockStore",
    "BudgetError",
    "ConfigMismatchError",
    "ConvergenceError",
    "CostEstimate",
    "DenseBlock",
    "Density",
    "FormatError",
    "IndexWidth",
    "MatrixDescriptor",
    "MemoryBudget",
    "MultiplyStats",
    "ParseError",
    "PlanNotFoundError",
    "PlanRunner",
    "Precision",
    "QRResult",
    "RsvdConfig",
    "RsvdResult",
    "ShapeError",
    "SmallSVDResult",
    "SparseBlock",
    "transpose_view",
    "STAGE_NAMES",
    "StageClock",
    "StepRecord",
    "StoredMatrix",
    "XsvdError",
    "auto_select_q",
    "block_multiply",
    "choose_association",
    "choose_threads",
    "create_matrix",
    "estimate_product",
    "full_svd",
    "full_svd_array",
    "gaussian_matrix",
    "gram",
    "matrix_from_coo",
    "matrix_from_dense",
    "matrix_from_pgm",
    "parse_matrix_market",
    "partition_for_budget",
    "power_apply",
    "randomized_svd",
    "read_block_file",
    "read_matrix_market_info",
    "read_pgm",
    "resume",
    "residency_check",
    "run_command",
    "svd_small",
    "thin_qr",
    "write_block_file",
    "write_matrix_market",
    "write_pgm",
    "__version__",
]
