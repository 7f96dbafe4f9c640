"""Post-training low-rank compression of dense weight matrices.

Factorizes weight matrices by truncated SVD, compensates the truncation error
with alternating pseudoinverse refits against calibration activations, and
allocates per-layer retention ratios from input/output similarity scores.
"""

from .allocation import (
    BlockPlan,
    CompressionPlan,
    assign_ratios,
    build_plan,
    layer_importance,
    normalize_importance,
)
from .calibration import (
    BucketedCalib,
    CalibrationBatch,
    capture_activations,
    gram_accumulate,
    stack_of_batch,
)
from .compensation import LossTrace, compensate, plain_truncation_loss, svd_loss, update_u, update_v
from .errors import (
    BudgetError,
    DegenerateImportance,
    FormatError,
    IoError,
    LowrankError,
    ManifestMismatch,
    NumericalError,
    RankError,
    ShapeError,
)
from .linalg import (
    LowRankPair,
    SvdFactors,
    Whitener,
    cholesky_damped,
    pinv,
    rank_for_retention,
    svd_full,
    truncate_absorb,
)
from .model import (
    BlockSpec,
    ModelHandle,
    ModelManifest,
    forward,
    gen_synthetic,
    load_calibration,
    load_model,
    save_calibration,
    save_compressed,
    save_model,
)
from .pipeline import (
    EvalReport,
    PipelineConfig,
    compress_model,
    eval_compression,
    split_calibration,
)

__version__ = "0.1.0"
