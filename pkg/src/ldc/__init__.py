"""Few-shot logits deconfusion over precomputed vision-language features.

Pipeline: zero-shot scores from cosine similarity against class text
embeddings, a multi-level adapter-fusion stream, a residual inter-class
deconfusion stream, and an adaptive convex fusion of the two, trained
jointly with cross-entropy and zero-shot-similarity losses.

The hot numeric kernels live in :mod:`ldc.kernels` with a compiled core
and a NumPy fallback selected at import (``LDC_BACKEND`` overrides).
"""

from .alf import AlphaGenerator, alf_fuse, alpha_gen, parse_strategy
from .bundle import (
    EpisodeSplit,
    FeatureBundle,
    read_bundle,
    sample_few_shot,
    write_bundle,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    LdcError,
    NumericError,
    ShapeError,
)
from .icd import IcdHead, icd_forward, init_icd_head
from .kernels import BACKEND
from .maf import (
    Adapter,
    MafHead,
    adapter_forward,
    init_adapter,
    learnable_fusion,
    maf_forward,
    weighted_fusion,
)
from .model import (
    LdcModel,
    ModelConfig,
    forward_batch,
    init_model,
    load_model,
    save_model,
)
from .nn import (
    AdamWState,
    LinearLayer,
    adamw_step,
    cross_entropy,
    finite_diff_grad,
    init_adamw,
    l1_loss,
    linear_forward,
    relu,
    sigmoid,
    softmax,
)
from .synth import (
    GroundTruth,
    SynthSpec,
    confusion_recovery_score,
    gen_synthetic,
    nearest_prototype_oracle,
    recovered_confusion,
    zs_accuracy,
)
from .training import (
    EvalReport,
    LossToggles,
    TrainConfig,
    TrainResult,
    evaluate,
    total_loss,
    train,
    with_strategy,
)
from .zeroshot import TextEmbeddingSet, ZeroShotScores, cosine_sim, zs_logits

__version__ = "0.1.0"

__all__ = [
    "Adapter", "AdamWState", "AlphaGenerator", "BACKEND", "ConfigError",
    "ContractError", "DataError", "EpisodeSplit", "EvalReport",
    "FeatureBundle", "GroundTruth", "IcdHead", "LdcError", "LdcModel",
    "LinearLayer", "LossToggles", "MafHead", "ModelConfig", "NumericError",
    "ShapeError", "SynthSpec", "TextEmbeddingSet", "TrainConfig",
    "TrainResult", "ZeroShotScores", "adamw_step", "adapter_forward",
    "alf_fuse", "alpha_gen", "confusion_recovery_score", "cosine_sim",
    "cross_entropy", "evaluate", "finite_diff_grad", "forward_batch",
    "gen_synthetic", "icd_forward", "init_adamw", "init_adapter",
    "init_icd_head", "init_model", "l1_loss", "learnable_fusion",
    "linear_forward", "load_model", "maf_forward", "nearest_prototype_oracle",
    "parse_strategy", "read_bundle", "recovered_confusion", "relu",
    "sample_few_shot", "save_model", "sigmoid", "softmax", "total_loss",
    "train", "weighted_fusion", "with_strategy", "write_bundle",
    "zs_accuracy", "zs_logits",
]
