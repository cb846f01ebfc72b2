"""Token-level adversarial patch defense for vision transformers.

JSD-based segregation of anomalous tokens, randomized composite token
transformations, a minimal self-contained ViT inference runtime, and a
desk-scale patch attack and evaluation harness.
"""

__version__ = "0.1.0"

from .attack import (
    AttackConfig,
    PatchSpec,
    Placement,
    load_patch,
    optimize_patch,
    optimize_patch_adaptive,
    place_patch,
    sample_placement,
    save_patch,
)
from .defense import DefenseConfig, defend_predict, patch_token_coverage
from .detector import (
    ReferenceProfile,
    calibrate_reference,
    calibrate_threshold,
    load_profile,
    save_profile,
    score_tokens,
    select_anomalous,
)
from .divergence import jsd, jsd_score, kl_divergence, shannon_entropy, softmax_temp
from .errors import TokenShieldError
from .evaluation import Metrics, evaluate
from .model import (
    ModelConfig,
    ModelWeights,
    Prediction,
    TokenSequence,
    forward_from_tokens,
    load_model,
    predict,
    random_weights,
    save_model,
    tokenize,
)
from .transforms import (
    TransformPlan,
    TransformPriors,
    affine_contract,
    apply_composite,
    project_lp,
    sample_transform_plan,
    simplex_transform,
)

__all__ = [
    "AttackConfig",
    "DefenseConfig",
    "Metrics",
    "ModelConfig",
    "ModelWeights",
    "PatchSpec",
    "Placement",
    "Prediction",
    "ReferenceProfile",
    "TokenSequence",
    "TokenShieldError",
    "TransformPlan",
    "TransformPriors",
    "affine_contract",
    "apply_composite",
    "calibrate_reference",
    "calibrate_threshold",
    "defend_predict",
    "evaluate",
    "forward_from_tokens",
    "jsd",
    "jsd_score",
    "kl_divergence",
    "load_model",
    "load_patch",
    "load_profile",
    "optimize_patch",
    "optimize_patch_adaptive",
    "patch_token_coverage",
    "place_patch",
    "predict",
    "project_lp",
    "random_weights",
    "sample_placement",
    "sample_transform_plan",
    "save_model",
    "save_patch",
    "save_profile",
    "score_tokens",
    "select_anomalous",
    "shannon_entropy",
    "simplex_transform",
    "softmax_temp",
    "tokenize",
]
