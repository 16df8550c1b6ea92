"""Multi-label zero-shot image tagging from bags of instance features.

The tagger scores every instance of a bag against a frozen matrix of tag
word vectors, pools the instance scores into one score per tag, and trains
its two dense layers with a pairwise tag-ranking loss.  Because the output
layer is just word vectors, swapping in a wider matrix at prediction time
scores tags that were never seen during training.
"""

__version__ = "0.1.0"

from .data import Bag, Dataset, SynthConfig, generate_synthetic, load_bags, load_dataset, save_dataset
from .embeddings import (
    EmbeddingTable,
    MissingVectorError,
    SemanticMatrix,
    ZeroVectorError,
    build_matrix,
    load_embeddings,
    normalize_table,
)
from .estimator import ZeroShotTagger
from .losses import (
    DegenerateBagError,
    Gradients,
    LossValue,
    backward,
    dataset_loss,
    finite_diff_grad,
    run_gradient_check_suite,
    tag_loss,
)
from .metrics import EvalReport, brute_force_report, evaluate, evaluate_scores, image_ap, prf_at_k, random_baseline
from .model import (
    ForwardTrace,
    ModelParams,
    POOLINGS,
    TASKS,
    forward,
    load_checkpoint,
    pool,
    predict_topk,
    rank_tags,
    save_checkpoint,
)
from .training import AdamState, TrainConfig, TrainingDiverged, adam_step, init_params, train

__all__ = [
    "AdamState",
    "Bag",
    "Dataset",
    "DegenerateBagError",
    "EmbeddingTable",
    "EvalReport",
    "ForwardTrace",
    "Gradients",
    "LossValue",
    "MissingVectorError",
    "ModelParams",
    "POOLINGS",
    "SemanticMatrix",
    "SynthConfig",
    "TASKS",
    "TrainConfig",
    "TrainingDiverged",
    "ZeroShotTagger",
    "ZeroVectorError",
    "adam_step",
    "backward",
    "brute_force_report",
    "build_matrix",
    "dataset_loss",
    "evaluate",
    "evaluate_scores",
    "finite_diff_grad",
    "forward",
    "generate_synthetic",
    "image_ap",
    "init_params",
    "load_bags",
    "load_checkpoint",
    "load_dataset",
    "load_embeddings",
    "normalize_table",
    "pool",
    "predict_topk",
    "prf_at_k",
    "random_baseline",
    "rank_tags",
    "run_gradient_check_suite",
    "save_checkpoint",
    "save_dataset",
    "tag_loss",
    "train",
]
