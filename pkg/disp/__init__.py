"""Disp - Discriminate perturbations, estimate embeddings and recover tokens to defend text classifiers."""

__version__ = "0.1.0"

from .text import (
    AttackKind,
    Dataset,
    Document,
    EmbeddingCorpus,
    PerturbationRecord,
    Split,
    detokenize,
    load_dataset,
    load_embedding_corpus,
    save_dataset,
    save_embedding_corpus,
    tokenize,
)
from .attacks import (
    AttackConfig,
    DeleteCharacter,
    EmbedWord,
    InsertCharacter,
    RandomWord,
    SwapCharacters,
    attack_deletion,
    attack_embed,
    attack_insertion,
    attack_random,
    attack_swap,
    oracle_attack,
    perturb_document,
)
from .neural import (
    EncoderConfig,
    EncoderModel,
    Vocabulary,
    backward,
    encode,
    grad_check,
    load_checkpoint,
    make_optimizer,
    optimizer_step,
    save_checkpoint,
)
from .discriminator import (
    DiscriminatorModel,
    PerturbationSet,
    build_training_batch,
    discriminate,
    eval_discriminator,
    train_discriminator,
)
from .estimator import (
    EstimatorModel,
    estimate,
    estimator_rmse,
    extract_window,
    train_estimator,
)
from .knn import (
    HnswIndex,
    KnnResult,
    brute_force_knn,
    build_index,
    load_index,
    nearest_token,
    query,
    save_index,
)
from .recovery import (
    RecoveryReport,
    defend,
    recover,
    recover_with_embeddings,
    recover_with_truth_tokens,
)
from .classifier import ClassifierModel, predict, predict_proba, train_classifier
from .synthetic import SyntheticTaskSpec, Task, generate_synthetic_task
from .evaluation import (
    DefenseModels,
    EvalReport,
    accuracy_table,
    evaluate_task,
    load_task,
    run_defense_eval,
    run_sweep,
    run_transfer_eval,
    train_models,
    verify_report,
    write_report,
)
from .config import RunConfig, apply_overrides, load_config
from .visualize import plot_sweep

__all__ = [
    "__version__",
    # Text data
    "AttackKind",
    "Dataset",
    "Document",
    "EmbeddingCorpus",
    "PerturbationRecord",
    "Split",
    "detokenize",
    "load_dataset",
    "load_embedding_corpus",
    "save_dataset",
    "save_embedding_corpus",
    "tokenize",
    # Attacks
    "AttackConfig",
    "DeleteCharacter",
    "EmbedWord",
    "InsertCharacter",
    "RandomWord",
    "SwapCharacters",
    "attack_deletion",
    "attack_embed",
    "attack_insertion",
    "attack_random",
    "attack_swap",
    "oracle_attack",
    "perturb_document",
    # Neural core
    "EncoderConfig",
    "EncoderModel",
    "Vocabulary",
    "backward",
    "encode",
    "grad_check",
    "load_checkpoint",
    "make_optimizer",
    "optimizer_step",
    "save_checkpoint",
    # Discriminator
    "DiscriminatorModel",
    "PerturbationSet",
    "build_training_batch",
    "discriminate",
    "eval_discriminator",
    "train_discriminator",
    # Estimator
    "EstimatorModel",
    "estimate",
    "estimator_rmse",
    "extract_window",
    "train_estimator",
    # Nearest-neighbor index
    "HnswIndex",
    "KnnResult",
    "brute_force_knn",
    "build_index",
    "load_index",
    "nearest_token",
    "query",
    "save_index",
    # Recovery
    "RecoveryReport",
    "defend",
    "recover",
    "recover_with_embeddings",
    "recover_with_truth_tokens",
    # Classifier
    "ClassifierModel",
    "predict",
    "predict_proba",
    "train_classifier",
    # Evaluation
    "SyntheticTaskSpec",
    "Task",
    "generate_synthetic_task",
    "DefenseModels",
    "EvalReport",
    "accuracy_table",
    "evaluate_task",
    "load_task",
    "run_defense_eval",
    "run_sweep",
    "run_transfer_eval",
    "train_models",
    "verify_report",
    "write_report",
    # Configuration and plotting
    "RunConfig",
    "apply_overrides",
    "load_config",
    "plot_sweep",
]
