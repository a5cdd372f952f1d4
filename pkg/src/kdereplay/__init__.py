"""Domain-incremental continual learning with KDE-based generative latent replay.

The package trains a fully connected classifier head over latent feature
vectors across a sequence of shifted domains, replaying synthetic latents from
an incrementally grown kernel density estimate and distilling from the
previous model to control catastrophic forgetting. Baseline strategies (naive,
joint, reservoir latent buffer, per-domain GMM replay) and the full evaluation
suite (ACC / ILM / BWT plus generator-fidelity metrics) are included.
"""

from .cluster import KMeans, KScanEntry, bic_score, select_k_bic
from .continual import (
    EpisodeOutcome,
    HybridBatch,
    ReservoirBuffer,
    RunResult,
    STRATEGY_KINDS,
    StrategyConfig,
    assemble_hybrid_batch,
    pseudo_label,
    run_sequence,
    train_episode,
)
from .datasets import (
    DomainSpec,
    EpisodeSequence,
    LatentDataset,
    STANDARD_SEQUENCE_ORDERS,
    apply_domain_transform,
    build_sequence,
    concat_datasets,
    load_dataset,
    make_split,
    save_dataset,
    synthesize_domain,
    synthetic_benchmark,
    transformed_component_means,
)
from .density import GaussianMixture, GmmBank, KdeGenerator, silverman_bandwidth
from .metrics import (
    FidelityConfig,
    FidelityReport,
    LoglikRow,
    TrainTestMatrix,
    acc,
    bwt,
    cosine_avg,
    euclidean_avg,
    fid,
    fidelity_report,
    ilm,
    loglik_comparison,
    loglik_table,
    mmd,
)
from .mlp import AdamOptimizer, LossBreakdown, MlpClassifier, SgdOptimizer, make_optimizer

__version__ = "0.1.0"

from .experiment import (  # noqa: E402  (needs __version__ above)
    ConfigError,
    ExperimentConfig,
    load_config,
    run_experiment,
    standard_benchmark_config,
)

__all__ = [
    "AdamOptimizer",
    "ConfigError",
    "DomainSpec",
    "ExperimentConfig",
    "EpisodeOutcome",
    "EpisodeSequence",
    "FidelityConfig",
    "FidelityReport",
    "GaussianMixture",
    "GmmBank",
    "HybridBatch",
    "KMeans",
    "KScanEntry",
    "KdeGenerator",
    "LatentDataset",
    "LoglikRow",
    "LossBreakdown",
    "MlpClassifier",
    "ReservoirBuffer",
    "RunResult",
    "STANDARD_SEQUENCE_ORDERS",
    "STRATEGY_KINDS",
    "SgdOptimizer",
    "StrategyConfig",
    "TrainTestMatrix",
    "acc",
    "apply_domain_transform",
    "assemble_hybrid_batch",
    "bic_score",
    "build_sequence",
    "bwt",
    "concat_datasets",
    "cosine_avg",
    "euclidean_avg",
    "fid",
    "fidelity_report",
    "ilm",
    "load_config",
    "load_dataset",
    "loglik_comparison",
    "loglik_table",
    "make_optimizer",
    "make_split",
    "mmd",
    "pseudo_label",
    "run_experiment",
    "run_sequence",
    "save_dataset",
    "select_k_bic",
    "silverman_bandwidth",
    "standard_benchmark_config",
    "synthesize_domain",
    "synthetic_benchmark",
    "train_episode",
    "transformed_component_means",
]
