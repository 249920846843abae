"""Classification of tree-structured samples with costly feature acquisition.

The package wraps the C++ core: HMIL embeddings of partially observed
samples, a hierarchical acquisition policy, actor-critic training, and
cost-accuracy evaluation against random-acquisition and full-information
baselines.
"""

from hmil_cwcf._core import (
    EMBED_DIM,
    Dataset,
    Model,
    Schema,
    TrainConfig,
    __version__,
    evaluate,
    evaluate_budget,
    export_trace,
    generate_synthetic,
    init_model,
    load_dataset,
    load_model,
    pareto_frontier,
    parse_schema,
    pretrain_classifier,
    train,
    train_hmil_full,
    train_rs_baseline,
)

__all__ = [
    "EMBED_DIM",
    "Dataset",
    "Model",
    "Schema",
    "TrainConfig",
    "__version__",
    "evaluate",
    "evaluate_budget",
    "export_trace",
    "generate_synthetic",
    "init_model",
    "load_dataset",
    "load_model",
    "pareto_frontier",
    "parse_schema",
    "pretrain_classifier",
    "train",
    "train_hmil_full",
    "train_rs_baseline",
]
