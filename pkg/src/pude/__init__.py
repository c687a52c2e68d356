"""Prior-free document set expansion from positive and unlabeled data.

Scores every document in an unlabeled collection by how strongly it belongs
with a small labeled seed set, using density-ratio estimates (kernel density
or paired energy networks) that never require the class prior. BM25 and the
prior-dependent nnPU classifier are included as baselines, together with a
transductive evaluation harness.
"""

from .data import (
    Corpus,
    EmbeddedDoc,
    PuTask,
    SynthSpec,
    gen_synthetic,
    load_corpus,
    make_pool_task,
    make_transductive_task,
    save_corpus,
    scar_sample,
)
from .ebm import EmTrainConfig, EnergyPair, LangevinConfig, score_em, train_pude_em
from .evaluation import (
    MethodSpec,
    ScoreReport,
    ThresholdPolicy,
    f1_score,
    precision_recall_at_pct,
    run_experiment,
)
from .kde import KdeConfig, KdeModel, KdePipeline, KdeRatioScorer, train_pude_kde

__all__ = [
    "Corpus",
    "EmbeddedDoc",
    "EmTrainConfig",
    "EnergyPair",
    "KdeConfig",
    "KdeModel",
    "KdePipeline",
    "KdeRatioScorer",
    "LangevinConfig",
    "MethodSpec",
    "PuTask",
    "ScoreReport",
    "SynthSpec",
    "ThresholdPolicy",
    "f1_score",
    "gen_synthetic",
    "load_corpus",
    "make_pool_task",
    "make_transductive_task",
    "precision_recall_at_pct",
    "run_experiment",
    "save_corpus",
    "scar_sample",
    "score_em",
    "train_pude_em",
    "train_pude_kde",
]

__version__ = "0.1.0"
