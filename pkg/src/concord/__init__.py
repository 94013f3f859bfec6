"""Survival modelling for multimodal cohorts: Cox and neural survival models,
a transformer aggregator over patch embeddings, early/late fusion, and a
nested cross-validation harness."""

from .attention import (
    AttentionTrace,
    EmbeddingBag,
    HeatmapWeights,
    TransformerConfig,
    TransformerParams,
    aggregate,
    attention_rollout,
    fit_aggregator,
)
from .cox import CoxParams, coefficient_importance, cox_partial_likelihood_loss, fit_cox, predict_risk
from .data_io import CohortBundle, SyntheticSpec, generate_synthetic, load_model, read_cohort, save_model, write_cohort
from .errors import *  # noqa: F401,F403
from .evaluation import (
    DEFAULT_GRID,
    CoxFamily,
    CvReport,
    DenseFamily,
    FitCache,
    ImageFamily,
    MultimodalFamily,
    RandomFamily,
    FoldPlan,
    StratificationResult,
    compare_models,
    compare_to_random,
    make_fold_plan,
    run_nested_cv,
    stratify_hazard,
)
from .fusion import FusionConfig, MultimodalModel, extract_fusion_features, predict_multimodal, train_multimodal
from .neural import DenseConfig, DenseNetParams, fit_dense, forward
from .preprocessing import FeatureVector, Standardizer
from .survival_stats import (
    KmCurve,
    SurvivalRecord,
    TestResult,
    concordance_index,
    fold_ci,
    kaplan_meier,
    log_rank_test,
    mann_whitney_u,
    t_test_one_sample,
    t_test_paired,
)

__version__ = "0.1.0"
