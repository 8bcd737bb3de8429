"""Longitudinal stacked ensembles over multimodal visit sequences.

Per-modality base predictors feed a sequence-to-sequence LSTM stacker that
predicts the next visit's class at every time point; four configurations
cover {time-dependent, time-distributed} base predictors crossed with
{per-step MLP, longitudinal softmax} heads, evaluated under repeated
nested cross-validation and interpreted with static per-visit stacking.
"""

__version__ = "0.1.0"

from .base_predictors import PredictorSpec, fit, predict_proba
from .cohort import (CohortSchema, LabelSequence, LongitudinalCohort, ModalityBlock,
                     export_cohort, load_cohort, load_schema, save_schema, schema_of)
from .bp_tensor import (BasePredictionTensor, FittedBpBank, apply_bank,
                        generate_time_dependent, generate_time_distributed)
from .harness import (BASELINES, CONFIGURATIONS, ExperimentConfig, FoldPlan, MetricsReport,
                      build_fold_plan, compare_configurations, macro_f_measure,
                      run_baseline_early_fusion, run_experiment)
from .interpret import ImportanceTable, build_trajectories, rank_features_at_time
from .losses import LossSpec, class_weights, loss, loss_grad, ordinal_weight
from .preprocess import FittedPreprocessor, PreprocessPlan, knn_impute
from .stacker import StackerConfig, StackerModel, backward, forward, train
from .synth import (GeneratorConfig, ModalitySpec, generate, interaction_preset,
                    table1_preset, trend_preset)

__all__ = [
    "PredictorSpec", "fit", "predict_proba",
    "CohortSchema", "LabelSequence", "LongitudinalCohort", "ModalityBlock",
    "export_cohort", "load_cohort", "load_schema", "save_schema", "schema_of",
    "BasePredictionTensor", "FittedBpBank", "apply_bank",
    "generate_time_dependent", "generate_time_distributed",
    "BASELINES", "CONFIGURATIONS", "ExperimentConfig", "FoldPlan", "MetricsReport",
    "build_fold_plan", "compare_configurations", "macro_f_measure",
    "run_baseline_early_fusion", "run_experiment",
    "ImportanceTable", "build_trajectories", "rank_features_at_time",
    "LossSpec", "class_weights", "loss", "loss_grad", "ordinal_weight",
    "FittedPreprocessor", "PreprocessPlan", "knn_impute",
    "StackerConfig", "StackerModel", "backward", "forward", "train",
    "GeneratorConfig", "ModalitySpec", "generate",
    "interaction_preset", "table1_preset", "trend_preset",
    "__version__",
]
