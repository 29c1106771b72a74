"""Hierarchical stochastic models for Bayesian model calibration.

Closed-form evidences for linear model classes, importance-sampling and
empirical-interpolation estimators of the hierarchical likelihood, a TMCMC
sampler, and the synthetic experiments that exercise them.
"""

from .core import (
    BoxPrior,
    CallableModel,
    DataPoint,
    DataSet,
    ForwardModel,
    GaussianNoiseLikelihood,
    GaussianSpec,
    GroupedData,
    HyperParams,
    LinearModel,
    NoiseParams,
    PowerModel,
    UniformSpec,
)
from .eim import (
    EimDegenerateError,
    EimGridSpec,
    EimModel,
    FlooringStats,
    eim_error,
    hs3_hyperposterior,
    hs3_log_likelihood,
    hs3_log_likelihood_batch,
    load_eim_model,
    save_eim_model,
    solve_coefficients,
    train_eim,
)
from .experiments import (
    GroupingScheme,
    ModelClassSpec,
    PredictionGrid,
    SelectionReport,
    SyntheticSpec,
    apply_grouping,
    generate_data,
    generate_grouped_data,
    prediction_grid,
    run_grouping_study,
    run_model_selection,
    run_reduced_order_study,
    run_separation_study,
)
from .importance import (
    DatasetInference,
    HsmLikelihoodEstimator,
    conjugate_inference,
    hsm_add_groups,
    hsm_hyperposterior,
    hsm_log_likelihood,
    is_group_log_evidence_hs1,
    is_group_log_evidence_hs2,
    read_inferences,
    tmcmc_inference,
    write_inferences,
)
from .linear import (
    log_cond_evidence_m1a,
    log_cond_evidence_m1b,
    log_cond_evidence_m2a,
    log_cond_evidence_m2b,
)
from .samplers import TmcmcConfig, TmcmcResult, WeightedSamples, ZeroEvidenceError, tmcmc_run

__version__ = "0.1.0"

__all__ = [
    "BoxPrior",
    "CallableModel",
    "DataPoint",
    "DataSet",
    "DatasetInference",
    "EimDegenerateError",
    "EimGridSpec",
    "EimModel",
    "FlooringStats",
    "ForwardModel",
    "GaussianNoiseLikelihood",
    "GaussianSpec",
    "GroupedData",
    "GroupingScheme",
    "HsmLikelihoodEstimator",
    "HyperParams",
    "LinearModel",
    "ModelClassSpec",
    "NoiseParams",
    "PowerModel",
    "PredictionGrid",
    "SelectionReport",
    "SyntheticSpec",
    "TmcmcConfig",
    "TmcmcResult",
    "UniformSpec",
    "WeightedSamples",
    "ZeroEvidenceError",
    "apply_grouping",
    "conjugate_inference",
    "eim_error",
    "generate_data",
    "generate_grouped_data",
    "hs3_hyperposterior",
    "hs3_log_likelihood",
    "hs3_log_likelihood_batch",
    "hsm_add_groups",
    "hsm_hyperposterior",
    "hsm_log_likelihood",
    "is_group_log_evidence_hs1",
    "is_group_log_evidence_hs2",
    "load_eim_model",
    "log_cond_evidence_m1a",
    "log_cond_evidence_m1b",
    "log_cond_evidence_m2a",
    "log_cond_evidence_m2b",
    "prediction_grid",
    "read_inferences",
    "run_grouping_study",
    "run_model_selection",
    "run_reduced_order_study",
    "run_separation_study",
    "save_eim_model",
    "solve_coefficients",
    "tmcmc_inference",
    "tmcmc_run",
    "train_eim",
    "write_inferences",
]
