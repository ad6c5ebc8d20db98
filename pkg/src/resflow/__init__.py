"""Residual-flow density estimation and out-of-distribution detection."""

from .data import (
    FeatureSet,
    SynthSpec,
    generate,
    read_featureset,
    split_featureset,
    write_featureset,
)
from .estimators import (
    GaussianDensityEstimator,
    OodDetectorEstimator,
    ResidualFlowDensityEstimator,
)
from .flow import (
    ResidualFlow,
    TrainConfig,
    TrainHistory,
    build_residual_flow,
    read_flow,
    resflow_forward,
    resflow_inverse,
    resflow_logprob,
    resflow_logprob_grad,
    resflow_sample,
    train_resflow,
    write_flow,
)
from .gaussian import (
    GaussianModel,
    GdaModel,
    fit_gaussian,
    fit_gda,
    gaussian_from_moments,
    gaussian_logprob,
    gda_logprob,
    gda_score,
    linear_forward,
    linear_inverse,
    mahalanobis_score,
    sample_gaussian,
)
from .linalg import (
    EigDecomposition,
    empirical_cov,
    empirical_mean,
    sample_standard_normal,
    sym_eig,
)
from .metrics import (
    EvalReport,
    aupr_in,
    aupr_out,
    auroc,
    detection_accuracy,
    evaluate_detection,
    parse_report,
    report_lines,
    roc_curve,
    tnr_at_tpr,
)
from .pipeline import (
    EPS_GRID,
    Detector,
    DetectorConfig,
    LayerModel,
    detector_score,
    fit_detector,
    fit_layer_models,
    fit_layer_weights,
    layer_scores,
    load_detector,
    mahalanobis_layer_scores,
    perturb_features,
    save_detector,
    tune_detector,
)

__version__ = "0.1.0"

__all__ = [
    "Detector",
    "DetectorConfig",
    "EPS_GRID",
    "EigDecomposition",
    "EvalReport",
    "FeatureSet",
    "GaussianDensityEstimator",
    "GaussianModel",
    "GdaModel",
    "LayerModel",
    "OodDetectorEstimator",
    "ResidualFlow",
    "ResidualFlowDensityEstimator",
    "SynthSpec",
    "TrainConfig",
    "TrainHistory",
    "aupr_in",
    "aupr_out",
    "auroc",
    "build_residual_flow",
    "detection_accuracy",
    "detector_score",
    "empirical_cov",
    "empirical_mean",
    "evaluate_detection",
    "fit_detector",
    "fit_gaussian",
    "fit_gda",
    "fit_layer_models",
    "fit_layer_weights",
    "gaussian_from_moments",
    "gaussian_logprob",
    "gda_logprob",
    "gda_score",
    "generate",
    "layer_scores",
    "linear_forward",
    "linear_inverse",
    "load_detector",
    "mahalanobis_layer_scores",
    "mahalanobis_score",
    "parse_report",
    "perturb_features",
    "read_featureset",
    "read_flow",
    "report_lines",
    "resflow_forward",
    "resflow_inverse",
    "resflow_logprob",
    "resflow_logprob_grad",
    "resflow_sample",
    "roc_curve",
    "sample_gaussian",
    "sample_standard_normal",
    "save_detector",
    "split_featureset",
    "sym_eig",
    "tnr_at_tpr",
    "train_resflow",
    "tune_detector",
    "write_featureset",
    "write_flow",
    "__version__",
]
