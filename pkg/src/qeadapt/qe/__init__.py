"""WER prediction: feature extraction and extremely randomized trees."""

from .features import FEATURE_NAMES, N_FEATURES, extract_features, train_class_lm
from .xrt import XrtModel, XrtParams, mae, tune_cv, xrt_fit, xrt_predict

__all__ = [
    "FEATURE_NAMES", "N_FEATURES", "extract_features", "train_class_lm",
    "XrtModel", "XrtParams", "mae", "tune_cv", "xrt_fit", "xrt_predict",
]
