"""Gradient-based training-data valuation, adaptive per-epoch subset selection
and frequency-based coresets for small MLP classifiers."""
from .clustering import KMeans, kmeans
from .coreset import Coreset, FrequencyCounter, build_coreset
from .data import Dataset, corrupt_labels, gen_blobs, gen_moons, load_csv, load_idx, split_dataset
from .estimators import FrequencyCoreset, SubsetSGDClassifier
from .nn import GradVector, ModelSpec, ParamVector, per_sample_grads
from .selection import SelectionConfig, select_data_si, select_gradnorm
from .valuation import ValuationTable, build_valuation_table, data_si, grad_norm

__version__ = "0.1.0"

__all__ = [
    "Coreset", "Dataset", "FrequencyCoreset", "FrequencyCounter", "GradVector", "KMeans",
    "ModelSpec", "ParamVector", "SelectionConfig", "SubsetSGDClassifier", "ValuationTable",
    "build_coreset", "build_valuation_table", "corrupt_labels", "data_si", "gen_blobs",
    "gen_moons", "grad_norm", "kmeans", "load_csv", "load_idx", "per_sample_grads",
    "select_data_si", "select_gradnorm", "split_dataset",
]
