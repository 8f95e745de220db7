"""Class-imbalance toolkit for volumetric classification.

A small numpy/numba tensor engine, a per-class multi-path 3D CNN, SMOTE and
random resampling, bagging and SAMME boosting, focal loss and mixup, the
usual imbalance metrics, and a synthetic four-class volume generator.
"""

from ._kernels import get_backend, set_backend
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import LabeledDataset, load_dataset, save_dataset, split
from .ensembles import WeightedEnsemble, adaboost_train, bagging_train, ensemble_vote
from .errors import ConfigError, FormatError, PopulationError, ShapeError, TrainingError
from .experiment import ExperimentConfig, parse_strategy, run_experiment
from .losses import FocalConfig, MixupConfig, cross_entropy, focal_loss, mixup_pair
from .metrics import ConfusionMatrix, confusion_matrix, macro_f1, macro_g_mean
from .multipath import (
    MultiPathModel,
    PathSpec,
    TrainConfig,
    assemble_multipath,
    build_path,
    ovr_predict,
    train_binary_path,
    train_multipath,
)
from .sampling import random_oversample, random_undersample, smote
from .synthcryo import DatasetManifest, generate_dataset

__version__ = "0.1.0"
