"""Treatment-effect estimation over spatiotemporal event data, plus causally
guided event forecasting, with a synthetic oracle for verification."""

from .autodiff import Tensor, no_grad
from .causal import CausalModel, CausalModelConfig, train_causal
from .data import DatasetConfig, DatasetSplit, EventCube, SampleWindow, build_samples, \
    derive_treatments, inject_poisson_noise, load_event_csv, split
from .evaluation import MatchedSet, att_error, bacc, nn_match, robustness_experiment
from .predict import BaselinePredictor, PredictorConfig, PredictorInterface, \
    ReweightModule, constraint_loss, estimate_ite, outcome_bounds, train_predictor
from .synthetic import GroundTruth, SyntheticConfig, generate, true_att

__version__ = "0.1.0"
