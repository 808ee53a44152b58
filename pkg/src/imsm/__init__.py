"""Identifiable Markov switching models: inference, estimation and evaluation."""

from .causal import RegimeGraph, classify_samples, graph_f1, regime_graphs
from .datagen import SynthSpec, emit_observations, make_dataset, make_ground_truth
from .errors import MsmError
from .estimation import FitConfig, FitReport, expected_complete_loglik, fit
from .inference import (
    BatchPosteriors,
    PosteriorMarginals,
    brute_force_loglik,
    forward_backward,
    forward_loglik,
    segment,
)
from .io import SequenceBatch, load_model, read_sequences, save_model, write_sequences
from .metrics import mc_l2, model_error, resolve_affine, resolve_permutation, segmentation_f1, transition_equiv_error
from .model import MarkovChain, MsmModel, log_joint, sample_batch, sample_sequence, stationary_distribution, transform_model
from .transitions import (
    AffineWrapped,
    Linear,
    LocallyConnectedMlp,
    Mlp,
    Polynomial,
    polynomial_features,
    random_transition,
)

__version__ = "0.1.0"
