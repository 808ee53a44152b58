"""Synthetic ground-truth models and datasets.

Defaults follow the usual MSM simulation protocol: sticky cyclic chain
(stay with probability 0.9, otherwise move to the next state), ``pi`` the
stationary distribution, first-frame means ``N(0, 0.7^2 I)`` with covariance
``0.1^2 I`` and transition noise ``0.05^2 I``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .causal import regime_graphs, true_masks
from .errors import ConfigError, InvariantError
from .io import SequenceBatch
from .model import MarkovChain, MsmModel, sample_batch, stationary_distribution
from .transitions import LEAKY_SLOPE, Mlp, random_transition

MAX_ATTEMPTS = 10
BOUND = 3.0
BOUND_MASS = 0.999
BOUND_SAMPLES = 100_000


@dataclass
class EmissionSpec:
    n: int
    hidden: int = 8
    negative_slope: float = LEAKY_SLOPE


@dataclass
class SynthSpec:
    K: int = 3
    m: int = 2
    T: int = 200
    N: int = 10_000
    kind: str = "mlp"
    activation: str = "cosine"
    degree: int = 3
    hidden: int = 16
    interactions: int = 3
    p_stay: float = 0.9
    init_mean_scale: float = 0.7
    init_cov_scale: float = 0.1
    noise_scale: float = 0.05
    gain: float = 1.0
    min_edge_weight: float = 0.0
    rng_seed: int = 0
    emission: EmissionSpec | None = None

    def __post_init__(self):
        if not 0 < self.p_stay < 1:
            raise ConfigError("p_stay must lie strictly between 0 and 1")
        if min(self.init_mean_scale, self.init_cov_scale, self.noise_scale, self.gain) <= 0:
            raise ConfigError("scales must be positive")
        if self.K < 1 or self.m < 1 or self.T < 1 or self.N < 1:
            raise ConfigError("K, m, T and N must be >= 1")
        if isinstance(self.emission, dict):
            self.emission = EmissionSpec(**self.emission)
        if self.emission is not None:
            if self.emission.n < self.m:
                raise ConfigError("emission output dimension must be >= m")
            if self.emission.negative_slope != LEAKY_SLOPE:
                raise ConfigError(f"only negative_slope={LEAKY_SLOPE} is supported")

    def seeds(self):
        """Independent streams for (model, data, emission)."""
        return np.random.SeedSequence(self.rng_seed).spawn(3)


def cyclic_transition_matrix(K, p_stay):
    if K == 1:
        return np.ones((1, 1))
    Q = np.eye(K) * p_stay
    Q[np.arange(K), (np.arange(K) + 1) % K] = 1.0 - p_stay
    return Q


def _bounded(model, T):
    n = max(1, math.ceil(BOUND_SAMPLES / T))
    z, _ = sample_batch(model, n, T, 12345)
    if not np.all(np.isfinite(z)):
        return False
    return bool(np.all((np.abs(z) <= BOUND).mean(axis=(0, 1)) >= BOUND_MASS))


def _edges_strong(model, spec):
    """Every structural edge has averaged |Jacobian| of at least ``min_edge_weight`` on the model's own data."""
    if spec.min_edge_weight <= 0:
        return True
    z, s = sample_batch(model, max(1, math.ceil(BOUND_SAMPLES / spec.T)), spec.T, 12345)
    inputs = z[:, :-1].reshape(-1, spec.m)
    lab = s[:, 1:].ravel()
    g = regime_graphs(model, [inputs[lab == k] for k in range(spec.K)], tau=0.0)
    mask = true_masks(model)
    return bool(np.all(g.weights[mask] >= spec.min_edge_weight))


def make_ground_truth(spec: SynthSpec) -> MsmModel:
    """Random ground-truth MSM; resampled until states are distinguishable and trajectories bounded."""
    Q = cyclic_transition_matrix(spec.K, spec.p_stay)
    pi = np.ones(1) if spec.K == 1 else stationary_distribution(Q)
    chain = MarkovChain(pi / pi.sum(), Q)
    m = spec.m
    attempts = spec.seeds()[0].spawn(MAX_ATTEMPTS)
    for ss in attempts:
        rng = np.random.default_rng(ss)
        mu = spec.init_mean_scale * rng.standard_normal((spec.K, m))
        trans = tuple(
            random_transition(
                spec.kind,
                m,
                rng,
                degree=spec.degree,
                hidden=spec.hidden,
                activation=spec.activation,
                interactions=min(spec.interactions, m),
                gain=spec.gain,
            )
            for _ in range(spec.K)
        )
        model = MsmModel(
            chain=chain,
            init_mean=mu,
            init_cov=np.tile(spec.init_cov_scale**2 * np.eye(m), (spec.K, 1, 1)),
            trans_mean=trans,
            noise_cov=np.tile(spec.noise_scale**2 * np.eye(m), (spec.K, 1, 1)),
        )
        if model.unique_indexing_holds() and _bounded(model, spec.T) and _edges_strong(model, spec):
            return model
    raise InvariantError(f"no admissible ground truth after {MAX_ATTEMPTS} attempts")


def make_dataset(model: MsmModel, spec: SynthSpec) -> SequenceBatch:
    """``spec.N`` labelled sequences of length ``spec.T`` drawn from ``model``."""
    z, s = sample_batch(model, spec.N, spec.T, spec.seeds()[1])
    return SequenceBatch(z, s)


def make_emission(m, emission: EmissionSpec, rng_seed=None) -> Mlp:
    """Random two-layer leaky-ReLU network from ``m`` to ``emission.n`` dimensions."""
    return random_transition("mlp", m, rng_seed, hidden=emission.hidden, activation="leaky_relu", out_dim=emission.n)


def emit_observations(batch: SequenceBatch, net) -> SequenceBatch:
    """Apply the same noiseless map to every frame."""
    x = net(batch.data)
    return SequenceBatch(x, batch.labels, batch.dates)
