"""Regime-dependent lagged causal graphs from averaged absolute Jacobians.

Edge convention: ``adjacency[k, i, j] == 1`` means ``z_{t-1, j} -> z_{t, i}``
within regime ``k``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .inference import forward_backward
from .io import SequenceBatch
from .metrics import EXHAUSTIVE_MAX_K, match_greedy
from .transitions import Linear, LocallyConnectedMlp

DEFAULT_TAU = 0.05


@dataclass
class RegimeGraph:
    weights: np.ndarray  # (K, m, m) mean |d m_i / d z_j|
    adjacency: np.ndarray  # (K, m, m) bool, weights > tau
    counts: np.ndarray  # samples per regime
    tau: float

    @property
    def empty(self):
        return self.counts == 0

    def edge_counts(self):
        return self.adjacency.sum(axis=(1, 2))


def classify_samples(model, batch, posteriors=None):
    """Group Jacobian inputs by regime.

    Every transition step ``t >= 2`` is assigned to ``argmax_k gamma[t, k]``
    (ties to the smaller index) and contributes its input ``z_{t-1}``.
    Returns a list of ``K`` arrays of shape ``(N_k, m)``.
    """
    z = batch.data if isinstance(batch, SequenceBatch) else np.asarray(batch, dtype=float)
    if z.ndim == 2:
        z = z[None]
    if posteriors is None:
        posteriors = forward_backward(model, z)
    gamma = np.asarray(posteriors.gamma)
    if gamma.ndim == 2:
        gamma = gamma[None]
    lab = np.argmax(gamma[:, 1:], axis=-1).ravel()
    inputs = z[:, :-1].reshape(-1, z.shape[2])
    return [inputs[lab == k] for k in range(gamma.shape[-1])]


def regime_graphs(model, sample_sets, tau=DEFAULT_TAU) -> RegimeGraph:
    """Average ``|jacobian|`` of each regime's mean over its samples and threshold strictly at ``tau``.

    Regimes with no samples get zero weights and a zero count.
    """
    if len(sample_sets) != model.K:
        raise DimensionError(f"expected {model.K} sample sets, got {len(sample_sets)}")
    m = model.m
    W = np.zeros((model.K, m, m))
    counts = np.zeros(model.K, dtype=int)
    for k, (f, x) in enumerate(zip(model.trans_mean, sample_sets)):
        x = np.asarray(x, dtype=float).reshape(-1, m)
        counts[k] = len(x)
        if len(x):
            W[k] = np.abs(f.jacobian(x)).mean(axis=0)
    return RegimeGraph(W, W > tau, counts, tau)


def edge_f1(true_mask, est_mask):
    t = np.asarray(true_mask, dtype=bool)
    e = np.asarray(est_mask, dtype=bool)
    tp = np.sum(t & e)
    fp = np.sum(~t & e)
    fn = np.sum(t & ~e)
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


def graph_f1(true_masks, est_graphs, mode="auto"):
    """Mean per-regime edge F1 under the best state permutation.

    ``est_graphs`` is a :class:`RegimeGraph` or a ``(K, m, m)`` binary array.
    Returns ``(f1, perm)`` with ``perm[k]`` the estimated regime matched to
    true regime ``k``.
    """
    t = np.asarray(true_masks).astype(bool)
    e = np.asarray(est_graphs.adjacency if isinstance(est_graphs, RegimeGraph) else est_graphs).astype(bool)
    if t.shape != e.shape or t.ndim != 3:
        raise DimensionError(f"graph shapes differ: {t.shape} vs {e.shape}")
    K = t.shape[0]
    F = np.array([[edge_f1(t[i], e[j]) for j in range(K)] for i in range(K)])
    if mode == "auto":
        mode = "exhaustive" if K <= EXHAUSTIVE_MAX_K else "greedy"
    if mode == "exhaustive":
        perm = max(itertools.permutations(range(K)), key=lambda p: F[np.arange(K), p].mean())
    else:
        perm = match_greedy(-F)
    return float(F[np.arange(K), perm].mean()), tuple(int(i) for i in perm)


def true_masks(model):
    """Structural masks of a model: the LC mask when present, else nonzero Jacobian support on a grid."""
    out = []
    for f in model.trans_mean:
        if isinstance(f, LocallyConnectedMlp):
            out.append(f.mask.astype(bool))
        elif isinstance(f, Linear):
            out.append(f.W != 0)
        else:
            rng = np.random.default_rng(0)
            x = rng.uniform(-1, 1, size=(256, model.m))
            out.append(np.abs(f.jacobian(x)).max(axis=0) > 0)
    return np.array(out)


def to_dot(graph: RegimeGraph, k, names=None) -> str:
    m = graph.weights.shape[1]
    names = names or [f"z{j + 1}" for j in range(m)]
    lines = [f"digraph regime_{k + 1} {{"]
    for n in names:
        lines.append(f'  "{n}";')
    for i in range(m):
        for j in range(m):
            if graph.adjacency[k, i, j]:
                lines.append(f'  "{names[j]}" -> "{names[i]}" [weight={graph.weights[k, i, j]:.6g}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
