"""Exact state posteriors and likelihoods by log-space forward-backward."""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, EnumerationTooLargeError
from .model import MsmModel, log_joint

MAX_PATHS = 10**6
CHUNK = 128


@dataclass
class PosteriorMarginals:
    """Smoothed posteriors of one sequence (states 0-based).

    gamma : (T, K), ``gamma[t, k] = p(s_t = k | z)``.
    xi : (T-1, K, K), ``xi[t-1, k, l] = p(s_t = k, s_{t-1} = l | z)`` for t >= 2.
    loglik : ``log p(z)``.
    """

    gamma: np.ndarray
    xi: np.ndarray
    loglik: float


@dataclass
class BatchPosteriors:
    """Posteriors for a batch; same layout as :class:`PosteriorMarginals` with a leading axis."""

    gamma: np.ndarray
    xi: np.ndarray
    loglik: np.ndarray

    def __len__(self):
        return self.gamma.shape[0]

    def __getitem__(self, b):
        if isinstance(b, (int, np.integer)):
            return PosteriorMarginals(self.gamma[b], self.xi[b], float(self.loglik[b]))
        return BatchPosteriors(self.gamma[b], self.xi[b], self.loglik[b])


def _as_batch(model, z):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 2
    if single:
        z = z[None]
    if z.ndim != 3 or z.shape[2] != model.m or z.shape[1] < 1:
        raise DimensionError(f"expected (T, {model.m}) or (B, T, {model.m}), got {z.shape}")
    return z, single


def _lse(a, axis):
    mx = np.max(a, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(a - mx).sum(axis=axis)) + np.squeeze(mx, axis=axis)


def _forward(log_pi, log_Q, log_b):
    B, T, K = log_b.shape
    la = np.empty_like(log_b)
    la[:, 0] = log_pi + log_b[:, 0]
    for t in range(1, T):
        la[:, t] = _lse(la[:, t - 1, :, None] + log_Q, axis=1) + log_b[:, t]
    return la


def _backward(log_Q, log_b):
    B, T, K = log_b.shape
    lb = np.zeros_like(log_b)
    for t in range(T - 2, -1, -1):
        lb[:, t] = _lse(log_Q + (log_b[:, t + 1] + lb[:, t + 1])[:, None, :], axis=2)
    return lb


def _chunks(n, size):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _map_chunks(fn, z, threads):
    parts = _chunks(z.shape[0], CHUNK)
    if threads and threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda s: fn(z[s]), parts))
    return [fn(z[s]) for s in parts]


def forward_loglik(model: MsmModel, z, threads=None):
    """``log p(z_{1:T})``; a float for one (T, m) sequence, an array for a batch."""
    z, single = _as_batch(model, z)
    log_pi, log_Q = model.chain.log_pi(), model.chain.log_Q()

    def run(zc):
        return logsumexp(_forward(log_pi, log_Q, model.emission_logprob(zc))[:, -1], axis=1)

    ll = np.concatenate(_map_chunks(run, z, threads))
    return float(ll[0]) if single else ll


def _smooth(model, zc):
    log_pi, log_Q = model.chain.log_pi(), model.chain.log_Q()
    log_b = model.emission_logprob(zc)
    la = _forward(log_pi, log_Q, log_b)
    lb = _backward(log_Q, log_b)
    ll = logsumexp(la[:, -1], axis=1)
    gamma = np.exp(la + lb - ll[:, None, None])
    gamma /= gamma.sum(axis=2, keepdims=True)
    # xi[b, t-1, k, l] = alpha_{t-1}(l) Q[l, k] b_t(k) beta_t(k) / p(z)
    lxi = (
        la[:, :-1, None, :]
        + log_Q.T[None, None]
        + (log_b[:, 1:] + lb[:, 1:])[:, :, :, None]
        - ll[:, None, None, None]
    )
    xi = np.exp(lxi)
    if xi.shape[1]:
        xi /= xi.sum(axis=(2, 3), keepdims=True)
    return gamma, xi, ll


def forward_backward(model: MsmModel, z, threads=None):
    """Smoothed posteriors.

    A single ``(T, m)`` sequence gives :class:`PosteriorMarginals`; a
    ``(B, T, m)`` batch gives :class:`BatchPosteriors`.  Sequences are
    processed in fixed-size chunks, optionally on a thread pool; results do not
    depend on the thread count.
    """
    z, single = _as_batch(model, z)
    parts = _map_chunks(lambda zc: _smooth(model, zc), z, threads)
    post = BatchPosteriors(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )
    return post[0] if single else post


def brute_force_loglik(model: MsmModel, z) -> float:
    """Log of the sum of ``exp(log_joint)`` over all ``K^T`` state paths."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2:
        raise DimensionError("brute force works on a single (T, m) sequence")
    T = z.shape[0]
    if model.K**T > MAX_PATHS:
        raise EnumerationTooLargeError(f"K^T = {model.K}^{T} exceeds {MAX_PATHS} paths")
    vals = [log_joint(model, z, np.array(p)) for p in itertools.product(range(model.K), repeat=T)]
    return float(logsumexp(vals))


def brute_force_posteriors(model: MsmModel, z) -> PosteriorMarginals:
    """Path-enumeration posteriors; a test oracle for :func:`forward_backward`."""
    z = np.asarray(z, dtype=float)
    T, K = z.shape[0], model.K
    if K**T > MAX_PATHS:
        raise EnumerationTooLargeError(f"K^T = {K}^{T} exceeds {MAX_PATHS} paths")
    paths = list(itertools.product(range(K), repeat=T))
    lj = np.array([log_joint(model, z, np.array(p)) for p in paths])
    ll = logsumexp(lj)
    w = np.exp(lj - ll)
    gamma = np.zeros((T, K))
    xi = np.zeros((max(T - 1, 0), K, K))
    for p, wp in zip(paths, w):
        for t in range(T):
            gamma[t, p[t]] += wp
            if t:
                xi[t - 1, p[t], p[t - 1]] += wp
    return PosteriorMarginals(gamma, xi, float(ll))


def segment(posterior) -> np.ndarray:
    """Per-step MAP state from ``gamma``; ties go to the smaller index."""
    return np.argmax(np.asarray(posterior.gamma), axis=-1)
