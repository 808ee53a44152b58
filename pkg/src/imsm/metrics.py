"""Evaluation modulo the model's equivalences (state permutations, affine maps)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, RankDeficiencyError, SingularTransformError, StateIndexError

MC_SAMPLES = 100_000
EXHAUSTIVE_MAX_K = 5


@dataclass
class MatchResult:
    """``permutation[i]`` is the estimated component matched to true component ``i``."""

    permutation: tuple
    distances: np.ndarray
    error: float
    method: str


@dataclass
class AffineResolution:
    """Least-squares map ``target ~ A @ source + b``; ``residual`` is the mean L2 misfit."""

    A: np.ndarray
    b: np.ndarray
    residual: float


def cube_samples(m, n_samples=MC_SAMPLES, rng_seed=0, scale=1.0):
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(-scale, scale, size=(n_samples, m))


def mc_l2(f, g, m, n_samples=MC_SAMPLES, rng_seed=0, scale=1.0, samples=None) -> float:
    """Monte-Carlo mean Euclidean distance between two vector fields.

    Points are uniform on ``[-scale, scale]^m`` unless explicit ``samples``
    (e.g. ground-truth latents) are given.
    """
    x = cube_samples(m, n_samples, rng_seed, scale) if samples is None else np.asarray(samples, dtype=float)
    return float(np.linalg.norm(f(x) - g(x), axis=-1).mean())


def distance_matrix(true_fns, est_fns, m, n_samples=MC_SAMPLES, rng_seed=0, samples=None):
    """``D[i, j] = d(true_i, est_j)`` on one shared sample set."""
    x = cube_samples(m, n_samples, rng_seed) if samples is None else np.asarray(samples, dtype=float)
    tv = [f(x) for f in true_fns]
    ev = [g(x) for g in est_fns]
    return np.array([[np.linalg.norm(a - b, axis=-1).mean() for b in ev] for a in tv])


def match_exhaustive(D):
    """Global minimiser of the mean matched cost over all permutations."""
    K = D.shape[0]
    best, best_cost = None, np.inf
    for p in itertools.permutations(range(K)):
        cost = D[np.arange(K), p].mean()
        if cost < best_cost:
            best, best_cost = p, cost
    return tuple(int(i) for i in best)


def match_greedy(D):
    """Each estimated component, in index order, takes its nearest free true component.

    Ties go to the lowest true index.
    """
    K = D.shape[0]
    perm = [-1] * K
    free = list(range(K))
    for j in range(K):
        i = min(free, key=lambda r: (D[r, j], r))
        perm[i] = j
        free.remove(i)
    return tuple(perm)


def resolve_cost(D, mode="auto"):
    K = D.shape[0]
    if D.shape != (K, K):
        raise DimensionError("component counts differ")
    if mode == "auto":
        mode = "exhaustive" if K <= EXHAUSTIVE_MAX_K else "greedy"
    perm = match_exhaustive(D) if mode == "exhaustive" else match_greedy(D)
    dists = D[np.arange(K), perm]
    return MatchResult(perm, dists, float(dists.mean()), mode)


def resolve_permutation(true_fns, est_fns, m=None, mode="auto", n_samples=MC_SAMPLES, rng_seed=0, samples=None):
    """Permutation-resolved mean L2 error between two lists of transition means."""
    if len(true_fns) != len(est_fns):
        raise DimensionError(f"K mismatch: {len(true_fns)} vs {len(est_fns)}")
    if m is None:
        m = true_fns[0].m
    D = distance_matrix(true_fns, est_fns, m, n_samples, rng_seed, samples)
    return resolve_cost(D, mode)


def model_error(true_model, est_model, mode="auto", n_samples=MC_SAMPLES, rng_seed=0):
    """Permutation-resolved transition-mean error between two models."""
    if true_model.K != est_model.K:
        raise DimensionError(f"K mismatch: {true_model.K} vs {est_model.K}")
    return resolve_permutation(true_model.trans_mean, est_model.trans_mean, true_model.m, mode, n_samples, rng_seed)


def _f1_counts(true_labels, pred_labels, K, perm):
    # perm[c] is the predicted label standing for true class c
    inv = np.empty(K, dtype=int)
    inv[list(perm)] = np.arange(K)
    mapped = inv[pred_labels]
    tp = np.array([np.sum((mapped == c) & (true_labels == c)) for c in range(K)])
    fp = np.array([np.sum((mapped == c) & (true_labels != c)) for c in range(K)])
    fn = np.array([np.sum((mapped != c) & (true_labels == c)) for c in range(K)])
    return tp, fp, fn


def _f1(tp, fp, fn):
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


def segmentation_f1(true_labels, pred_labels, K, average="micro", mode="auto"):
    """Best F1 over state relabelings of ``pred_labels`` (labels 0-based).

    ``average="micro"`` pools TP/FP/FN over all steps and classes; ``"macro"``
    averages per-class F1.  Returns ``(f1, perm)`` with ``perm[c]`` the
    predicted label matched to true class ``c``.
    """
    t = np.asarray(true_labels, dtype=int).ravel()
    p = np.asarray(pred_labels, dtype=int).ravel()
    if t.shape != p.shape:
        raise DimensionError("label sequences differ in length")
    for lab in (t, p):
        if lab.size and (lab.min() < 0 or lab.max() >= K):
            raise StateIndexError(f"labels must lie in 0..{K - 1}")

    def score(perm):
        tp, fp, fn = _f1_counts(t, p, K, perm)
        if average == "micro":
            return _f1(tp.sum(), fp.sum(), fn.sum())
        return float(np.mean([_f1(a, b, c) for a, b, c in zip(tp, fp, fn)]))

    if mode == "auto":
        mode = "exhaustive" if K <= EXHAUSTIVE_MAX_K else "greedy"
    if mode == "exhaustive":
        best = max(itertools.permutations(range(K)), key=score)
    else:
        # contingency-greedy: predicted labels in index order take their most overlapping free class
        C = np.array([[np.sum((t == c) & (p == j)) for j in range(K)] for c in range(K)])
        best = match_greedy(-C)
    return float(score(best)), tuple(int(i) for i in best)


def resolve_affine(z_pairs) -> AffineResolution:
    """Fit ``target = A source + b`` to rows ``[source (m) | target (m)]``."""
    P = np.asarray(z_pairs, dtype=float)
    if P.ndim != 2 or P.shape[1] % 2:
        raise DimensionError("pairs must be an (N, 2m) array")
    m = P.shape[1] // 2
    src, dst = P[:, :m], P[:, m:]
    X = np.hstack([src, np.ones((len(P), 1))])
    if len(P) < m + 1 or np.linalg.matrix_rank(X) < m + 1:
        raise RankDeficiencyError(f"need {m + 1} affinely independent source points")
    coef, *_ = np.linalg.lstsq(X, dst, rcond=None)
    A, b = coef[:m].T, coef[m]
    if abs(np.linalg.det(A)) == 0:
        raise SingularTransformError("fitted affine map is singular")
    resid = float(np.linalg.norm(X @ coef - dst, axis=1).mean())
    return AffineResolution(A, b, resid)


def conjugate(f, A, b):
    """``z -> A f(A^{-1}(z - b)) + b`` as a plain callable."""
    Ainv = np.linalg.inv(A)
    return lambda z: f((np.asarray(z) - b) @ Ainv.T) @ A.T + b


def transition_equiv_error(m1, m2, A, b, sigma, n_samples=MC_SAMPLES, rng_seed=0, samples=None) -> float:
    """Mean over ``k`` of ``d(m1[k], A m2[sigma[k]](A^{-1}(. - b)) + b)``."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if abs(np.linalg.det(A)) <= 1e-12:
        raise SingularTransformError("A is singular")
    if sorted(sigma) != list(range(len(m1))) or len(m1) != len(m2):
        raise DimensionError("sigma must be a permutation matching both component lists")
    m = A.shape[0]
    x = cube_samples(m, n_samples, rng_seed) if samples is None else np.asarray(samples, dtype=float)
    errs = [np.linalg.norm(m1[k](x) - conjugate(m2[sigma[k]], A, b)(x), axis=-1).mean() for k in range(len(m1))]
    return float(np.mean(errs))


def resolve_sigma_affine(m1, m2, A, b, n_samples=MC_SAMPLES, rng_seed=0):
    """Permutation minimising :func:`transition_equiv_error` for a fixed affine map."""
    m = np.asarray(A).shape[0]
    x = cube_samples(m, n_samples, rng_seed)
    conj = [conjugate(g, np.asarray(A, float), np.asarray(b, float)) for g in m2]
    D = np.array([[np.linalg.norm(f(x) - g(x), axis=-1).mean() for g in conj] for f in m1])
    res = resolve_cost(D)
    return res.permutation, res.error
