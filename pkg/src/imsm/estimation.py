"""EM and generalised-EM fitting of Markov switching models.

Linear and polynomial transition means get exact M-steps (weighted least
squares in monomial feature space).  Network means are updated by gradient
ascent on the responsibility-weighted transition log-likelihood, over
mini-batches of whole sequences.  The chain, the first-frame Gaussians and
the noise covariances are refreshed once per epoch from full-batch
statistics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ConfigError, DimensionError, EstimationError, MsmError
from .inference import BatchPosteriors, forward_backward, forward_loglik
from .io import SequenceBatch
from .model import COV_FLOOR, MarkovChain, MsmModel, floor_cov
from .transitions import Linear, Polynomial, n_poly_features, random_transition

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
EXACT_KINDS = ("linear", "polynomial")
NETWORK_KINDS = ("mlp", "lc_mlp")


@dataclass
class FitConfig:
    K: int
    transition_kind: str = "linear"
    m: int | None = None
    degree: int = 3
    hidden: int = 16
    activation: str = "cosine"
    interactions: int | None = None
    max_epochs: int = 100
    batch_size: int = 500
    learning_rate: float = 7e-3
    lr_decay: float = 0.5
    max_lr_decays: int = 2
    patience: int = 3
    plateau_tol: float = 1e-4
    restarts: int = 1
    rng_seed: int = 0
    cov_floor: float = COV_FLOOR
    diagonal: bool = True
    optimizer: str = "adam"
    threads: int | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.transition_kind not in EXACT_KINDS + NETWORK_KINDS:
            raise ConfigError(f"unknown transition kind {self.transition_kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class FitReport:
    trace: list
    lr_trace: list
    model: MsmModel
    restart: int
    epochs: int
    reason: str
    restart_scores: list = field(default_factory=list)
    events: list = field(default_factory=list)


def _z(batch):
    if isinstance(batch, SequenceBatch):
        return batch.data
    z = np.asarray(batch, dtype=float)
    return z[None] if z.ndim == 2 else z


def _check_shapes(z, post):
    if post.gamma.shape[:2] != z.shape[:2]:
        raise DimensionError(f"posteriors {post.gamma.shape} do not match batch {z.shape}")


def expected_complete_loglik(model: MsmModel, batch, posteriors: BatchPosteriors) -> float:
    """Batch-averaged expected complete-data log-likelihood."""
    return float(sum(_ecll_terms(model, batch, posteriors)))


def _ecll_terms(model, batch, post):
    z = _z(batch)
    _check_shapes(z, post)
    B = z.shape[0]
    g1 = post.gamma[:, 0]
    log_pi = model.chain.log_pi()
    t_pi = np.where(g1 > 0, g1 * log_pi, 0.0).sum() / B
    lQT = model.chain.log_Q().T
    t_Q = np.where(post.xi > 0, post.xi * lQT, 0.0).sum() / B
    em = model.emission_logprob(z)
    t_init = (g1 * em[:, 0]).sum() / B
    t_trans = (post.gamma[:, 1:] * em[:, 1:]).sum() / B
    return t_pi, t_Q, t_init, t_trans


def transition_objective(model: MsmModel, batch, posteriors: BatchPosteriors) -> float:
    """The responsibility-weighted transition term of the expected complete log-likelihood."""
    return float(_ecll_terms(model, batch, posteriors)[3])


def _floor_probs(p):
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def m_step_chain(posteriors: BatchPosteriors, previous_Q=None):
    """Baum-Welch updates ``(pi, Q)``; rows without any transition mass keep ``previous_Q``."""
    pi = _floor_probs(posteriors.gamma[:, 0].sum(axis=0))
    counts = posteriors.xi.sum(axis=(0, 1)).T  # [l, k]
    K = pi.size
    Q = np.empty((K, K))
    for l in range(K):
        row = counts[l]
        if row.sum() > 0:
            Q[l] = _floor_probs(row / row.sum())
        elif previous_Q is not None:
            Q[l] = previous_Q[l]
        else:
            Q[l] = 1.0 / K
    return pi, Q


def _weighted_cov(x, w, floor, diagonal):
    tot = w.sum()
    mu = (w[:, None] * x).sum(axis=0) / tot
    d = x - mu
    S = (w[:, None] * d).T @ d / tot
    if diagonal:
        S = np.diag(np.diag(S))
    return mu, floor_cov(S, floor)


def m_step_initial(batch, posteriors: BatchPosteriors, cov_floor=COV_FLOOR, diagonal=True, previous=None):
    """Weighted Gaussian MLE on first frames.

    Returns ``(mu (K, m), cov (K, m, m), kept)`` where ``kept`` lists states
    with zero responsibility whose ``previous`` parameters were retained.
    """
    z = _z(batch)
    _check_shapes(z, posteriors)
    x = z[:, 0]
    K = posteriors.gamma.shape[2]
    m = z.shape[2]
    mu = np.zeros((K, m))
    cov = np.tile(np.eye(m), (K, 1, 1))
    kept = []
    for k in range(K):
        w = posteriors.gamma[:, 0, k]
        if w.sum() <= 0:
            kept.append(k)
            if previous is not None:
                mu[k], cov[k] = previous[0][k], previous[1][k]
            continue
        mu[k], cov[k] = _weighted_cov(x, w, cov_floor, diagonal)
    return mu, cov, kept


def _solve_weighted_ls(Phi, Y, w, state):
    """``argmin_A sum_n w_n |y_n - A phi_n|^2`` via Cholesky of the Gram matrix."""
    G = (Phi * w[:, None]).T @ Phi
    R = (Y * w[:, None]).T @ Phi
    C = G.shape[0]
    for ridge in (0.0, 1e-9 * np.trace(G) / C):
        Gr = G + ridge * np.eye(C)
        if not np.all(np.isfinite(Gr)):
            break
        if np.linalg.cond(Gr) >= 1e12:
            continue
        try:
            return cho_solve(cho_factor(Gr), R.T).T
        except LinAlgError:
            continue
    raise EstimationError("polynomial Gram matrix is singular beyond ridge rescue", state=state)


def m_step_polynomial(batch, posteriors: BatchPosteriors, degree, previous=None):
    """Exact weighted least-squares update of per-state coefficient matrices.

    Returns ``(coeffs, kept)``; ``coeffs[k]`` has shape ``(m, C)`` over
    graded-lexicographic monomials of ``z_{t-1}``.
    """
    z = _z(batch)
    _check_shapes(z, posteriors)
    m = z.shape[2]
    proto = Polynomial(np.zeros((m, n_poly_features(m, degree))), degree)
    Phi = proto.features(z[:, :-1]).reshape(-1, proto.coeff.shape[1])
    Y = z[:, 1:].reshape(-1, m)
    coeffs, kept = [], []
    for k in range(posteriors.gamma.shape[2]):
        w = posteriors.gamma[:, 1:, k].reshape(-1)
        if w.sum() <= 0:
            kept.append(k)
            coeffs.append(None if previous is None else previous[k])
            continue
        coeffs.append(_solve_weighted_ls(Phi, Y, w, k))
    return coeffs, kept


def m_step_noise(batch, posteriors: BatchPosteriors, model: MsmModel):
    """Responsibility-weighted residual scatter per state, floored.

    Returns ``(cov (K, m, m), kept)``.
    """
    z = _z(batch)
    _check_shapes(z, posteriors)
    m = model.m
    prev, nxt = z[:, :-1].reshape(-1, m), z[:, 1:].reshape(-1, m)
    cov = model.noise_cov.copy()
    kept = []
    for k in range(model.K):
        w = posteriors.gamma[:, 1:, k].reshape(-1)
        tot = w.sum()
        if tot <= 0:
            kept.append(k)
            continue
        r = nxt - model.trans_mean[k].evaluate(prev)
        S = (w[:, None] * r).T @ r / tot
        if model.diagonal:
            S = np.diag(np.diag(S))
        cov[k] = floor_cov(S, model.cov_floor)
    return cov, kept


def transition_gradients(model: MsmModel, batch, posteriors: BatchPosteriors):
    """Per-state gradients of :func:`transition_objective` w.r.t. transition parameters."""
    z = _z(batch)
    _check_shapes(z, posteriors)
    B, m = z.shape[0], model.m
    prev, nxt = z[:, :-1].reshape(-1, m), z[:, 1:].reshape(-1, m)
    grads = []
    for k, f in enumerate(model.trans_mean):
        w = posteriors.gamma[:, 1:, k].reshape(-1)
        r = nxt - f.evaluate(prev)
        cot = np.linalg.solve(model.noise_cov[k], r.T).T * w[:, None]
        grads.append(f.param_vjp(prev, cot) / B)
    return grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def gem_step_networks(model: MsmModel, batch, posteriors: BatchPosteriors, lr, optimizer="sgd", state=None):
    """One ascent step on the weighted transition term for every state.

    ``optimizer="sgd"`` applies ``theta + lr * grad``; ``"adam"`` uses
    bias-corrected Adam moments kept in ``state``.  A non-finite gradient or
    update halves ``lr`` and retries once before raising.

    Returns ``(transitions, state)``.
    """
    grads = transition_gradients(model, batch, posteriors)
    if optimizer == "adam" and state is None:
        state = AdamState([np.zeros_like(g) for g in grads], [np.zeros_like(g) for g in grads])
    for attempt in range(2):
        ok = all(np.all(np.isfinite(g)) for g in grads)
        if ok:
            if optimizer == "adam":
                step = state.step + 1
                m1 = [state.beta1 * a + (1 - state.beta1) * g for a, g in zip(state.m, grads)]
                v1 = [state.beta2 * a + (1 - state.beta2) * g * g for a, g in zip(state.v, grads)]
                deltas = [
                    (a / (1 - state.beta1**step)) / (np.sqrt(b / (1 - state.beta2**step)) + state.eps)
                    for a, b in zip(m1, v1)
                ]
            else:
                deltas = grads
            new = [f.params + lr * d for f, d in zip(model.trans_mean, deltas)]
            ok = all(np.all(np.isfinite(p)) for p in new)
        if ok:
            if optimizer == "adam":
                state = AdamState(m1, v1, step, state.beta1, state.beta2, state.eps)
            return tuple(f.with_params(p) for f, p in zip(model.trans_mean, new)), state
        lr = 0.5 * lr
        log.warning("non-finite GEM step; retrying with lr=%g", lr)
    raise EstimationError("non-finite gradient in GEM step after retry")


def initialize_model(batch, config: FitConfig, rng) -> MsmModel:
    """Starting point: uniform pi, sticky Q, k-means++ first-frame Gaussians, random transitions."""
    z = _z(batch)
    B, T, m = z.shape
    K = config.K
    pi = np.full(K, 1.0 / K)
    Q = np.eye(1) if K == 1 else np.full((K, K), 0.1 / (K - 1)) + np.eye(K) * (0.9 - 0.1 / (K - 1))
    pts = z[:, 0] if B >= 2 * K else z.reshape(-1, m)
    seed = int(rng.integers(2**31))
    if K == 1:
        labels = np.zeros(len(pts), dtype=int)
    else:
        _, labels = kmeans2(pts, K, minit="++", seed=seed)
    glob = np.cov(pts.T, bias=True).reshape(m, m) if len(pts) > 1 else np.eye(m)
    mu = np.zeros((K, m))
    cov = np.zeros((K, m, m))
    for k in range(K):
        sel = pts[labels == k]
        mu[k] = sel.mean(axis=0) if len(sel) else pts[rng.integers(len(pts))]
        c = np.cov(sel.T, bias=True).reshape(m, m) if len(sel) > m else glob
        cov[k] = floor_cov(np.diag(np.diag(c)) if config.diagonal else c, config.cov_floor)
    trans = []
    for k in range(K):
        opts = dict(degree=config.degree, hidden=config.hidden, activation=config.activation)
        if config.transition_kind == "lc_mlp":
            opts["interactions"] = config.interactions or m
        trans.append(random_transition(config.transition_kind, m, rng, **opts))
    if T > 1:
        inc = (z[:, 1:] - z[:, :-1]).reshape(-1, m)
        ncov = np.cov(inc.T, bias=True).reshape(m, m)
    else:
        ncov = np.eye(m)
    if config.diagonal:
        ncov = np.diag(np.diag(ncov))
    ncov = floor_cov(ncov, config.cov_floor)
    return MsmModel(
        chain=MarkovChain(pi, Q),
        init_mean=mu,
        init_cov=cov,
        trans_mean=tuple(trans),
        noise_cov=np.tile(ncov, (K, 1, 1)),
        cov_floor=config.cov_floor,
        diagonal=config.diagonal,
    )


def _exact_mean_update(model, z, post, kind):
    degree = 1 if kind == "linear" else model.trans_mean[0].degree
    prev = [f.params.reshape(model.m, -1) if kind == "polynomial" else None for f in model.trans_mean]
    coeffs, kept = m_step_polynomial(z, post, degree, previous=prev)
    trans = []
    for f, A in zip(model.trans_mean, coeffs):
        if A is None:
            trans.append(f)
        elif kind == "linear":
            trans.append(Linear(A[:, 1:], A[:, 0]))
        else:
            trans.append(Polynomial(A, degree))
    return tuple(trans), kept


def _m_steps_shared(model, z, post):
    pi, Q = m_step_chain(post, previous_Q=model.Q)
    mu, cov, kept = m_step_initial(
        z, post, model.cov_floor, model.diagonal, previous=(model.init_mean, model.init_cov)
    )
    return model.replace(chain=MarkovChain(pi, Q), init_mean=mu, init_cov=cov), kept


def _fit_once(z, config: FitConfig, rng, restart, init=None):
    model = initialize_model(z, config, rng) if init is None else init
    B, T, _ = z.shape
    network = config.transition_kind in NETWORK_KINDS
    trace, lrs, events = [], [], []
    lr, decays, flat = config.learning_rate, 0, 0
    opt_state = None
    reason = "max_epochs"
    epochs = 0
    for epoch in range(config.max_epochs):
        post = forward_backward(model, z, threads=config.threads)
        ll = float(post.loglik.mean())
        if not np.isfinite(ll):
            raise EstimationError("log-likelihood became non-finite", restart=restart)
        trace.append(ll)
        lrs.append(lr if network else 0.0)
        epochs = epoch + 1
        model, kept = _m_steps_shared(model, z, post)
        events += [f"epoch {epoch}: initial state {k} kept" for k in kept]
        if not network:
            trans, kept = _exact_mean_update(model, z, post, config.transition_kind)
            events += [f"epoch {epoch}: transition {k} kept" for k in kept]
            model = model.replace(trans_mean=trans)
            noise, kept = m_step_noise(z, post, model)
            model = model.replace(noise_cov=noise)
        else:
            noise, kept = m_step_noise(z, post, model)
            model = model.replace(noise_cov=noise)
            order = rng.permutation(B)
            for start in range(0, B, config.batch_size):
                idx = np.sort(order[start : start + config.batch_size])
                mb_post = forward_backward(model, z[idx], threads=config.threads)
                trans, opt_state = gem_step_networks(model, z[idx], mb_post, lr, config.optimizer, opt_state)
                model = model.replace(trans_mean=trans)
        events += [f"epoch {epoch}: noise state {k} kept" for k in kept]
        if len(trace) > 1 and (trace[-1] - trace[-2]) / T < config.plateau_tol:
            flat += 1
        else:
            flat = 0
        if flat >= config.patience:
            if network and decays < config.max_lr_decays:
                lr *= config.lr_decay
                decays += 1
                flat = 0
            else:
                reason = "plateau"
                break
        log.debug("restart %d epoch %d mean loglik %.6f", restart, epoch, ll)
    return model, trace, lrs, epochs, reason, events


def fit(batch, config: FitConfig, init: MsmModel | None = None) -> FitReport:
    """Fit an MSM by (G)EM with ``config.restarts`` random restarts.

    The restart with the largest final trace value wins (for zero epochs, the
    initial log-likelihood).  ``init`` replaces the random starting point of
    every restart; mini-batch order still follows the restart seed.
    """
    z = _z(batch)
    if z.shape[0] < 1:
        raise DimensionError("empty batch")
    if config.m is not None and config.m != z.shape[2]:
        raise DimensionError(f"config.m={config.m} but data has m={z.shape[2]}")
    if init is not None and (init.K != config.K or init.m != z.shape[2]):
        raise DimensionError("initial model does not match K or data dimension")
    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.restarts)
    best, scores = None, []
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        try:
            model, trace, lrs, epochs, reason, events = _fit_once(z, config, rng, r, init)
        except EstimationError as exc:
            if exc.restart is None:
                raise EstimationError(str(exc), state=exc.state, restart=r) from exc
            raise
        except MsmError as exc:
            raise EstimationError(str(exc), restart=r) from exc
        score = trace[-1] if trace else float(forward_loglik(model, z).mean())
        scores.append(score)
        if best is None or score > scores[best[0]]:
            best = (r, FitReport(trace, lrs, model, r, epochs, reason, events=events))
    report = best[1]
    report.restart_scores = scores
    return report
