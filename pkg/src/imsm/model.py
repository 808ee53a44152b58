"""Markov switching model parameters, exact densities and sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.stats import qmc

from .errors import (
    DimensionError,
    InvariantError,
    NonFiniteError,
    ReducibleChainError,
    SingularTransformError,
    StateIndexError,
)
from .transitions import AffineWrapped, TransitionFunction

COV_FLOOR = 1e-6
STOCHASTIC_TOL = 1e-12
LOG_2PI = np.log(2.0 * np.pi)


def floor_cov(cov, floor=COV_FLOOR):
    """Clip the eigenvalues of a symmetric matrix from below at ``floor``.

    Matrices that already satisfy the floor are returned symmetrised but
    otherwise untouched, so valid parameters survive bit-for-bit.
    """
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T) if not np.array_equal(cov, cov.T) else cov
    w, V = np.linalg.eigh(cov)
    if w.min() >= floor:
        return cov
    return (V * np.maximum(w, floor)) @ V.T


def gaussian_logpdf(x, mean, cov):
    """log N(x; mean, cov) over the last axis; ``cov`` is a single (m, m) matrix."""
    L = np.linalg.cholesky(cov)
    d = np.asarray(x, dtype=float) - mean
    m = d.shape[-1]
    sol = np.linalg.solve(L, d.reshape(-1, m).T).T.reshape(d.shape)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * ((sol**2).sum(axis=-1) + logdet + m * LOG_2PI)


@dataclass(frozen=True, eq=False)
class MarkovChain:
    """Initial distribution ``pi`` and row-stochastic ``Q[l, k] = p(k | l)``."""

    pi: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        K = pi.size
        if pi.shape != (K,) or Q.shape != (K, K) or K < 1:
            raise DimensionError(f"pi must be (K,) and Q (K, K); got {pi.shape}, {Q.shape}")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > STOCHASTIC_TOL:
            raise InvariantError(f"pi must be a probability vector (sum={pi.sum()!r})")
        if np.any(Q < 0):
            raise InvariantError("Q has negative entries")
        for l, s in enumerate(Q.sum(axis=1)):
            if abs(s - 1.0) > STOCHASTIC_TOL:
                raise InvariantError(f"row {l} of Q sums to {s!r}, not 1")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "Q", Q)

    @property
    def K(self):
        return self.pi.size

    def log_pi(self):
        with np.errstate(divide="ignore"):
            return np.log(self.pi)

    def log_Q(self):
        with np.errstate(divide="ignore"):
            return np.log(self.Q)


@dataclass(frozen=True, eq=False)
class MsmModel:
    """Full generative parameter set of a K-state Markov switching model.

    Attributes
    ----------
    chain : MarkovChain
    init_mean : (K, m) means of the first-frame Gaussians.
    init_cov : (K, m, m) covariances of the first-frame Gaussians.
    trans_mean : tuple of K transition functions.
    noise_cov : (K, m, m) transition noise covariances, constant in z.
    cov_floor : lower bound on every covariance eigenvalue.
    diagonal : whether estimation keeps covariances diagonal.

    Covariances whose smallest eigenvalue is below ``cov_floor`` are clipped
    on construction.
    """

    chain: MarkovChain
    init_mean: np.ndarray
    init_cov: np.ndarray
    trans_mean: tuple
    noise_cov: np.ndarray
    cov_floor: float = COV_FLOOR
    diagonal: bool = True
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        K = self.chain.K
        mu = np.asarray(self.init_mean, dtype=float)
        if mu.ndim != 2 or mu.shape[0] != K:
            raise DimensionError(f"init_mean must be (K={K}, m), got {mu.shape}")
        m = mu.shape[1]
        trans = tuple(self.trans_mean)
        if len(trans) != K:
            raise DimensionError(f"expected {K} transition functions, got {len(trans)}")
        for k, f in enumerate(trans):
            if not isinstance(f, TransitionFunction) or f.m != m:
                raise DimensionError(f"transition {k} is not an m={m} transition function")
        covs = []
        for name in ("init_cov", "noise_cov"):
            c = np.asarray(getattr(self, name), dtype=float)
            if c.shape != (K, m, m):
                raise DimensionError(f"{name} must be (K={K}, {m}, {m}), got {c.shape}")
            if not np.all(np.isfinite(c)):
                raise NonFiniteError(f"{name} contains non-finite values")
            covs.append(np.stack([floor_cov(ck, self.cov_floor) for ck in c]))
        if not np.all(np.isfinite(mu)):
            raise NonFiniteError("init_mean contains non-finite values")
        object.__setattr__(self, "init_mean", mu)
        object.__setattr__(self, "init_cov", covs[0])
        object.__setattr__(self, "noise_cov", covs[1])
        object.__setattr__(self, "trans_mean", trans)
        object.__setattr__(
            self,
            "_chol",
            (np.linalg.cholesky(covs[0]), np.linalg.cholesky(covs[1])),
        )

    @property
    def K(self):
        return self.chain.K

    @property
    def m(self):
        return self.init_mean.shape[1]

    @property
    def pi(self):
        return self.chain.pi

    @property
    def Q(self):
        return self.chain.Q

    def replace(self, **changes) -> "MsmModel":
        fields = dict(
            chain=self.chain,
            init_mean=self.init_mean,
            init_cov=self.init_cov,
            trans_mean=self.trans_mean,
            noise_cov=self.noise_cov,
            cov_floor=self.cov_floor,
            diagonal=self.diagonal,
        )
        fields.update(changes)
        return MsmModel(**fields)

    def permute(self, perm) -> "MsmModel":
        """Relabel states: new state ``i`` is old state ``perm[i]``."""
        p = np.asarray(perm, dtype=int)
        if sorted(p.tolist()) != list(range(self.K)):
            raise InvariantError(f"{perm!r} is not a permutation of 0..{self.K - 1}")
        return self.replace(
            chain=MarkovChain(self.pi[p], self.Q[np.ix_(p, p)]),
            init_mean=self.init_mean[p],
            init_cov=self.init_cov[p],
            trans_mean=tuple(self.trans_mean[i] for i in p),
            noise_cov=self.noise_cov[p],
        )

    def emission_logprob(self, z):
        """Per-step conditional log densities.

        Returns ``(..., T, K)``: row 0 holds ``log p(z_1 | s_1=k)``, row ``t``
        holds ``log p(z_t | z_{t-1}, s_t=k)``.
        """
        z = np.asarray(z, dtype=float)
        if z.ndim < 2 or z.shape[-1] != self.m:
            raise DimensionError(f"sequence must be (..., T, {self.m}), got {z.shape}")
        out = np.empty(z.shape[:-1] + (self.K,))
        for k in range(self.K):
            out[..., 0, k] = gaussian_logpdf(z[..., 0, :], self.init_mean[k], self.init_cov[k])
            if z.shape[-2] > 1:
                pred = self.trans_mean[k].evaluate(z[..., :-1, :])
                out[..., 1:, k] = gaussian_logpdf(z[..., 1:, :], pred, self.noise_cov[k])
        return out

    def unique_indexing_holds(self, n_probe=256, tol=1e-9) -> bool:
        """Probe-grid check that all states are distinguishable.

        Initial Gaussians must differ in mean or covariance, and transition
        kernels must differ in mean somewhere on a Sobol grid over
        ``[-1, 1]^m`` or in noise covariance.
        """
        grid = 2.0 * qmc.Sobol(self.m, scramble=False).random(n_probe) - 1.0
        means = [f.evaluate(grid) for f in self.trans_mean]
        for a in range(self.K):
            for b in range(a + 1, self.K):
                same_init = np.allclose(self.init_mean[a], self.init_mean[b], rtol=0, atol=tol) and np.allclose(
                    self.init_cov[a], self.init_cov[b], rtol=0, atol=tol
                )
                same_trans = np.allclose(means[a], means[b], rtol=0, atol=tol) and np.allclose(
                    self.noise_cov[a], self.noise_cov[b], rtol=0, atol=tol
                )
                if same_init or same_trans:
                    return False
        return True


def _as_states(model, s, T):
    s = np.asarray(s)
    if s.shape != (T,):
        raise DimensionError(f"state path must have length {T}, got shape {s.shape}")
    if not np.issubdtype(s.dtype, np.integer):
        raise StateIndexError("state indices must be integers")
    if np.any(s < 0) or np.any(s >= model.K):
        raise StateIndexError(f"state index out of range 0..{model.K - 1}")
    return s


def log_joint(model: MsmModel, z, s) -> float:
    """``log p(s_{1:T}) + log p(z_{1:T} | s_{1:T})`` for one sequence (states 0-based)."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != model.m or z.shape[0] < 1:
        raise DimensionError(f"sequence must be (T, {model.m}), got {z.shape}")
    T = z.shape[0]
    s = _as_states(model, s, T)
    lp = model.chain.log_pi()[s[0]] + model.chain.log_Q()[s[:-1], s[1:]].sum()
    em = model.emission_logprob(z)
    return float(lp + em[np.arange(T), s].sum())


def _draw_path(rng, chain, T, size=None):
    shape = (T,) if size is None else (size, T)
    u = rng.random(shape)
    cpi = np.cumsum(chain.pi)
    cQ = np.cumsum(chain.Q, axis=1)
    s = np.empty(shape, dtype=int)
    K = chain.K
    s[..., 0] = np.minimum(np.searchsorted(cpi, u[..., 0], side="right"), K - 1)
    for t in range(1, T):
        rows = cQ[s[..., t - 1]]
        s[..., t] = np.minimum((rows <= u[..., t, None]).sum(axis=-1), K - 1)
    return s


def sample_batch(model: MsmModel, N: int, T: int, rng_seed=None):
    """Draw ``N`` sequences of length ``T``; returns ``(z (N, T, m), s (N, T))``."""
    if T < 1 or N < 1:
        raise InvariantError("N and T must be >= 1")
    rng = np.random.default_rng(rng_seed)
    s = _draw_path(rng, model.chain, T, size=N)
    eps = rng.standard_normal((N, T, model.m))
    L1, L = model._chol
    z = np.empty((N, T, model.m))
    z[:, 0] = model.init_mean[s[:, 0]] + np.einsum("nij,nj->ni", L1[s[:, 0]], eps[:, 0])
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, T):
            prev = z[:, t - 1]
            mean = np.empty_like(prev)
            ok = np.all(np.isfinite(prev), axis=1)
            mean[~ok] = np.nan
            for k in range(model.K):
                sel = ok & (s[:, t] == k)
                if sel.any():
                    mean[sel] = model.trans_mean[k].evaluate(prev[sel])
            z[:, t] = mean + np.einsum("nij,nj->ni", L[s[:, t]], eps[:, t])
    return z, s


def sample_sequence(model: MsmModel, T: int, rng_seed=None):
    """Draw one sequence; returns ``(z (T, m), s (T,))``, deterministic in the seed."""
    z, s = sample_batch(model, 1, T, rng_seed)
    return z[0], s[0]


def _check_irreducible(Q):
    K = Q.shape[0]
    n, labels = connected_components(Q > 0, directed=True, connection="strong")
    if n > 1:
        # states outside the class of state 0
        raise ReducibleChainError([k for k in range(K) if labels[k] != labels[0]])


def stationary_distribution(Q, tol=1e-12, max_squarings=200):
    """Stationary distribution of an irreducible row-stochastic matrix.

    Power iteration on the lazy chain ``(I + Q) / 2`` accelerated by repeated
    squaring, followed by plain power steps until ``|pi Q - pi| < tol``.
    """
    Q = np.asarray(Q, dtype=float)
    MarkovChain(np.full(Q.shape[0], 1.0 / Q.shape[0]), Q)
    _check_irreducible(Q)
    K = Q.shape[0]
    P = 0.5 * (np.eye(K) + Q)
    pi = np.full(K, 1.0 / K)
    for _ in range(max_squarings):
        pi = pi @ P
        pi /= pi.sum()
        if np.abs(pi @ Q - pi).max() < tol:
            return pi
        P = P @ P
        P /= P.sum(axis=1, keepdims=True)
    for _ in range(10_000):
        pi = pi @ P
        pi /= pi.sum()
        if np.abs(pi @ Q - pi).max() < tol:
            return pi
    raise InvariantError("power iteration did not reach the requested residual")


def transform_model(model: MsmModel, A, b) -> MsmModel:
    """Push the model through ``z' = A z + b`` applied at every time step."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.shape != (model.m, model.m) or b.shape != (model.m,):
        raise DimensionError("A must be (m, m) and b (m,)")
    if abs(np.linalg.det(A)) <= 1e-12:
        raise SingularTransformError("affine map is singular (|det A| <= 1e-12)")
    smin = np.linalg.svd(A, compute_uv=False).min()
    return MsmModel(
        chain=model.chain,
        init_mean=model.init_mean @ A.T + b,
        init_cov=A @ model.init_cov @ A.T,
        trans_mean=tuple(AffineWrapped(f, A, b) for f in model.trans_mean),
        noise_cov=A @ model.noise_cov @ A.T,
        # keep transformed covariances clear of the floor
        cov_floor=min(model.cov_floor, model.cov_floor * smin**2),
        diagonal=False,
    )
