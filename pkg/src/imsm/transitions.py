"""Per-state transition mean functions ``z_{t-1} -> m(z_{t-1}, k)``.

Four families are provided: :class:`Linear`, :class:`Polynomial`, :class:`Mlp`
(two layers) and :class:`LocallyConnectedMlp` (one two-layer sub-network per
output coordinate, with a binary input mask).  :class:`AffineWrapped` realises
the conjugated map ``z -> A f(A^{-1}(z - b)) + b``.

Every family evaluates on arrays of shape ``(..., m)``, returns analytic input
Jacobians of shape ``(..., m, m)`` and accumulates parameter vector-Jacobian
products, which is all the estimation code needs.

Parameters are flattened per layer, weights row-major first and biases second.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb, expit

from .errors import DimensionError, InvariantError, NonFiniteError

ACTIVATIONS = ("softplus", "cosine", "leaky_relu")
LEAKY_SLOPE = 0.2


def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _activate(name, x):
    if name == "softplus":
        return softplus(x)
    if name == "cosine":
        return np.cos(x)
    if name == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    raise InvariantError(f"unknown activation {name!r}")


def _activate_grad(name, x):
    if name == "softplus":
        return expit(x)
    if name == "cosine":
        return -np.sin(x)
    if name == "leaky_relu":
        # x == 0 takes the negative-branch slope
        return np.where(x > 0, 1.0, LEAKY_SLOPE)
    raise InvariantError(f"unknown activation {name!r}")


def n_poly_features(m, degree):
    """Number of monomials of total degree <= ``degree`` in ``m`` variables."""
    return int(comb(degree + m, m, exact=True))


def monomial_exponents(m, degree):
    """Exponent matrix ``(C, m)`` in graded lexicographic order."""
    rows = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(m), d):
            e = [0] * m
            for i in combo:
                e[i] += 1
            rows.append(e)
    return np.array(rows, dtype=int)


def polynomial_features(z, degree):
    """Monomial features of ``z`` up to total degree ``degree``.

    Ordering is graded lexicographic: the constant, then ``z_1 .. z_m``, then
    ``z_1^2, z_1 z_2, ..., z_m^2`` and so on.  ``z`` may carry leading batch
    axes; the feature axis is appended last.

    >>> polynomial_features(np.array([2.0, 3.0]), 2)
    array([1., 2., 3., 4., 6., 9.])
    """
    if degree < 1:
        raise InvariantError("polynomial degree must be >= 1")
    z = np.asarray(z, dtype=float)
    exps = monomial_exponents(z.shape[-1], degree)
    return _features_from_exponents(z, exps)


def _features_from_exponents(z, exps):
    out = np.ones(z.shape[:-1] + (exps.shape[0],))
    for j in range(exps.shape[1]):
        col = z[..., j : j + 1]
        for p in range(1, exps[:, j].max() + 1):
            out = out * np.where(exps[:, j] == p, col**p, 1.0)
    return out


def _feature_jacobian(z, exps):
    """d features / d z, shape ``(..., C, m)``."""
    C, m = exps.shape
    out = np.empty(z.shape[:-1] + (C, m))
    for j in range(m):
        reduced = exps.copy()
        reduced[:, j] = np.maximum(exps[:, j] - 1, 0)
        base = _features_from_exponents(z, reduced)
        out[..., j] = base * exps[:, j]
    return out


def _check_input(z, m):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != m:
        raise DimensionError(f"expected last axis of size {m}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("transition input contains non-finite values")
    return z


def _sum_outer(a, b):
    """Sum over leading axes of ``a[..., i] * b[..., j]``."""
    a2 = a.reshape(-1, a.shape[-1])
    b2 = b.reshape(-1, b.shape[-1])
    return a2.T @ b2


@dataclass(frozen=True)
class ParamGradient:
    """Flat gradient with the layout of the owning function's parameters."""

    values: np.ndarray
    layout: tuple

    def __len__(self):
        return self.values.size


class TransitionFunction:
    """Common interface.  Subclasses are frozen dataclasses."""

    kind = "abstract"

    @property
    def m(self) -> int:
        raise NotImplementedError

    def __call__(self, z):
        return self.evaluate(z)

    def evaluate(self, z):
        raise NotImplementedError

    def jacobian(self, z):
        raise NotImplementedError

    @property
    def layout(self) -> tuple:
        """``((name, shape), ...)`` in flattening order."""
        raise NotImplementedError

    @property
    def params(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    def with_params(self, flat) -> "TransitionFunction":
        raise NotImplementedError

    def param_vjp(self, z, cotangent):
        """``sum_n J_theta(z_n)^T c_n`` as a flat vector."""
        raise NotImplementedError

    def param_gradient(self, z_prev, z_next, noise_cov) -> ParamGradient:
        """Gradient of ``log N(z_next; f(z_prev), noise_cov)`` w.r.t. the parameters.

        With batched inputs the per-pair gradients are summed.
        """
        z_prev = _check_input(z_prev, self.m)
        z_next = np.asarray(z_next, dtype=float)
        resid = z_next - self.evaluate(z_prev)
        cot = np.linalg.solve(np.asarray(noise_cov, dtype=float), resid.reshape(-1, self.m).T).T
        return ParamGradient(self.param_vjp(z_prev, cot.reshape(resid.shape)), self.layout)

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _split(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise NonFiniteError("parameters must be finite")
        out, i = [], 0
        for _, shape in self.layout:
            n = int(np.prod(shape))
            out.append(flat[i : i + n].reshape(shape).copy())
            i += n
        return out


@dataclass(frozen=True, eq=False)
class Linear(TransitionFunction):
    W: np.ndarray
    b: np.ndarray
    kind = "linear"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or b.shape != (W.shape[0],):
            raise DimensionError(f"Linear needs W (m, m) and b (m,), got {W.shape}, {b.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def m(self):
        return self.b.size

    def evaluate(self, z):
        z = _check_input(z, self.m)
        return z @ self.W.T + self.b

    def jacobian(self, z):
        z = _check_input(z, self.m)
        return np.broadcast_to(self.W, z.shape[:-1] + self.W.shape).copy()

    @property
    def layout(self):
        return (("W", self.W.shape), ("b", self.b.shape))

    @property
    def params(self):
        return np.concatenate([self.W.ravel(), self.b])

    def with_params(self, flat):
        W, b = self._split(flat)
        return Linear(W, b)

    def param_vjp(self, z, cotangent):
        z = np.asarray(z, dtype=float)
        c = np.asarray(cotangent, dtype=float)
        dW = _sum_outer(c, z)
        db = c.reshape(-1, self.m).sum(axis=0)
        return np.concatenate([dW.ravel(), db])

    def to_dict(self):
        return {"kind": self.kind, "m": self.m, "layout": "W,b", "params": self.params}


@dataclass(frozen=True, eq=False)
class Polynomial(TransitionFunction):
    """``m(z) = coeff @ features(z)`` with ``coeff`` of shape ``(m, C)``."""

    coeff: np.ndarray
    degree: int
    _exps: np.ndarray = field(init=False, repr=False)
    kind = "polynomial"

    def __post_init__(self):
        coeff = np.asarray(self.coeff, dtype=float)
        if coeff.ndim != 2:
            raise DimensionError("polynomial coefficients must be a matrix")
        m = coeff.shape[0]
        C = n_poly_features(m, self.degree)
        if coeff.shape[1] != C:
            raise InvariantError(
                f"degree-{self.degree} polynomial in {m} variables needs {C} coefficient columns, "
                f"got {coeff.shape[1]}"
            )
        object.__setattr__(self, "coeff", coeff)
        object.__setattr__(self, "_exps", monomial_exponents(m, self.degree))

    @property
    def m(self):
        return self.coeff.shape[0]

    def features(self, z):
        return _features_from_exponents(np.asarray(z, dtype=float), self._exps)

    def evaluate(self, z):
        z = _check_input(z, self.m)
        return self.features(z) @ self.coeff.T

    def jacobian(self, z):
        z = _check_input(z, self.m)
        return np.einsum("oc,...cj->...oj", self.coeff, _feature_jacobian(z, self._exps))

    @property
    def layout(self):
        return (("coeff", self.coeff.shape),)

    @property
    def params(self):
        return self.coeff.ravel().copy()

    def with_params(self, flat):
        (coeff,) = self._split(flat)
        return Polynomial(coeff, self.degree)

    def param_vjp(self, z, cotangent):
        return _sum_outer(np.asarray(cotangent, dtype=float), self.features(z)).ravel()

    def to_dict(self):
        return {
            "kind": self.kind,
            "m": self.m,
            "degree": self.degree,
            "layout": "coeff",
            "params": self.params,
        }


@dataclass(frozen=True, eq=False)
class Mlp(TransitionFunction):
    """``W2 act(W1 z + b1) + b2``.

    Output width may differ from input width so the same class serves as an
    emission network; as a transition it is square.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "cosine"
    kind = "mlp"

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.W1, self.b1, self.W2, self.b2)]
        W1, b1, W2, b2 = arrs
        h, _ = W1.shape
        if b1.shape != (h,) or W2.shape[1] != h or b2.shape != (W2.shape[0],):
            raise DimensionError("inconsistent Mlp layer shapes")
        if self.activation not in ACTIVATIONS:
            raise InvariantError(f"unknown activation {self.activation!r}")
        for name, a in zip(("W1", "b1", "W2", "b2"), arrs):
            object.__setattr__(self, name, a)

    @property
    def m(self):
        return self.W1.shape[1]

    @property
    def out_dim(self):
        return self.W2.shape[0]

    @property
    def hidden(self):
        return self.W1.shape[0]

    def evaluate(self, z):
        z = _check_input(z, self.m)
        return _activate(self.activation, z @ self.W1.T + self.b1) @ self.W2.T + self.b2

    def jacobian(self, z):
        z = _check_input(z, self.m)
        d = _activate_grad(self.activation, z @ self.W1.T + self.b1)
        return np.einsum("oh,...h,hi->...oi", self.W2, d, self.W1)

    @property
    def layout(self):
        return (
            ("W1", self.W1.shape),
            ("b1", self.b1.shape),
            ("W2", self.W2.shape),
            ("b2", self.b2.shape),
        )

    @property
    def params(self):
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_params(self, flat):
        W1, b1, W2, b2 = self._split(flat)
        return Mlp(W1, b1, W2, b2, self.activation)

    def param_vjp(self, z, cotangent):
        z = np.asarray(z, dtype=float)
        c = np.asarray(cotangent, dtype=float)
        a1 = z @ self.W1.T + self.b1
        hid = _activate(self.activation, a1)
        delta = (c @ self.W2) * _activate_grad(self.activation, a1)
        return np.concatenate(
            [
                _sum_outer(delta, z).ravel(),
                delta.reshape(-1, self.hidden).sum(axis=0),
                _sum_outer(c, hid).ravel(),
                c.reshape(-1, self.out_dim).sum(axis=0),
            ]
        )

    def to_dict(self):
        return {
            "kind": self.kind,
            "m": self.m,
            "out_dim": self.out_dim,
            "hidden": self.hidden,
            "activation": self.activation,
            "layout": "W1,b1,W2,b2",
            "params": self.params,
        }


@dataclass(frozen=True, eq=False)
class LocallyConnectedMlp(TransitionFunction):
    """One two-layer network per output coordinate.

    Output ``i`` only sees inputs ``j`` with ``mask[i, j] == 1``.  Shapes:
    ``W1 (m, h, m)``, ``b1 (m, h)``, ``W2 (m, h)``, ``b2 (m,)``.  First-layer
    weights are zeroed wherever the mask is zero on every construction.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    mask: np.ndarray
    activation: str = "cosine"
    kind = "lc_mlp"

    def __post_init__(self):
        W1, b1, W2, b2 = (np.asarray(a, dtype=float) for a in (self.W1, self.b1, self.W2, self.b2))
        mask = (np.asarray(self.mask) != 0).astype(float)
        m, h, m_in = W1.shape
        if m != m_in or mask.shape != (m, m) or b1.shape != (m, h) or W2.shape != (m, h) or b2.shape != (m,):
            raise DimensionError("inconsistent LocallyConnectedMlp shapes")
        if self.activation not in ACTIVATIONS:
            raise InvariantError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "W1", W1 * mask[:, None, :])
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "W2", W2)
        object.__setattr__(self, "b2", b2)
        object.__setattr__(self, "mask", mask.astype(int))

    @property
    def m(self):
        return self.b2.size

    @property
    def hidden(self):
        return self.b1.shape[1]

    def _pre(self, z):
        m, h = self.m, self.hidden
        flat = z.reshape(-1, m) @ self.W1.reshape(m * h, m).T
        return flat.reshape(z.shape[:-1] + (m, h)) + self.b1

    def evaluate(self, z):
        z = _check_input(z, self.m)
        return (_activate(self.activation, self._pre(z)) * self.W2).sum(axis=-1) + self.b2

    def jacobian(self, z):
        z = _check_input(z, self.m)
        d = _activate_grad(self.activation, self._pre(z)) * self.W2
        return np.einsum("...oh,ohi->...oi", d, self.W1, optimize=True)

    @property
    def layout(self):
        return (
            ("W1", self.W1.shape),
            ("b1", self.b1.shape),
            ("W2", self.W2.shape),
            ("b2", self.b2.shape),
        )

    @property
    def params(self):
        return np.concatenate([self.W1.ravel(), self.b1.ravel(), self.W2.ravel(), self.b2])

    def with_params(self, flat):
        W1, b1, W2, b2 = self._split(flat)
        return LocallyConnectedMlp(W1, b1, W2, b2, self.mask, self.activation)

    def param_vjp(self, z, cotangent):
        z = np.asarray(z, dtype=float)
        c = np.asarray(cotangent, dtype=float)
        m, h = self.m, self.hidden
        a1 = self._pre(z)
        hid = _activate(self.activation, a1)
        delta = c[..., None] * self.W2 * _activate_grad(self.activation, a1)
        delta2 = delta.reshape(-1, m * h)
        z2 = z.reshape(-1, m)
        dW1 = (delta2.T @ z2).reshape(m, h, m) * self.mask[:, None, :]
        db1 = delta2.sum(axis=0)
        dW2 = np.einsum("no,noh->oh", c.reshape(-1, m), hid.reshape(-1, m, h))
        db2 = c.reshape(-1, m).sum(axis=0)
        return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])

    def to_dict(self):
        return {
            "kind": self.kind,
            "m": self.m,
            "hidden": self.hidden,
            "activation": self.activation,
            "mask": self.mask,
            "layout": "W1,b1,W2,b2",
            "params": self.params,
        }


@dataclass(frozen=True, eq=False)
class AffineWrapped(TransitionFunction):
    """The map ``z' -> A inner(A^{-1}(z' - b)) + b``."""

    inner: TransitionFunction
    A: np.ndarray
    b: np.ndarray
    _Ainv: np.ndarray = field(init=False, repr=False)
    kind = "affine"

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        m = self.inner.m
        if A.shape != (m, m) or b.shape != (m,):
            raise DimensionError("affine wrapper needs A (m, m) and b (m,)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "_Ainv", np.linalg.inv(A))

    @property
    def m(self):
        return self.inner.m

    def _pull(self, z):
        return (z - self.b) @ self._Ainv.T

    def evaluate(self, z):
        z = _check_input(z, self.m)
        return self.inner.evaluate(self._pull(z)) @ self.A.T + self.b

    def jacobian(self, z):
        z = _check_input(z, self.m)
        return self.A @ self.inner.jacobian(self._pull(z)) @ self._Ainv

    @property
    def layout(self):
        return self.inner.layout

    @property
    def params(self):
        return self.inner.params

    def with_params(self, flat):
        return AffineWrapped(self.inner.with_params(flat), self.A, self.b)

    def param_vjp(self, z, cotangent):
        return self.inner.param_vjp(self._pull(np.asarray(z, dtype=float)), np.asarray(cotangent) @ self.A)

    def to_dict(self):
        return {"kind": self.kind, "m": self.m, "A": self.A, "b": self.b, "inner": self.inner.to_dict()}


def transition_from_dict(d, path="trans_mean") -> TransitionFunction:
    """Rebuild a transition from its serialized descriptor."""
    from .errors import ModelFormatError

    try:
        kind = d["kind"]
        m = int(d["m"])
        if kind == "affine":
            inner = transition_from_dict(d["inner"], path + ".inner")
            return AffineWrapped(inner, np.array(d["A"], dtype=float), np.array(d["b"], dtype=float))
        flat = np.array(d["params"], dtype=float)
        if kind == "linear":
            proto = Linear(np.zeros((m, m)), np.zeros(m))
        elif kind == "polynomial":
            deg = int(d["degree"])
            proto = Polynomial(np.zeros((m, n_poly_features(m, deg))), deg)
        elif kind == "mlp":
            h, n = int(d["hidden"]), int(d.get("out_dim", m))
            proto = Mlp(np.zeros((h, m)), np.zeros(h), np.zeros((n, h)), np.zeros(n), d["activation"])
        elif kind == "lc_mlp":
            h = int(d["hidden"])
            mask = np.array(d["mask"], dtype=int)
            proto = LocallyConnectedMlp(
                np.zeros((m, h, m)), np.zeros((m, h)), np.zeros((m, h)), np.zeros(m), mask, d["activation"]
            )
        else:
            raise ModelFormatError(path + ".kind", f"unknown transition kind {kind!r}")
        return proto.with_params(flat)
    except ModelFormatError:
        raise
    except KeyError as exc:
        raise ModelFormatError(path, f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(path, str(exc)) from None


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def random_mask(m, interactions, rng):
    """Binary ``(m, m)`` mask where every row has exactly ``interactions`` ones."""
    if not 1 <= interactions <= m:
        raise InvariantError(f"interactions must lie in 1..{m}, got {interactions}")
    mask = np.zeros((m, m), dtype=int)
    for i in range(m):
        mask[i, rng.choice(m, size=interactions, replace=False)] = 1
    return mask


def random_transition(kind, m, rng_seed=None, *, degree=3, hidden=16, activation="cosine",
                      interactions=3, mask=None, out_dim=None, gain=1.0) -> TransitionFunction:
    """Draw a transition with reproducible random parameters.

    Networks use ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and biases;
    ``gain`` multiplies the first-layer weights and biases.
    Polynomial coefficients are ``0.3 * N(0, 1) / d!`` for monomials of degree
    ``d``.  ``rng_seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    rng = np.random.default_rng(rng_seed)
    if kind == "linear":
        return Linear(_uniform(rng, m, (m, m)), _uniform(rng, m, m))
    if kind == "polynomial":
        exps = monomial_exponents(m, degree)
        damp = np.array([1.0 / math.factorial(int(e.sum())) for e in exps])
        return Polynomial(0.3 * rng.standard_normal((m, exps.shape[0])) * damp, degree)
    if kind == "mlp":
        n = m if out_dim is None else out_dim
        return Mlp(
            gain * _uniform(rng, m, (hidden, m)),
            gain * _uniform(rng, m, hidden),
            _uniform(rng, hidden, (n, hidden)),
            _uniform(rng, hidden, n),
            activation,
        )
    if kind == "lc_mlp":
        if interactions > m:
            raise InvariantError(f"interaction count {interactions} exceeds dimension {m}")
        if mask is None:
            mask = random_mask(m, interactions, rng)
        return LocallyConnectedMlp(
            gain * _uniform(rng, m, (m, hidden, m)),
            gain * _uniform(rng, m, (m, hidden)),
            _uniform(rng, hidden, (m, hidden)),
            _uniform(rng, hidden, m),
            mask,
            activation,
        )
    raise InvariantError(f"unknown transition kind {kind!r}")
