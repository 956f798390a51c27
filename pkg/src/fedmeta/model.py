"""Multinomial softmax regression with hand-derived derivatives.

The model scores a feature vector x with logits z = Wx + b and is trained
with cross-entropy plus an L2 term (reg_coeff/2)*||theta||^2.  The L2 term
makes the per-node empirical losses strongly convex, which the convergence
analysis relies on.

All derivatives are closed-form (no autodiff): gradient in theta, gradient
in the input x, and Hessian-vector products.  Finite differences are used
only as a test oracle, never here.  Parameters travel as one flat float64
vector (W row-major, then b) so federation code can treat them as plain
vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Params",
    "Sample",
    "LossSpec",
    "loss",
    "grad_theta",
    "grad_x",
    "hessian_vec",
    "stack_batch",
]


@dataclass(frozen=True)
class Params:
    """Flat parameter vector with its (num_classes, feature_dim) layout.

    values has length num_classes * feature_dim + num_classes: the weight
    matrix W (row-major) followed by the bias b.
    """

    values: np.ndarray
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1:
            raise ValueError("params values must be a flat vector")
        if v.size != self.dim:
            raise ValueError(
                f"layout ({self.num_classes}, {self.feature_dim}) needs "
                f"{self.dim} values, got {v.size}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("params contain non-finite values")

    @property
    def dim(self) -> int:
        return self.num_classes * self.feature_dim + self.num_classes

    @property
    def weights(self) -> np.ndarray:
        """W as a (num_classes, feature_dim) view."""
        return self.values[: self.num_classes * self.feature_dim].reshape(
            self.num_classes, self.feature_dim
        )

    @property
    def bias(self) -> np.ndarray:
        return self.values[self.num_classes * self.feature_dim :]

    def with_values(self, values: np.ndarray) -> "Params":
        return Params(values, self.num_classes, self.feature_dim)

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int) -> "Params":
        return cls(
            np.zeros(num_classes * feature_dim + num_classes),
            num_classes,
            feature_dim,
        )

    def same_layout(self, other: "Params") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.feature_dim == other.feature_dim
        )


@dataclass(frozen=True)
class Sample:
    """One labelled point: feature vector x and class label y."""

    x: np.ndarray
    y: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", int(self.y))
        if x.ndim != 1:
            raise ValueError("sample features must be a flat vector")
        if not np.all(np.isfinite(x)):
            raise ValueError("sample features contain non-finite values")
        if self.y < 0:
            raise ValueError("label must be nonnegative")


@dataclass(frozen=True)
class LossSpec:
    """Loss configuration; reg_coeff is the L2 coefficient (mu floor)."""

    reg_coeff: float = 0.01

    def __post_init__(self):
        if self.reg_coeff < 0:
            raise ValueError("reg_coeff must be nonnegative")


def stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a batch to an (X, y) array pair.

    Accepts a (X, y) tuple of arrays or a sequence of Samples.
    """
    if isinstance(batch, tuple) and len(batch) == 2:
        X, y = batch
        return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.intp)
    if len(batch) == 0:
        raise ValueError("empty dataset")
    X = np.stack([s.x for s in batch])
    y = np.array([s.y for s in batch], dtype=np.intp)
    return X, y


# -- array kernels ----------------------------------------------------------
# The engine-facing fast path: flat theta plus stacked (X, y).  The public
# operations below wrap these in Params/Sample types.


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _logits(theta: np.ndarray, X: np.ndarray, C: int, F: int) -> np.ndarray:
    W = theta[: C * F].reshape(C, F)
    b = theta[C * F :]
    return X @ W.T + b


def loss_arrays(theta, X, y, C, F, reg) -> float:
    Z = _logits(theta, X, C, F)
    Zs = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Zs).sum(axis=1))
    ce = float((lse - Zs[np.arange(len(y)), y]).mean())
    return ce + 0.5 * reg * float(theta @ theta)


def loss_grad_arrays(theta, X, y, C, F, reg) -> tuple[float, np.ndarray]:
    """Loss and gradient in one pass (shares the softmax)."""
    Z = _logits(theta, X, C, F)
    Zs = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Zs)
    S = E.sum(axis=1)
    n = len(y)
    ce = float((np.log(S) - Zs[np.arange(n), y]).mean())
    P = E / S[:, None]
    P[np.arange(n), y] -= 1.0
    g = np.concatenate([(P.T @ X).ravel(), P.sum(axis=0)]) / n + reg * theta
    return ce + 0.5 * reg * float(theta @ theta), g


def grad_arrays(theta, X, y, C, F, reg) -> np.ndarray:
    return loss_grad_arrays(theta, X, y, C, F, reg)[1]


def hvp_arrays(theta, X, y, C, F, reg, v) -> np.ndarray:
    """Hessian-vector product of the regularized loss.

    The cross-entropy Hessian acts per sample as (diag(p) - p p^T) in logit
    space; mapping v through the logits and back gives the product without
    forming the (C*F+C)^2 matrix.
    """
    P = _softmax(_logits(theta, X, C, F))
    A = _logits(v, X, C, F)
    U = P * (A - (P * A).sum(axis=1, keepdims=True))
    n = len(y)
    return np.concatenate([(U.T @ X).ravel(), U.sum(axis=0)]) / n + reg * v


def grad_x_arrays(theta, x, y, C, F) -> np.ndarray:
    """Gradient of the per-sample loss in the input features: W^T(p - e_y)."""
    W = theta[: C * F].reshape(C, F)
    z = W @ x + theta[C * F :]
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    p[y] -= 1.0
    return W.T @ p


def sample_loss_arrays(theta, x, y, C, F, reg) -> float:
    W = theta[: C * F].reshape(C, F)
    z = W @ x + theta[C * F :]
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[y]) + 0.5 * reg * float(theta @ theta)


# -- public operations ------------------------------------------------------


def loss(params: Params, batch, spec: LossSpec) -> float:
    """Mean cross-entropy over the batch plus (reg_coeff/2)*||theta||^2."""
    X, y = stack_batch(batch)
    _check_labels(params, y)
    return loss_arrays(
        params.values, X, y, params.num_classes, params.feature_dim, spec.reg_coeff
    )


def grad_theta(params: Params, batch, spec: LossSpec) -> Params:
    """Exact gradient of loss() in theta, same layout as params."""
    X, y = stack_batch(batch)
    _check_labels(params, y)
    g = grad_arrays(
        params.values, X, y, params.num_classes, params.feature_dim, spec.reg_coeff
    )
    return params.with_values(g)


def grad_x(params: Params, sample: Sample, spec: LossSpec) -> np.ndarray:
    """Exact gradient of the per-sample loss in the input features."""
    if sample.y >= params.num_classes:
        raise ValueError("label out of range for this model")
    return grad_x_arrays(
        params.values, sample.x, sample.y, params.num_classes, params.feature_dim
    )


def hessian_vec(params: Params, batch, spec: LossSpec, v: Params) -> Params:
    """Analytic product of the loss Hessian at params with vector v."""
    if not params.same_layout(v):
        raise ValueError("vector layout does not match params layout")
    X, y = stack_batch(batch)
    _check_labels(params, y)
    h = hvp_arrays(
        params.values,
        X,
        y,
        params.num_classes,
        params.feature_dim,
        spec.reg_coeff,
        v.values,
    )
    return params.with_values(h)


def _check_labels(params: Params, y: np.ndarray) -> None:
    if len(y) == 0:
        raise ValueError("empty dataset")
    if y.max(initial=0) >= params.num_classes:
        raise ValueError("label out of range for this model")
