"""Loss functions with analytic gradients, a small square MLP trained one
layer at a time with manual backprop, and synthetic data generators.

All losses operate on flat float64 parameter vectors.  Margins are
y * <theta, x> with labels in {-1, +1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from blockgrad.core import Rng, spd_solve

__all__ = [
    "hinge_loss_grad",
    "smoothed_hinge_loss_grad",
    "smoothed_hinge_batch",
    "least_squares_grad",
    "Mlp",
    "random_invertible",
    "FeatureBlockSpec",
    "SyntheticStream",
    "Dataset",
    "load_csv_dataset",
    "min_norm_least_squares",
]


# ---------------------------------------------------------------------------
# Linear-model losses
# ---------------------------------------------------------------------------

def hinge_loss_grad(theta: np.ndarray, x: np.ndarray, y: float):
    """Hinge loss max(0, 1 - y <theta, x>) and a subgradient.

    At margin exactly 1 the zero subgradient is returned.
    """
    margin = y * float(theta @ x)
    if margin < 1.0:
        return 1.0 - margin, -y * x
    return 0.0, np.zeros_like(x)


def smoothed_hinge_loss_grad(theta: np.ndarray, x: np.ndarray, y: float):
    """Smoothed (quadratically interpolated) hinge loss and its gradient.

    margin <= 0:      1/2 - margin,        grad -y x
    0 < margin < 1:   (1 - margin)^2 / 2,  grad -(1 - margin) y x
    margin >= 1:      0,                   grad 0

    Continuous with continuous first derivative at both knots.
    """
    margin = y * float(theta @ x)
    if margin <= 0.0:
        return 0.5 - margin, -y * x
    if margin < 1.0:
        return 0.5 * (1.0 - margin) ** 2, -(1.0 - margin) * y * x
    return 0.0, np.zeros_like(x)


def smoothed_hinge_batch(theta: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean smoothed-hinge loss over a batch and the mean gradient."""
    margins = y * (X @ theta)
    losses = np.where(
        margins <= 0.0, 0.5 - margins,
        np.where(margins < 1.0, 0.5 * (1.0 - margins) ** 2, 0.0),
    )
    coeff = np.where(
        margins <= 0.0, -1.0,
        np.where(margins < 1.0, -(1.0 - margins), 0.0),
    )
    grad = X.T @ (coeff * y) / len(y)
    return float(losses.mean()), grad


def least_squares_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray,
                       index: int | None = None):
    """Squared-error loss and gradient; one sample if index given, else full batch.

    Per sample:  (x_i^T theta - y_i)^2, grad 2 (x_i^T theta - y_i) x_i.
    Full batch:  ||X theta - y||^2,     grad 2 X^T (X theta - y).
    """
    if index is not None:
        x = X[index]
        r = float(x @ theta) - float(y[index])
        return r * r, 2.0 * r * x
    r = X @ theta - y
    return float(r @ r), 2.0 * (X.T @ r)


# ---------------------------------------------------------------------------
# Square MLP with one trainable layer
# ---------------------------------------------------------------------------

def _act_forward(z, kind, slope):
    if kind == "leaky_relu":
        return np.where(z >= 0, z, slope * z)
    return np.tanh(z)


def _act_deriv(z, kind, slope):
    if kind == "leaky_relu":
        return np.where(z >= 0, 1.0, slope)
    t = np.tanh(z)
    return 1.0 - t * t


def _act_inverse(u, kind, slope):
    if kind == "leaky_relu":
        return np.where(u >= 0, u, u / slope)
    if np.any(np.abs(u) >= 1.0):
        raise ValueError("tanh inverse undefined for |u| >= 1")
    return np.arctanh(u)


def random_invertible(d: int, rng: Rng, scale: float = 0.1,
                      cond_max: float = 1e6, max_tries: int = 50) -> np.ndarray:
    """Well-conditioned invertible d x d matrix, sampled as I + scale * G."""
    for _ in range(max_tries):
        W = np.eye(d) + scale * rng.normal((d, d))
        if np.linalg.cond(W) <= cond_max:
            return W
    raise RuntimeError("failed to sample a well-conditioned matrix")


class Mlp:
    """L-layer network  phi(...phi(X W_1) W_2 ...) W_L  with square d x d
    weights, a bijective activation, and exactly one trainable layer.

    The fixed layers above the trainable one must be invertible (condition
    number <= cond_max); they are what make the post-activation map
    invertible.  Methods are pure in the trainable weights, which are
    passed in flattened (row-major d*d) form.
    """

    def __init__(self, weights: Sequence[np.ndarray | None], trainable: int,
                 activation: str = "leaky_relu", slope: float = 0.1,
                 cond_max: float = 1e6, dim: int | None = None):
        if activation not in ("leaky_relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        if activation == "leaky_relu" and slope <= 0:
            raise ValueError("leaky-relu slope must be positive for bijectivity")
        self.L = len(weights)
        if not 0 <= trainable < self.L:
            raise ValueError("trainable layer index out of range")
        self.trainable = trainable
        self.activation = activation
        self.slope = float(slope)
        d = dim
        fixed = []
        for layer, W in enumerate(weights):
            if layer == trainable:
                fixed.append(None)
                continue
            W = np.asarray(W, dtype=np.float64)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise ValueError("weights must be square")
            if d is None:
                d = W.shape[0]
            elif W.shape[0] != d:
                raise ValueError("all layers must share one dimension")
            if layer > trainable and np.linalg.cond(W) > cond_max:
                raise ValueError(f"layer {layer} is ill-conditioned (singular?)")
            fixed.append(W)
        if d is None:
            raise ValueError("pass dim= when the only layer is the trainable one")
        self.d = d
        self.weights = fixed

    # -- forward pieces ----------------------------------------------------

    def hidden_input(self, X: np.ndarray) -> np.ndarray:
        """H_{l-1}: the representation feeding the trainable layer."""
        H = np.asarray(X, dtype=np.float64)
        for layer in range(self.trainable):
            H = _act_forward(H @ self.weights[layer], self.activation, self.slope)
        return H

    def _upper_forward(self, Z: np.ndarray, keep: bool = False):
        """Post-activation map applied above the trainable layer.

        Z -> phi_l(Z) W_{l+1} ... with no activation after the top layer;
        the identity when the trainable layer is the top one.
        Returns the output and, when keep, the pre-activation stack.
        """
        if self.trainable == self.L - 1:
            return (Z, [Z]) if keep else Z
        pre = [Z]
        U = _act_forward(Z, self.activation, self.slope)
        for layer in range(self.trainable + 1, self.L):
            if layer < self.L - 1:
                V = U @ self.weights[layer]
                pre.append(V)
                U = _act_forward(V, self.activation, self.slope)
            else:
                U = U @ self.weights[layer]
        return (U, pre) if keep else U

    def forward(self, w_flat: np.ndarray, X: np.ndarray) -> np.ndarray:
        W = w_flat.reshape(self.d, self.d)
        return self._upper_forward(self.hidden_input(X) @ W)

    def loss_grad(self, w_flat: np.ndarray, X: np.ndarray, Y: np.ndarray):
        """Squared loss ||Phi(H W) - Y||^2 and its gradient in the trainable W."""
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        if X.shape[1] != self.d or Y.shape[1] != self.d or X.shape[0] != Y.shape[0]:
            raise ValueError("shape mismatch")
        W = w_flat.reshape(self.d, self.d)
        H = self.hidden_input(X)
        Z = H @ W
        out, pre = self._upper_forward(Z, keep=True)
        R = out - Y
        loss = float((R * R).sum())
        G = 2.0 * R
        if self.trainable < self.L - 1:
            G = G @ self.weights[self.L - 1].T
        for layer in range(self.L - 2, self.trainable, -1):
            G = G * _act_deriv(pre[layer - self.trainable], self.activation, self.slope)
            G = G @ self.weights[layer].T
        if self.trainable < self.L - 1:
            G = G * _act_deriv(Z, self.activation, self.slope)
        grad = H.T @ G
        return loss, grad.reshape(-1)

    def phi_inverse(self, Y: np.ndarray) -> np.ndarray:
        """Inverse of the post-activation map: Z with Phi(Z) = Y."""
        Z = np.asarray(Y, dtype=np.float64)
        if self.trainable == self.L - 1:
            return Z
        Z = np.linalg.solve(self.weights[self.L - 1].T, Z.T).T
        for layer in range(self.L - 2, self.trainable, -1):
            Z = _act_inverse(Z, self.activation, self.slope)
            Z = np.linalg.solve(self.weights[layer].T, Z.T).T
        return _act_inverse(Z, self.activation, self.slope)

    def target_solution(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Minimum-norm trainable weights H^T (H H^T)^{-1} Phi^{-1}(Y), flat."""
        H = self.hidden_input(X)
        Zstar = self.phi_inverse(Y)
        alpha = spd_solve(H @ H.T, Zstar)
        return (H.T @ alpha).reshape(-1)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureBlockSpec:
    """One feature block: active with probability prob, then N(mean*y, std^2)."""

    width: int
    prob: float
    mean: float
    std: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("width must be positive")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("prob must be in [0, 1]")
        if self.std < 0:
            raise ValueError("std must be >= 0")


class SyntheticStream:
    """Stream of (x, y) pairs: y uniform +-1, features drawn per block spec."""

    def __init__(self, blocks: Sequence[FeatureBlockSpec], rng: Rng):
        if not blocks:
            raise ValueError("need at least one feature block")
        self.blocks = list(blocks)
        self.rng = rng
        self.dim = sum(b.width for b in blocks)

    @staticmethod
    def paper_blocks() -> list[FeatureBlockSpec]:
        """The two-block 100-feature configuration used by the experiments:
        50 features active w.p. 0.5 from N(10y, 100), then 50 active
        w.p. 0.4 from N(-5y, 25).
        """
        return [
            FeatureBlockSpec(width=50, prob=0.5, mean=10.0, std=10.0),
            FeatureBlockSpec(width=50, prob=0.4, mean=-5.0, std=5.0),
        ]

    def sample(self, n: int):
        """Draw n samples; returns (X of shape (n, d), y of shape (n,))."""
        y = self.rng.signs(n)
        X = np.empty((n, self.dim))
        pos = 0
        for block in self.blocks:
            w = block.width
            active = self.rng.uniform((n, w)) < block.prob
            z = self.rng.normal((n, w))
            X[:, pos:pos + w] = active * (block.mean * y[:, None] + block.std * z)
            pos += w
        return X, y

    def next(self):
        X, y = self.sample(1)
        return X[0], float(y[0])


@dataclass
class Dataset:
    """Feature matrix plus labels/targets."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y row counts differ")
        if self.X.size == 0:
            raise ValueError("empty dataset")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")


def load_csv_dataset(path) -> Dataset:
    """CSV rows of comma-separated features with the label in the last
    column; lines starting with '#' are skipped."""
    raw = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if raw.shape[1] < 2:
        raise ValueError("need at least one feature column and one label column")
    return Dataset(X=raw[:, :-1], y=raw[:, -1])


# ---------------------------------------------------------------------------
# Minimum-norm least squares
# ---------------------------------------------------------------------------

def min_norm_least_squares(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimum l2-norm solution X^T (X X^T)^{-1} y of an underdetermined
    least-squares problem (requires full row rank)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    try:
        alpha = spd_solve(X @ X.T, y)
    except ValueError as exc:
        raise ValueError("X is rank-deficient: X X^T is not SPD") from exc
    theta = X.T @ alpha
    resid = np.abs(X @ theta - y).max() if y.size else 0.0
    if resid >= 1e-8 * max(1.0, float(np.abs(y).max())):
        raise ValueError("X X^T too ill-conditioned for a reliable solution")
    return theta
