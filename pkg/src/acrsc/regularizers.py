"""Regularizers behind one interface, and the Bregman distance.

``value`` and ``input_grad`` accept one image of ``shape`` or a stack with
a leading batch axis; a stack returns one value per image.
"""

from __future__ import annotations

import numpy as np

from . import icnn

__all__ = [
    "Regularizer",
    "ZeroRegularizer",
    "QuadraticTestRegularizer",
    "HuberTvRegularizer",
    "IcnnRegularizer",
    "bregman_distance",
]


class Regularizer:
    kind = "abstract"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.shape:
            return x[None], False
        if x.shape[1:] == self.shape:
            return x, True
        raise ValueError(f"input shape {x.shape} does not match {self.shape}")

    def value(self, x):
        xb, batched = self._batch(x)
        v = self._values(xb)
        return v if batched else float(v[0])

    def input_grad(self, x):
        xb, batched = self._batch(x)
        g = self._grads(xb)
        return g if batched else g[0]

    def value_and_grad(self, X):
        """Batched ``(values, grads)``; subclasses may fuse the two passes."""
        X = np.asarray(X, dtype=np.float64)
        return self._values(X), self._grads(X)

    # Lipschitz constant of the gradient if known (used for step-size checks)
    grad_lipschitz = None


class ZeroRegularizer(Regularizer):
    kind = "zero"
    grad_lipschitz = 0.0

    def _values(self, X):
        return np.zeros(len(X))

    def _grads(self, X):
        return np.zeros_like(X)


class QuadraticTestRegularizer(Regularizer):
    """``psi(x) = ||x||^2 / 2``; its gradient is the identity."""

    kind = "quadratic"
    grad_lipschitz = 1.0

    def _values(self, X):
        return 0.5 * np.sum(X.reshape(len(X), -1) ** 2, axis=1)

    def _grads(self, X):
        return X.copy()


class HuberTvRegularizer(Regularizer):
    """Isotropic total variation with the Huber penalty on gradient magnitudes.

    Forward differences with Neumann boundary (last row/column difference is
    zero).  ``h(r) = r^2 / (2 mu)`` for ``r <= mu`` and ``r - mu/2`` above.
    """

    kind = "huber_tv"

    def __init__(self, shape, mu: float = 0.01):
        if len(shape) != 2:
            raise ValueError("Huber-TV needs 2-D images")
        if mu <= 0:
            raise ValueError("mu must be positive")
        super().__init__(shape)
        self.mu = float(mu)
        self.grad_lipschitz = 8.0 / self.mu

    @staticmethod
    def _diff(X):
        dx = np.zeros_like(X)
        dy = np.zeros_like(X)
        dx[:, :-1, :] = X[:, 1:, :] - X[:, :-1, :]
        dy[:, :, :-1] = X[:, :, 1:] - X[:, :, :-1]
        return dx, dy

    @staticmethod
    def _diff_T(px, py):
        out = np.zeros_like(px)
        out[:, 1:, :] += px[:, :-1, :]
        out[:, :-1, :] -= px[:, :-1, :]
        out[:, :, 1:] += py[:, :, :-1]
        out[:, :, :-1] -= py[:, :, :-1]
        return out

    def _values(self, X):
        dx, dy = self._diff(X)
        r = np.sqrt(dx * dx + dy * dy)
        h = np.where(r <= self.mu, r * r / (2 * self.mu), r - self.mu / 2)
        return h.reshape(len(X), -1).sum(axis=1)

    def _grads(self, X):
        dx, dy = self._diff(X)
        r = np.sqrt(dx * dx + dy * dy)
        scale = 1.0 / np.maximum(r, self.mu)
        return self._diff_T(dx * scale, dy * scale)


class IcnnRegularizer(Regularizer):
    kind = "icnn"

    def __init__(self, params: icnn.IcnnParams):
        super().__init__(params.arch.input_shape)
        params.check_feasible()
        self.params = params

    def _values(self, X):
        return icnn.psi_values(self.params, X)

    def _grads(self, X):
        return icnn.psi_input_grads(self.params, X)

    def value_and_grad(self, X):
        psi, gx, _ = icnn.psi_value_and_grads(self.params, X, want_params=False)
        return psi, gx


def bregman_distance(reg: Regularizer, x1, x2):
    """``psi(x1) - psi(x2) - <grad psi(x2), x1 - x2>`` (per image for stacks)."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    g = reg.input_grad(x2)
    diff = x1 - x2
    if diff.shape == reg.shape:
        return reg.value(x1) - reg.value(x2) - float(np.vdot(g, diff))
    inner = np.sum((g * diff).reshape(len(diff), -1), axis=1)
    return reg.value(x1) - reg.value(x2) - inner
