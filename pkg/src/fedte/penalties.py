"""Quadratic constraint terms for local training and Fisher-diagonal estimation.

Two penalty shapes are supported: a plain proximal anchor
alpha * ||w - target||^2 and its importance-weighted version
alpha * sum_i f_i (w_i - target_i)^2 where f is a nonnegative per-parameter
Fisher diagonal. A penalty of None means unconstrained local training.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import Batch


@dataclass(frozen=True)
class Prox:
    alpha: float
    target: np.ndarray

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"penalty weight must be >= 0, got {self.alpha}")

    def value(self, params):
        diff = params - self.target
        return self.alpha * float(np.sum(diff * diff))

    def grad(self, params):
        return (2.0 * self.alpha) * (params - self.target)


@dataclass(frozen=True)
class FisherDiag:
    alpha: float
    target: np.ndarray
    fisher: np.ndarray  # nonnegative, same length as target

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"penalty weight must be >= 0, got {self.alpha}")
        if self.fisher.shape != self.target.shape:
            raise ConfigError("fisher diagonal and target must have equal length")

    def value(self, params):
        diff = params - self.target
        return self.alpha * float(np.sum(self.fisher * diff * diff))

    def grad(self, params):
        return (2.0 * self.alpha) * (self.fisher * (params - self.target))


def fisher_diag(net, params, ds, max_samples=1024, seed=0):
    """Empirical Fisher diagonal: mean squared per-example log-likelihood gradient.

    Uses the true labels of `ds` (a server-side proxy set). At most
    `max_samples` examples are used, subsampled without replacement; the
    accumulation order is canonical (ascending index) so the estimate does
    not depend on draw order.
    """
    n = len(ds)
    if n == 0:
        raise ConfigError("fisher estimation needs a non-empty dataset")
    if n > max_samples:
        idx = np.random.default_rng(seed).choice(n, size=max_samples, replace=False)
        idx = np.sort(idx)
    else:
        idx = np.arange(n)
    acc = np.zeros(net.n_params, dtype=np.float64)
    for i in idx:
        # single-example CE equals the negative log-likelihood of the true label
        _, grad = net.loss_and_grad(
            params, Batch(ds.images[i:i + 1], ds.labels[i:i + 1])
        )
        g = grad.astype(np.float64, copy=False)
        acc += g * g
    return (acc / idx.size).astype(params.dtype)
