"""Batch normalization for one recurrent-loop input site.

Training mode normalizes each column with the batch statistics and returns
a new layer carrying updated running statistics; inference mode uses the
running statistics only, so it works for a batch of one.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .numkernel import ShapeError, as_float, col_stats

__all__ = [
    "BnLayer",
    "BnCache",
    "UninitializedStatisticsError",
    "make_bn_layer",
    "bn_forward_train",
    "bn_forward_infer",
    "bn_backward",
]


class UninitializedStatisticsError(RuntimeError):
    """Inference-mode normalization requested before any training update."""


@dataclass(frozen=True)
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = field(metadata={"buffer": True})
    running_var: np.ndarray = field(metadata={"buffer": True})
    eps: float = field(default=1e-5, metadata={"static": True})
    momentum: float = field(default=0.1, metadata={"static": True})
    n_updates: int = field(default=0, metadata={"static": True})

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")

    @property
    def width(self):
        return self.gamma.shape[1]


@dataclass(frozen=True)
class BnCache:
    x_hat: np.ndarray
    std: np.ndarray
    x: np.ndarray
    train: bool


def make_bn_layer(width, gamma=0.1, beta=0.0, eps=1e-5, momentum=0.1):
    """Fresh layer: constant gamma/beta, running mean 0 and variance 1, no updates yet."""
    if width < 1:
        raise ValueError(f"width must be positive, got {width}")
    return BnLayer(
        gamma=np.full((1, width), float(gamma)),
        beta=np.full((1, width), float(beta)),
        running_mean=np.zeros((1, width)),
        running_var=np.ones((1, width)),
        eps=eps,
        momentum=momentum,
    )


def _check_width(x, layer):
    if x.ndim != 2 or x.shape[1] != layer.width:
        raise ShapeError(f"input of shape {x.shape} does not match batch-norm width {layer.width}")


def bn_forward_train(x, layer):
    """Normalize with batch statistics.

    Returns ``(y, cache, new_layer)``; ``new_layer`` has its running
    statistics moved toward the batch statistics by ``momentum``.
    """
    x = as_float(x)
    _check_width(x, layer)
    mean, var = col_stats(x)
    std = np.sqrt(var + layer.eps)
    x_hat = (x - mean) / std
    y = layer.gamma * x_hat + layer.beta
    m = layer.momentum
    new_layer = replace(
        layer,
        running_mean=(1.0 - m) * layer.running_mean + m * mean,
        running_var=(1.0 - m) * layer.running_var + m * var,
        n_updates=layer.n_updates + 1,
    )
    return y, BnCache(x_hat=x_hat, std=std, x=x, train=True), new_layer


def bn_forward_infer(x, layer, return_cache=False):
    x = as_float(x)
    _check_width(x, layer)
    if layer.n_updates == 0:
        raise UninitializedStatisticsError(
            "batch-norm running statistics are uninitialized; run at least one training step first"
        )
    std = np.sqrt(layer.running_var + layer.eps)
    x_hat = (x - layer.running_mean) / std
    y = layer.gamma * x_hat + layer.beta
    if return_cache:
        return y, BnCache(x_hat=x_hat, std=std, x=x, train=False)
    return y


def bn_backward(dy, cache, layer):
    """Gradients ``(dx, dgamma, dbeta)`` of the forward map that produced ``cache``.

    In training mode the batch mean and variance depend on every row of x,
    which gives the usual three-term expression for dx.
    """
    dy = as_float(dy)
    if dy.shape != cache.x_hat.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match cache {cache.x_hat.shape}")
    dbeta = dy.sum(axis=0, keepdims=True)
    dgamma = (dy * cache.x_hat).sum(axis=0, keepdims=True)
    dx_hat = dy * layer.gamma
    if not cache.train:
        return dx_hat / cache.std, dgamma, dbeta
    dx = (
        dx_hat
        - dx_hat.mean(axis=0, keepdims=True)
        - cache.x_hat * (dx_hat * cache.x_hat).mean(axis=0, keepdims=True)
    ) / cache.std
    return dx, dgamma, dbeta
