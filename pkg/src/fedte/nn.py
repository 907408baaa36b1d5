"""Minimal numpy neural-network engine.

Supports plain feed-forward stacks of valid (unpadded) convolutions, 2x2
max-pooling and dense layers, trained with softmax cross-entropy and SGD.
All parameters live in a single flat vector so that aggregation, penalty
terms and constraint targets can treat a model as one array.

Flat layout: layers in order, weights before biases within a layer.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 5
    stride: int = 1
    relu: bool = True


@dataclass(frozen=True)
class Pool:
    size: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Dense:
    units: int
    relu: bool = True


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack plus input shape (channels, height, width)."""

    input_shape: tuple
    layers: tuple


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (B, C, H, W), values in [0, 1]
    labels: np.ndarray  # (B,) integer class ids


def baseline_cnn(input_shape=(1, 28, 28)):
    """Two-conv / two-dense classifier used for all image experiments."""
    return ModelSpec(
        input_shape=tuple(input_shape),
        layers=(
            Conv(16, kernel=5, stride=1),
            Pool(),
            Conv(32, kernel=5, stride=1),
            Pool(),
            Dense(512),
            Dense(10, relu=False),
        ),
    )


def lr_at_round(round_idx, base, decay):
    """Per-communication-round learning rate: base * decay**(round-1)."""
    if base <= 0 or not (0 < decay <= 1):
        raise ConfigError(f"invalid lr schedule base={base} decay={decay}")
    if round_idx < 1:
        raise ConfigError(f"round index must be >= 1, got {round_idx}")
    return base * decay ** (round_idx - 1)


def sgd_step(params, grad, lr):
    if params.shape != grad.shape:
        raise ConfigError(f"shape mismatch {params.shape} vs {grad.shape}")
    return params - params.dtype.type(lr) * grad


class Network:
    """Stateless forward/backward engine for one ModelSpec.

    Parameters are always passed in explicitly as a flat vector; the network
    object only holds shapes. Conv layers require stride 1 and pooling
    requires even spatial dims (true for the baseline CNN on 28x28 and
    32x32 inputs).
    """

    def __init__(self, spec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self._shapes = []  # flat list of parameter array shapes
        self._fan_in = []  # fan-in per weight array (None for biases)
        shape = tuple(spec.input_shape)
        for layer in spec.layers:
            if isinstance(layer, Conv):
                if layer.stride != 1:
                    raise ConfigError("only stride-1 convolutions supported")
                c, h, w = shape
                ho, wo = h - layer.kernel + 1, w - layer.kernel + 1
                if ho < 1 or wo < 1:
                    raise ConfigError(f"kernel {layer.kernel} too large for {shape}")
                self._shapes.append((layer.out_channels, c, layer.kernel, layer.kernel))
                self._fan_in.append(c * layer.kernel * layer.kernel)
                self._shapes.append((layer.out_channels,))
                self._fan_in.append(None)
                shape = (layer.out_channels, ho, wo)
            elif isinstance(layer, Pool):
                if layer.size != 2 or layer.stride != 2:
                    raise ConfigError("only 2x2 stride-2 pooling supported")
                c, h, w = shape
                if h % 2 or w % 2:
                    raise ConfigError(f"pooling needs even spatial dims, got {shape}")
                shape = (c, h // 2, w // 2)
            elif isinstance(layer, Dense):
                d = int(np.prod(shape))
                self._shapes.append((layer.units, d))
                self._fan_in.append(d)
                self._shapes.append((layer.units,))
                self._fan_in.append(None)
                shape = (layer.units,)
            else:
                raise ConfigError(f"unknown layer {layer!r}")
        self.output_dim = shape[0]
        self._offsets = np.cumsum([0] + [int(np.prod(s)) for s in self._shapes])
        self.n_params = int(self._offsets[-1])

    # -- parameter plumbing ------------------------------------------------

    def init_params(self, seed):
        """Fan-in scaled uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        parts = []
        for shape, fan_in in zip(self._shapes, self._fan_in):
            if fan_in is None:
                parts.append(np.zeros(shape, dtype=self.dtype))
            else:
                bound = np.sqrt(6.0 / fan_in)
                parts.append(rng.uniform(-bound, bound, size=shape).astype(self.dtype))
        return np.concatenate([p.ravel() for p in parts])

    def unflatten(self, params):
        if params.shape != (self.n_params,):
            raise ConfigError(f"expected {self.n_params} params, got {params.shape}")
        return [
            params[self._offsets[i]:self._offsets[i + 1]].reshape(s)
            for i, s in enumerate(self._shapes)
        ]

    def flatten(self, arrays):
        return np.concatenate([np.asarray(a).ravel() for a in arrays]).astype(
            self.dtype, copy=False
        )

    # -- forward / backward ------------------------------------------------

    def forward(self, params, inputs):
        """Logits for a batch of inputs, shape (B, output_dim)."""
        logits, _ = self._forward(params, inputs, keep=False)
        return logits

    def _forward(self, params, inputs, keep):
        arrays = self.unflatten(params)
        a = np.asarray(inputs, dtype=self.dtype)
        if a.shape[1:] != tuple(self.spec.input_shape):
            raise ConfigError(
                f"input shape {a.shape[1:]} does not match spec "
                f"{self.spec.input_shape}"
            )
        caches = []
        i = 0
        for layer in self.spec.layers:
            if isinstance(layer, Conv):
                w, b = arrays[i], arrays[i + 1]
                i += 2
                win = sliding_window_view(a, (layer.kernel, layer.kernel), axis=(2, 3))
                z = np.einsum("bcijuv,fcuv->bfij", win, w, optimize=True)
                z += b[None, :, None, None]
                out = np.maximum(z, 0) if layer.relu else z
                if keep:
                    caches.append(("conv", layer, win, w, z, a.shape))
                a = out
            elif isinstance(layer, Pool):
                nb, c, h, w_ = a.shape
                ho, wo = h // 2, w_ // 2
                r = (
                    a.reshape(nb, c, ho, 2, wo, 2)
                    .transpose(0, 1, 2, 4, 3, 5)
                    .reshape(nb, c, ho, wo, 4)
                )
                idx = r.argmax(axis=-1)
                out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
                if keep:
                    caches.append(("pool", layer, idx, a.shape))
                a = out
            elif isinstance(layer, Dense):
                orig_shape = a.shape
                if a.ndim > 2:
                    a = a.reshape(orig_shape[0], -1)
                w, b = arrays[i], arrays[i + 1]
                i += 2
                z = a @ w.T + b
                out = np.maximum(z, 0) if layer.relu else z
                if keep:
                    caches.append(("dense", layer, a, w, z, orig_shape))
                a = out
        return a, caches

    def loss_and_grad(self, params, batch, penalty=None):
        """Mean cross-entropy (plus optional penalty) and its flat gradient."""
        logits, caches = self._forward(params, batch.inputs, keep=True)
        labels = np.asarray(batch.labels)
        nb = logits.shape[0]
        rows = np.arange(nb)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-logp[rows, labels].mean())

        d = np.exp(logp)
        d[rows, labels] -= 1
        d /= nb
        d = d.astype(self.dtype, copy=False)

        grads = []
        for kind, layer, *cache in reversed(caches):
            if kind == "dense":
                a_in, w, z, orig_shape = cache
                if layer.relu:
                    d = d * (z > 0)
                grads.append(d.sum(axis=0))  # bias
                grads.append(d.T @ a_in)  # weight
                d = d @ w
                if len(orig_shape) > 2:
                    d = d.reshape(orig_shape)
            elif kind == "pool":
                idx, in_shape = cache
                nb_, c, h, w_ = in_shape
                ho, wo = h // 2, w_ // 2
                dr = np.zeros((nb_, c, ho, wo, 4), dtype=self.dtype)
                np.put_along_axis(dr, idx[..., None], d[..., None], axis=-1)
                d = (
                    dr.reshape(nb_, c, ho, wo, 2, 2)
                    .transpose(0, 1, 2, 4, 3, 5)
                    .reshape(in_shape)
                )
            else:  # conv
                win, w, z, in_shape = cache
                if layer.relu:
                    d = d * (z > 0)
                grads.append(d.sum(axis=(0, 2, 3)))  # bias
                grads.append(np.einsum("bcijuv,bfij->fcuv", win, d, optimize=True))
                dx = np.zeros(in_shape, dtype=self.dtype)
                k = layer.kernel
                ho, wo = d.shape[2], d.shape[3]
                for u in range(k):
                    for v in range(k):
                        dx[:, :, u:u + ho, v:v + wo] += np.einsum(
                            "bfij,fc->bcij", d, w[:, :, u, v]
                        )
                d = dx
        grads.reverse()
        grad = np.concatenate([g.ravel() for g in grads]).astype(self.dtype, copy=False)

        if penalty is not None:
            loss = loss + penalty.value(params)
            grad = grad + penalty.grad(params)
        return loss, grad
