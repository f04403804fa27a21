"""Synthetic classification data and a small MLP with exact gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpdiag import rng
from dpdiag.metrics import exact_mean
from dpdiag.sim.bf16 import bf16_round
from dpdiag.sim.config import ConfigError, DataSpec, ModelSpec


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    x: np.ndarray  # (n_samples, input_dim)
    y: np.ndarray  # (n_samples,) int labels
    n_classes: int

    def __len__(self) -> int:
        return self.y.shape[0]

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.x[idx], self.y[idx]


def generate_dataset(spec: DataSpec) -> SyntheticDataset:
    """Gaussian mixture: one seeded mean per class, unit-variance noise.

    Labels cycle through the classes, so class counts differ by at most one.
    """
    if spec.n_samples < 1 or spec.n_samples < spec.n_classes:
        raise ConfigError(f"n_samples must be >= max(1, n_classes), got {spec.n_samples}", "data.n_samples")
    if spec.n_classes < 2:
        raise ConfigError("need at least two classes", "data.n_classes")
    if spec.input_dim < 1:
        raise ConfigError("input_dim must be >= 1", "data.input_dim")
    gen = rng.stream(spec.seed, rng.STREAM_DATA)
    means = gen.standard_normal((spec.n_classes, spec.input_dim)) * spec.class_sep
    y = np.arange(spec.n_samples, dtype=np.int64) % spec.n_classes
    x = means[y] + gen.standard_normal((spec.n_samples, spec.input_dim))
    return SyntheticDataset(x, y, spec.n_classes)


class MLP:
    """Dense network: ``len(hidden)`` activated layers, then softmax logits.

    Parameters live in one flat float64 vector. Registration order is, per
    layer, weight ``(fan_in, fan_out)`` row-major then bias ``(fan_out,)``.
    """

    def __init__(self, input_dim: int, n_classes: int, spec: ModelSpec = ModelSpec()):
        self.widths = (input_dim, *spec.hidden, n_classes)
        self.activation = spec.activation
        self.shapes: list[tuple[str, tuple[int, ...]]] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.shapes.append((f"layer{i}.weight", (fan_in, fan_out)))
            self.shapes.append((f"layer{i}.bias", (fan_out,)))
        self.dim = sum(math.prod(s) for _, s in self.shapes)

    def flattening(self) -> list[list]:
        return [[name, list(shape)] for name, shape in self.shapes]

    def init_params(self, seed: int) -> np.ndarray:
        gen = rng.stream(seed, rng.STREAM_INIT)
        parts = []
        for name, shape in self.shapes:
            if name.endswith("weight"):
                parts.append(gen.standard_normal(shape).ravel() / math.sqrt(shape[0]))
            else:
                parts.append(np.zeros(shape))
        return np.concatenate(parts)

    def unflatten(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} parameters, got shape {params.shape}")
        layers, offset = [], 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset:offset + fan_out]
            offset += fan_out
            layers.append((w, b))
        return layers

    def _act(self, z):
        if self.activation == "tanh":
            return np.tanh(z)
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return z

    def _act_grad(self, z, a):
        if self.activation == "tanh":
            return 1.0 - a * a
        if self.activation == "relu":
            return (z > 0).astype(np.float64)
        return np.ones_like(z)

    def _check_batch(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ValueError(f"batch features must have shape (B, {self.widths[0]}), got {x.shape}")
        if y.shape != (x.shape[0],) or x.shape[0] == 0:
            raise ValueError("labels must be a non-empty vector matching the batch")
        if y.min() < 0 or y.max() >= self.widths[-1]:
            raise ValueError("label out of range")
        return x, y

    def _forward(self, params, x, quantize_activations):
        layers = self.unflatten(params)
        cache = []
        h = x
        for w, b in layers[:-1]:
            z = h @ w + b
            a = self._act(z)
            if quantize_activations:
                a = bf16_round(a)
            cache.append((h, z, a))
            h = a
        w, b = layers[-1]
        logits = h @ w + b
        return layers, cache, h, logits

    def predict(self, params, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        _, _, _, logits = self._forward(params, x, False)
        return logits.argmax(axis=1)

    @staticmethod
    def _per_sample_loss(logits, y):
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        return lse - logits[np.arange(len(y)), y]

    def loss(self, params, x, y, quantize_activations: bool = False) -> float:
        """Mean softmax cross-entropy over the batch."""
        x, y = self._check_batch(x, y)
        _, _, _, logits = self._forward(params, x, quantize_activations)
        return exact_mean(self._per_sample_loss(logits, y).tolist())

    def loss_and_grad(self, params, x, y, quantize_activations: bool = False) -> tuple[float, np.ndarray]:
        """Loss and its exact gradient, flattened in registration order.

        With ``quantize_activations`` the bf16 rounding of hidden activations
        is treated as the identity on the backward pass.
        """
        x, y = self._check_batch(x, y)
        layers, cache, h_last, logits = self._forward(params, x, quantize_activations)
        n = len(y)
        loss = exact_mean(self._per_sample_loss(logits, y).tolist())

        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        delta = p / n

        grads = [(h_last.T @ delta, delta.sum(axis=0))]
        # cache[i] feeds layers[i + 1]
        for (h, z, a), (w_out, _) in zip(reversed(cache), reversed(layers[1:])):
            delta = (delta @ w_out.T) * self._act_grad(z, a)
            grads.append((h.T @ delta, delta.sum(axis=0)))
        grads.reverse()
        flat = np.concatenate([part.ravel() for gw, gb in grads for part in (gw, gb)])
        return loss, flat
