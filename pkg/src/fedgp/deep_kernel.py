"""
Shared feature extractor and RBF deep kernel.

The extractor is a small fully connected network with hand-written reverse
mode gradients.  The kernel is

    k(a, b) = output_scale * exp(-||a - b||^2 / (2 * length_scale^2))

evaluated on embeddings.  Objectives elsewhere in the package produce
gradients with respect to Gram matrices or embeddings; the functions here
chain them back to the network parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import chol_logdet, chol_solve, cholesky

__all__ = [
    "FeatureNetParams",
    "KernelConfig",
    "SGD",
    "init_params",
    "embed",
    "forward",
    "backward",
    "gram",
    "prior_gram",
    "rbf_backward",
    "gaussian_logdensity_grad",
    "backprop_kernel_objective",
]

_ACTIVATIONS = ("tanh", "linear")


@dataclass
class FeatureNetParams:
    """Weights and biases of the shared MLP.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; ``activations[i]`` is the
    nonlinearity applied after layer ``i``.  The same container is used for
    gradients.
    """

    weights: list
    biases: list
    activations: tuple
    version: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise ValueError("weights, biases and activations must have equal length")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.activations = tuple(self.activations)

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_vector(self, vec: np.ndarray) -> "FeatureNetParams":
        vec = np.asarray(vec, dtype=float)
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            biases.append(vec[pos:pos + b.size].reshape(b.shape))
            pos += b.size
        if pos != vec.size:
            raise ValueError("parameter vector has the wrong length")
        return FeatureNetParams(weights, biases, self.activations, self.version)

    def zeros_like(self) -> "FeatureNetParams":
        return self.with_vector(np.zeros(self.to_vector().size))

    def copy(self) -> "FeatureNetParams":
        return self.with_vector(self.to_vector().copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


@dataclass(frozen=True)
class KernelConfig:
    length_scale: float = 1.0
    output_scale: float = 8.0
    jitter_factor: float = 1e-4      # base jitter = jitter_factor * output_scale
    max_jitter_factor: float = 1e-1

    def __post_init__(self):
        if self.length_scale <= 0 or self.output_scale <= 0:
            raise ValueError("length_scale and output_scale must be positive")

    @property
    def jitter(self) -> float:
        return self.jitter_factor * self.output_scale

    @property
    def max_jitter(self) -> float:
        return self.max_jitter_factor * self.output_scale

    def cholesky(self, a):
        """Factor a kernel-scale matrix with this config's jitter policy."""
        return cholesky(a, self.jitter, self.max_jitter)


def init_params(layer_sizes, rng: np.random.Generator, activations=None) -> FeatureNetParams:
    """Gaussian weights with variance 1/fan_in and zero biases."""
    layer_sizes = tuple(int(s) for s in layer_sizes)
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if activations is None:
        activations = ("tanh",) * (len(layer_sizes) - 1)
    weights = [rng.standard_normal((m, n)) / np.sqrt(m) for m, n in zip(layer_sizes[:-1], layer_sizes[1:])]
    biases = [np.zeros(n) for n in layer_sizes[1:]]
    return FeatureNetParams(weights, biases, tuple(activations))


def forward(params: FeatureNetParams, inputs: np.ndarray):
    """Embeddings plus the cache :func:`backward` needs."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"expected inputs of width {params.input_dim}, got shape {x.shape}")
    cache = []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = x @ w + b
        out = np.tanh(h) if act == "tanh" else h
        cache.append((x, out))
        x = out
    return x, cache


def embed(params: FeatureNetParams, inputs: np.ndarray) -> np.ndarray:
    return forward(params, inputs)[0]


def backward(params: FeatureNetParams, cache, grad_out: np.ndarray) -> FeatureNetParams:
    """Gradient w.r.t. the parameters given d(objective)/d(embeddings)."""
    g = np.asarray(grad_out, dtype=float)
    gw, gb = [], []
    for (x, out), w, act in zip(reversed(cache), reversed(params.weights), reversed(params.activations)):
        if act == "tanh":
            g = g * (1.0 - out * out)
        gw.append(x.T @ g)
        gb.append(g.sum(axis=0))
        g = g @ w.T
    return FeatureNetParams(gw[::-1], gb[::-1], params.activations, params.version)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def gram(config: KernelConfig, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("kernel inputs must have equal width")
    return config.output_scale * np.exp(-_sqdist(a, b) / (2.0 * config.length_scale ** 2))


def prior_gram(config: KernelConfig, a: np.ndarray) -> np.ndarray:
    """``gram(a, a)`` plus the base jitter on the diagonal."""
    k = gram(config, a, a)
    k[np.diag_indices_from(k)] += config.jitter
    return k


def rbf_backward(config: KernelConfig, a, b, k, g):
    """Chain ``g = d(obj)/d(K)`` through ``K = gram(a, b)``.

    Entries of ``K`` are treated as independent, so for a symmetric
    ``gram(a, a)`` the caller adds both returned gradients.
    """
    gk = g * k / config.length_scale ** 2
    ga = gk @ b - gk.sum(axis=1)[:, None] * a
    gb = gk.T @ a - gk.sum(axis=0)[:, None] * b
    return ga, gb


def gaussian_logdensity_grad(mean, cov, obs, chol=None):
    """``log N(obs | mean, cov)`` with gradients w.r.t. ``cov`` and ``mean``.

    The covariance gradient treats every entry as free: ``0.5 (a a^T - cov^-1)``
    with ``a = cov^-1 (obs - mean)``.
    """
    mean = np.asarray(mean, dtype=float)
    obs = np.asarray(obs, dtype=float)
    l = cholesky(cov) if chol is None else chol
    r = obs - mean
    alpha = chol_solve(l, r)
    n = r.size
    logdens = -0.5 * r @ alpha - 0.5 * chol_logdet(l) - 0.5 * n * np.log(2.0 * np.pi)
    inv = chol_solve(l, np.eye(n))
    gcov = 0.5 * (np.outer(alpha, alpha) - inv)
    return float(logdens), gcov, alpha


def backprop_kernel_objective(params, config, inputs, grad_wrt_gram):
    """Parameter gradient of an objective that depends on ``gram(g(X), g(X))``."""
    emb, cache = forward(params, inputs)
    g = np.asarray(grad_wrt_gram, dtype=float)
    if g.shape != (emb.shape[0], emb.shape[0]):
        raise ValueError("gram gradient does not match the number of inputs")
    k = gram(config, emb, emb)
    ga, gb = rbf_backward(config, emb, emb, k, g)
    return backward(params, cache, ga + gb)


@dataclass
class SGD:
    """Gradient ascent with optional heavy-ball momentum on flat vectors."""

    lr: float = 0.05
    momentum: float = 0.0
    _velocity: dict = field(default_factory=dict, repr=False)

    def step(self, key, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.momentum:
            v = self._velocity.get(key)
            v = grad if v is None else self.momentum * v + grad
            self._velocity[key] = v
            grad = v
        return value + self.lr * grad
