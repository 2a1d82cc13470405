"""The tiny decoder: [encoding || fused feature] -> (density, color).

Two stacks share the work: the sigma net maps the input through one hidden
ReLU layer of 64 to a head emitting 1 raw density plus H handoff features;
the color net maps those H features through one hidden ReLU layer of 64 to 3
raw color channels. Density uses softplus, color uses the logistic sigmoid.
The "large" variant (ablation) swaps the sigma-net hidden stack for 8 ReLU
layers of 256.

Forward and backward are written out by hand; backward returns the gradient
with respect to the input vector so it can keep flowing into plane features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .config import MlpConfig
from .errors import NumericalError


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype) -> "Param":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)
    return Param(w, np.zeros_like(w)), Param.zeros((fan_out,), dtype)


@dataclass
class MlpParams:
    input_dim: int
    hidden_features: int
    sigma_hidden: list[tuple[Param, Param]] = field(default_factory=list)
    sigma_head: tuple[Param, Param] | None = None
    color_hidden: list[tuple[Param, Param]] = field(default_factory=list)
    color_head: tuple[Param, Param] | None = None

    @classmethod
    def create(cls, input_dim: int, cfg: MlpConfig, rng: np.random.Generator,
               dtype=np.float32) -> "MlpParams":
        widths = [64] if cfg.kind == "tiny" else [256] * 8
        p = cls(input_dim, cfg.hidden_features)
        prev = input_dim
        for w in widths:
            p.sigma_hidden.append(_init_linear(rng, prev, w, dtype))
            prev = w
        p.sigma_head = _init_linear(rng, prev, 1 + cfg.hidden_features, dtype)
        p.color_hidden.append(_init_linear(rng, cfg.hidden_features, 64, dtype))
        p.color_head = _init_linear(rng, 64, 3, dtype)
        return p

    def parameters(self):
        """(name, Param) pairs in the fixed serialization order:
        sigma hidden weights, sigma hidden biases, sigma head, then color
        likewise."""
        for i, (w, _) in enumerate(self.sigma_hidden):
            yield f"sigma_hidden{i}.w", w
        for i, (_, b) in enumerate(self.sigma_hidden):
            yield f"sigma_hidden{i}.b", b
        yield "sigma_head.w", self.sigma_head[0]
        yield "sigma_head.b", self.sigma_head[1]
        for i, (w, _) in enumerate(self.color_hidden):
            yield f"color_hidden{i}.w", w
        for i, (_, b) in enumerate(self.color_hidden):
            yield f"color_hidden{i}.b", b
        yield "color_head.w", self.color_head[0]
        yield "color_head.b", self.color_head[1]

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.grad[...] = 0


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass
class MlpCache:
    x: np.ndarray
    sigma_pre: list[np.ndarray]  # pre-activations of sigma hidden layers
    sigma_act: list[np.ndarray]  # post-ReLU activations
    head_out: np.ndarray  # (n, 1 + H)
    color_pre: list[np.ndarray]
    color_act: list[np.ndarray]
    raw_rgb: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray


def mlp_forward(params: MlpParams, x: np.ndarray, need_cache: bool = True):
    """Evaluate the decoder on (n, input_dim) inputs.

    Returns (sigma (n,), rgb (n, 3), cache). Raises NumericalError on
    non-finite input, which indicates corrupted upstream state.
    """
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise ValueError(f"expected input width {params.input_dim}, got {x.shape[1]}")
    if not np.isfinite(x).all():
        raise NumericalError("non-finite decoder input")

    sigma_pre, sigma_act = [], []
    h = x
    for w, b in params.sigma_hidden:
        z = h @ w.value + b.value
        h = np.maximum(z, 0)
        sigma_pre.append(z)
        sigma_act.append(h)
    hw, hb = params.sigma_head
    head_out = h @ hw.value + hb.value
    sigma = softplus(head_out[:, 0])
    feat = head_out[:, 1:]

    color_pre, color_act = [], []
    h = feat
    for w, b in params.color_hidden:
        z = h @ w.value + b.value
        h = np.maximum(z, 0)
        color_pre.append(z)
        color_act.append(h)
    cw, cb = params.color_head
    raw_rgb = h @ cw.value + cb.value
    rgb = expit(raw_rgb)

    cache = MlpCache(x, sigma_pre, sigma_act, head_out, color_pre, color_act,
                     raw_rgb, sigma, rgb) if need_cache else None
    return sigma, rgb, cache


def mlp_backward(params: MlpParams, cache: MlpCache, d_sigma: np.ndarray,
                 d_rgb: np.ndarray) -> np.ndarray:
    """Accumulate parameter grads; return d(loss)/d(input) of shape (n, input_dim)."""
    d_sigma = np.asarray(d_sigma).reshape(-1)
    d_rgb = np.asarray(d_rgb).reshape(-1, 3)

    # heads: softplus' = logistic, logistic' = y (1 - y)
    d_raw_sigma = d_sigma * expit(cache.head_out[:, 0])
    d_raw_rgb = d_rgb * cache.rgb * (1.0 - cache.rgb)

    cw, cb = params.color_head
    h_last = cache.color_act[-1] if cache.color_act else cache.head_out[:, 1:]
    cw.grad += h_last.T @ d_raw_rgb
    cb.grad += d_raw_rgb.sum(axis=0)
    d_h = d_raw_rgb @ cw.value.T
    for (w, b), z, below in zip(reversed(params.color_hidden),
                                reversed(cache.color_pre),
                                [*reversed(cache.color_act[:-1]), cache.head_out[:, 1:]]):
        d_z = d_h * (z > 0)
        w.grad += below.T @ d_z
        b.grad += d_z.sum(axis=0)
        d_h = d_z @ w.value.T
    d_feat = d_h

    d_head = np.concatenate([d_raw_sigma[:, None], d_feat], axis=1)
    hw, hb = params.sigma_head
    hw.grad += cache.sigma_act[-1].T @ d_head
    hb.grad += d_head.sum(axis=0)
    d_h = d_head @ hw.value.T
    for (w, b), z, below in zip(reversed(params.sigma_hidden),
                                reversed(cache.sigma_pre),
                                [*reversed(cache.sigma_act[:-1]), cache.x]):
        d_z = d_h * (z > 0)
        w.grad += below.T @ d_z
        b.grad += d_z.sum(axis=0)
        d_h = d_z @ w.value.T
    return d_h
