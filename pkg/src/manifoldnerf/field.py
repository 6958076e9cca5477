"""The learned radiance field: frequency encoding plus a small ReLU MLP.

Parameters live in plain float64 tensors so the renderer and the feature
extractor can record onto the same autograd graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .errors import DomainError, GraphError, NumericError

DTYPE = torch.float64


@dataclass(frozen=True)
class EncodingConfig:
    levels_position: int = 6
    levels_direction: int = 2
    include_input: bool = True

    def __post_init__(self):
        if self.levels_position < 0 or self.levels_direction < 0:
            raise DomainError("encoding levels must be non-negative")

    def encoded_dim(self, levels):
        return 3 * (2 * levels + int(self.include_input))

    @property
    def position_dim(self):
        return self.encoded_dim(self.levels_position)

    @property
    def direction_dim(self):
        return self.encoded_dim(self.levels_direction)


def positional_encode(x, levels, include_input=True):
    """Frequency encoding of (..., 3) points.

    Layout is ``[x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...]``
    with ``x`` present only when ``include_input``.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    parts = [x] if include_input else []
    for k in range(levels):
        scaled = (2.0**k * math.pi) * x
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


@dataclass
class MlpParams:
    """Weights and biases of the field MLP.

    Hidden layers see the encoded position only. The output layer sees the
    last hidden activation concatenated with the encoded direction and emits
    ``(r, g, b, sigma)`` pre-activations.
    """

    weights: list
    biases: list
    activations: list = dc_field(default_factory=list)

    def __post_init__(self):
        if not self.activations:
            self.activations = ["relu"] * (len(self.weights) - 1) + ["linear"]
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise DomainError("weights, biases and activations must have equal length")

    @property
    def tensors(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def widths(self):
        return [w.shape[0] for w in self.weights]

    @property
    def num_parameters(self):
        return sum(t.numel() for t in self.tensors)

    def requires_grad_(self, flag=True):
        for t in self.tensors:
            t.requires_grad_(flag)
        return self

    def clone(self):
        return MlpParams(
            [w.detach().clone() for w in self.weights],
            [b.detach().clone() for b in self.biases],
            list(self.activations),
        )

    def check_finite(self):
        for t in self.tensors:
            if not torch.isfinite(t).all():
                raise NumericError("field parameters contain non-finite values")

    def flat(self):
        return torch.cat([t.detach().reshape(-1) for t in self.tensors])


def init_params(config, hidden=(64, 64, 64, 64), seed=0):
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    fan_ins = [config.position_dim] + list(hidden[:-1]) + [hidden[-1] + config.direction_dim]
    fan_outs = list(hidden) + [4]
    weights, biases = [], []
    for fan_in, fan_out in zip(fan_ins, fan_outs):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(torch.tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), dtype=DTYPE))
        biases.append(torch.zeros(fan_out, dtype=DTYPE))
    return MlpParams(weights, biases)


def raw_outputs(params, config, x, d):
    """Pre-activation ``(N, 4)`` outputs for points ``x`` viewed along ``d``."""
    h = positional_encode(x, config.levels_position, config.include_input)
    enc_d = positional_encode(d, config.levels_direction, config.include_input)
    last = len(params.weights) - 1
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        if i == last:
            h = torch.cat([h, enc_d], dim=-1)
        h = torch.nn.functional.linear(h, w, b)
        if act == "relu":
            h = torch.relu(h)
        elif act != "linear":
            raise DomainError(f"unknown activation {act!r}")
    return h


def field_eval(params, config, x, d):
    """Color in [0, 1]^3 and non-negative density at points ``x`` along unit ``d``.

    Accepts single 3-vectors or ``(N, 3)`` batches; returns ``(color, density)``
    with shapes ``(..., 3)`` and ``(...)``.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    d = torch.as_tensor(d, dtype=DTYPE)
    norms = torch.linalg.norm(d.detach(), dim=-1)
    if torch.any((norms - 1.0).abs() > 1e-6):
        raise DomainError("view directions must be unit length")
    raw = raw_outputs(params, config, x, d)
    color = torch.sigmoid(raw[..., :3])
    density = torch.nn.functional.softplus(raw[..., 3])
    return color, density


def backprop(loss, params, upstream=None):
    """Gradients of ``loss`` with respect to every tensor of ``params``.

    ``upstream`` supplies the adjoint for non-scalar outputs. Tensors that the
    loss does not depend on get zero gradients.
    """
    tensors = params.tensors if isinstance(params, MlpParams) else list(params)
    loss = torch.as_tensor(loss, dtype=DTYPE)
    if upstream is not None:
        upstream = torch.as_tensor(upstream, dtype=loss.dtype)
        if upstream.shape != loss.shape:
            raise GraphError(f"adjoint shape {tuple(upstream.shape)} does not match output {tuple(loss.shape)}")
    elif loss.numel() != 1:
        raise GraphError("non-scalar output needs an explicit upstream adjoint")
    if not loss.requires_grad:
        return [torch.zeros_like(t) for t in tensors]
    grads = torch.autograd.grad(loss, tensors, grad_outputs=upstream, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


class RadianceField:
    """Callable bundle of parameters and encoding used by the renderer."""

    def __init__(self, params, config):
        self.params = params
        self.config = config

    def __call__(self, x, d):
        return field_eval(self.params, self.config, x, d)
