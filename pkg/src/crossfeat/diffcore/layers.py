"""Dense MLPs and the attention-free transformer layer.

Both come as a pure function over a parameter mapping (``mlp_forward``,
``aft_layer_forward``) and as an ``nn.Module`` that owns its parameters and
delegates to the function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
from torch import nn

from .ops import batchnorm_forward, layer_norm, relu, sigmoid, softmax


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    layer_output_sizes: tuple[int, ...]
    batch_norm: bool = False  # after every layer except the last

    def __post_init__(self):
        if not self.layer_output_sizes or min(self.layer_output_sizes) <= 0 or self.in_dim <= 0:
            raise ValueError("MLP sizes must be positive and non-empty")

    @property
    def out_dim(self) -> int:
        return self.layer_output_sizes[-1]


@dataclass(frozen=True)
class AftLayerSpec:
    model_dim: int
    hidden_expansion: int = 2


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) % (1 << 64))


def he_uniform(fan_in: int, fan_out: int, gen: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(fan_in, fan_out, generator=gen) * 2 - 1) * bound


def mlp_forward(spec: MlpSpec, params: Mapping[str, torch.Tensor], x: torch.Tensor,
                training: bool = False) -> torch.Tensor:
    h = x
    last = len(spec.layer_output_sizes) - 1
    for i, _ in enumerate(spec.layer_output_sizes):
        w, b = params[f"l{i}_weight"], params[f"l{i}_bias"]
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(f"layer {i}: input has {h.shape[-1]} columns, weight expects {w.shape[0]}")
        h = h @ w + b
        if i < last:
            if spec.batch_norm:
                h = batchnorm_forward(h, params[f"l{i}_bn_gamma"], params[f"l{i}_bn_beta"],
                                      params[f"l{i}_bn_mean"], params[f"l{i}_bn_var"], training)
            h = relu(h)
    return h


def aft_layer_forward(spec: AftLayerSpec, params: Mapping[str, torch.Tensor],
                      tokens: torch.Tensor) -> torch.Tensor:
    """AFT-simple block with pre-norm residual attention and feed-forward sub-blocks."""
    if tokens.shape[0] == 0:
        raise ShapeError("attention-free layer needs at least one token")
    if tokens.shape[-1] != spec.model_dim:
        raise ShapeError(f"tokens have {tokens.shape[-1]} channels, layer expects {spec.model_dim}")
    p = params
    h = layer_norm(tokens, p["ln1_gamma"], p["ln1_beta"])
    q = h @ p["q_weight"] + p["q_bias"]
    k = h @ p["k_weight"] + p["k_bias"]
    v = h @ p["v_weight"] + p["v_bias"]
    context = (softmax(k, dim=0) * v).sum(dim=0, keepdim=True)
    x = tokens + sigmoid(q) * context
    h = layer_norm(x, p["ln2_gamma"], p["ln2_beta"])
    h = relu(h @ p["ff1_weight"] + p["ff1_bias"]) @ p["ff2_weight"] + p["ff2_bias"]
    return x + h


class Mlp(nn.Module):
    def __init__(self, spec: MlpSpec, gen: torch.Generator):
        super().__init__()
        self.spec = spec
        dims = (spec.in_dim,) + tuple(spec.layer_output_sizes)
        last = len(spec.layer_output_sizes) - 1
        for i in range(len(spec.layer_output_sizes)):
            self.register_parameter(f"l{i}_weight", nn.Parameter(he_uniform(dims[i], dims[i + 1], gen)))
            self.register_parameter(f"l{i}_bias", nn.Parameter(torch.zeros(dims[i + 1])))
            if spec.batch_norm and i < last:
                self.register_parameter(f"l{i}_bn_gamma", nn.Parameter(torch.ones(dims[i + 1])))
                self.register_parameter(f"l{i}_bn_beta", nn.Parameter(torch.zeros(dims[i + 1])))
                self.register_buffer(f"l{i}_bn_mean", torch.zeros(dims[i + 1]))
                self.register_buffer(f"l{i}_bn_var", torch.ones(dims[i + 1]))

    def tensors(self) -> dict[str, torch.Tensor]:
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.spec, self.tensors(), x, training=self.training)


class AftLayer(nn.Module):
    def __init__(self, spec: AftLayerSpec, gen: torch.Generator):
        super().__init__()
        self.spec = spec
        d, hdim = spec.model_dim, spec.model_dim * spec.hidden_expansion
        for name in ("ln1", "ln2"):
            self.register_parameter(f"{name}_gamma", nn.Parameter(torch.ones(d)))
            self.register_parameter(f"{name}_beta", nn.Parameter(torch.zeros(d)))
        for name, (fi, fo) in {"q": (d, d), "k": (d, d), "v": (d, d), "ff1": (d, hdim), "ff2": (hdim, d)}.items():
            self.register_parameter(f"{name}_weight", nn.Parameter(he_uniform(fi, fo, gen)))
            self.register_parameter(f"{name}_bias", nn.Parameter(torch.zeros(fo)))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return aft_layer_forward(self.spec, dict(self.named_parameters()), tokens)
