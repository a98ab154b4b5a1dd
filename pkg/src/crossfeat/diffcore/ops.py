"""Elementwise and normalization primitives over torch tensors."""
from __future__ import annotations

import torch

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5


class ZeroVectorError(ValueError):
    pass


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def l2_normalize(x: torch.Tensor, dim: int = -1, min_norm: float = 1e-12) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    if x.numel() and bool((norm <= min_norm).any()):
        raise ZeroVectorError("cannot L2-normalize a zero vector")
    return x / norm


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> torch.Tensor:
    """Batch normalization over rows.

    In training mode the batch statistics normalize ``x`` and the running
    buffers are updated in place (unbiased variance, as is conventional).
    In inference mode the running statistics are used, so the op is affine.
    """
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch-norm in training mode needs at least two rows")
        mu = x.mean(dim=0)
        var = x.var(dim=0, unbiased=False)
        with torch.no_grad():
            n = x.shape[0]
            running_mean.mul_(1 - momentum).add_(momentum * mu.detach())
            running_var.mul_(1 - momentum).add_(momentum * var.detach() * n / (n - 1))
    else:
        mu, var = running_mean, running_var
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta
