"""Adam/AdamW updates, the warmup-cosine schedule and gradient evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    base_lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0  # 0 gives plain Adam
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def state_tensors(self, prefix: str = "opt/") -> dict[str, torch.Tensor]:
        out = {f"{prefix}step": torch.tensor([float(self.step)])}
        for k, v in self.exp_avg.items():
            out[f"{prefix}m/{k}"] = v
        for k, v in self.exp_avg_sq.items():
            out[f"{prefix}v/{k}"] = v
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], prefix: str = "opt/") -> None:
        self.step = int(tensors[f"{prefix}step"].reshape(-1)[0])
        for key, val in tensors.items():
            if key.startswith(f"{prefix}m/"):
                self.exp_avg[key[len(prefix) + 2:]] = val.clone()
            elif key.startswith(f"{prefix}v/"):
                self.exp_avg_sq[key[len(prefix) + 2:]] = val.clone()


def adamw(base_lr: float, weight_decay: float = 0.01, **kw) -> OptimizerState:
    return OptimizerState(base_lr=base_lr, weight_decay=weight_decay, **kw)


def adam(base_lr: float, **kw) -> OptimizerState:
    return OptimizerState(base_lr=base_lr, weight_decay=0.0, **kw)


@torch.no_grad()
def optimizer_step(state: OptimizerState, params: Mapping[str, torch.Tensor],
                   grads: Mapping[str, torch.Tensor], lr: float | None = None) -> None:
    """Bias-corrected adaptive-moment update, in place.

    Decoupled weight decay ``p <- p * (1 - lr * weight_decay)`` is applied
    before the moment step.
    """
    lr = state.base_lr if lr is None else lr
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if state.weight_decay:
            p.mul_(1 - lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v.sqrt() / math.sqrt(bc2)).add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    total_steps: int
    warmup_steps: int = 500

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 < warmup_steps ({self.warmup_steps}) < total_steps ({self.total_steps})")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to the peak, then cosine decay to zero at ``total_steps``."""
    w, t = schedule.warmup_steps, schedule.total_steps
    step = min(max(step, 0), t)
    if step <= w:
        return schedule.peak_lr * step / w
    return schedule.peak_lr * 0.5 * (1 + math.cos(math.pi * (step - w) / (t - w)))


def grad(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss with respect to every tensor in ``params``."""
    loss = loss_fn()
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError(f"loss is {float(loss)}")
    names = list(params)
    if not loss.requires_grad:
        return {n: torch.zeros_like(params[n]) for n in names}
    gs = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, gs)}
