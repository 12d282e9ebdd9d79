"""Adam with coupled L2 weight decay and the warmup + poly learning-rate schedule."""
from dataclasses import dataclass, field

import torch

from ..errors import ContractViolation, InputError


def lr_schedule(epoch, config):
    """Linear warmup from ``lr / warmup`` over the first epochs, then ``lr * (1 - epoch / epochs) ** power``."""
    if not 0 <= epoch < config.epochs:
        raise InputError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.initial_lr * (epoch + 1) / config.warmup_epochs
    return config.initial_lr * (1.0 - epoch / config.epochs) ** config.poly_power


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8):
    """One bias-corrected Adam update, in place. Missing grads (``None``) count as zero."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ContractViolation(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ContractViolation(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            if weight_decay:
                g = g + weight_decay * p
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state
