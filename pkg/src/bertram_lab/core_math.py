"""Tensor kernels, parameter freezing, Adam with warmup/decay, and gradient checking.

Tensors are ``torch.Tensor`` objects; reverse-mode differentiation is torch
autograd. This module adds the pieces the rest of the package relies on:
named parameters with a first-class ``frozen`` flag, an Adam optimizer that
never touches frozen parameters, and a finite-difference checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

Tensor = torch.Tensor

DTYPE = torch.float32


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-d operands are treated as row/column vectors like numpy."""
    ka = a.shape[-1]
    kb = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if ka != kb:
        raise DimensionError(
            f"matmul: inner dimensions differ, {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    return a @ b


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    if x.numel() == 0 or x.shape[dim] == 0:
        raise DomainError("softmax of an empty tensor")
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    ex = torch.exp(shifted)
    return ex / ex.sum(dim=dim, keepdim=True)


def sigmoid(x):
    """Logistic function for python floats or tensors."""
    if isinstance(x, Tensor):
        return torch.sigmoid(x)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass
class Parameter:
    """A named leaf tensor. Freezing is expressed through ``requires_grad``."""

    name: str
    tensor: Tensor

    @property
    def frozen(self) -> bool:
        return not self.tensor.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.tensor.requires_grad_(not value)
        if value:
            self.tensor.grad = None

    @property
    def grad(self) -> Tensor:
        g = self.tensor.grad
        return torch.zeros_like(self.tensor) if g is None else g


def parameters_of(module: torch.nn.Module, prefix: str = "") -> list[Parameter]:
    return [Parameter(prefix + n, p) for n, p in module.named_parameters()]


def set_frozen(params: Iterable, frozen: bool) -> None:
    for p in params:
        t = p.tensor if isinstance(p, Parameter) else p
        t.requires_grad_(not frozen)
        if frozen:
            t.grad = None


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.backward()


def linear_schedule(step: int, total_steps: int | None, warmup_fraction: float) -> float:
    """Multiplier on the base learning rate: linear warmup, then linear decay to 0."""
    if not total_steps:
        return 1.0
    warmup = int(total_steps * warmup_fraction)
    if warmup > 0 and step <= warmup:
        return step / warmup
    remaining = total_steps - warmup
    if remaining <= 0:
        return 1.0
    return max(0.0, (total_steps - step) / remaining)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.0
    total_steps: int | None = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr * linear_schedule(self.step, self.total_steps, self.warmup_fraction)


def _as_tensor(p) -> Tensor:
    return p.tensor if isinstance(p, Parameter) else p


def adam_step(state: AdamState, params: Sequence) -> None:
    """One bias-corrected Adam update on every unfrozen parameter, then clear grads."""
    state.step += 1
    lr = state.current_lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p in params:
            t = _as_tensor(p)
            if not t.requires_grad:
                t.grad = None
                continue
            g = t.grad
            if g is None:
                continue
            key = id(t)
            if key not in state.m:
                state.m[key] = torch.zeros_like(t)
                state.v[key] = torch.zeros_like(t)
            m, v = state.m[key], state.v[key]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            t.addcdiv_(m / c1, denom, value=-lr)
            t.grad = None


class Adam:
    """Convenience wrapper binding an :class:`AdamState` to a parameter list."""

    def __init__(self, params: Sequence, lr: float = 1e-3, warmup_fraction: float = 0.0,
                 total_steps: int | None = None, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               warmup_fraction=warmup_fraction, total_steps=total_steps)

    def step(self) -> None:
        adam_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            _as_tensor(p).grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence,
    h: float = 1e-3,
    n_samples: int = 20,
    seed: int = 0,
) -> float:
    """Largest relative error between autograd and central differences.

    ``f`` is re-evaluated with perturbed parameter data, so it must be
    deterministic. Up to ``n_samples`` coordinates are sampled per tensor.
    Run this in float64; float32 cancellation swamps h=1e-3 differences.
    """
    tensors = [_as_tensor(p) for p in params]
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for t in tensors]
    for t in tensors:
        t.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.view(-1)
            n = flat.numel()
            idx = rng.choice(n, size=min(n, n_samples), replace=False)
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + h
                fp = f().item()
                flat[j] = orig - h
                fm = f().item()
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                an = a.view(-1)[j].item()
                err = abs(an - num) / max(1e-8, abs(an) + abs(num))
                worst = max(worst, err)
    return worst
