"""Tensor primitives used by the model, on top of float64 torch tensors.

Reverse-mode differentiation comes from torch autograd; ``grad_check`` is an
independent central-difference checker for it.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64
NEG_INF = -1e9
FULLY_MASKED = -1e8
LN_EPS = 1e-6


class ShapeError(ValueError):
    pass


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE, requires_grad=requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {tuple(a.shape)} + {tuple(b.shape)}")
    return a + b


def scale(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def concat_last_axis(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    lead = {tuple(p.shape[:-1]) for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat shape mismatch: {[tuple(p.shape) for p in parts]}")
    return torch.cat(list(parts), dim=-1)


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """(..., n, d) -> (..., heads, n, d/heads)."""
    *lead, n, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    """(..., heads, n, k) -> (..., n, heads*k)."""
    *lead, h, n, k = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * k)


def masked_softmax(logits: torch.Tensor, additive_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise softmax of logits + mask; a row with no surviving entry is an error."""
    z = logits if additive_mask is None else logits + additive_mask
    if z.numel() and bool((z.amax(dim=-1) <= FULLY_MASKED).any()):
        raise ValueError("fully masked row in attention logits")
    return torch.softmax(z, dim=-1)


def contract_qe(q: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """out[..., i, j] = sum_k q[..., i, k] * e[..., i, j, k]."""
    if q.shape[-1] != e.shape[-1] or q.shape[-2] != e.shape[-3]:
        raise ShapeError(f"contract_qe shape mismatch: {tuple(q.shape)} vs {tuple(e.shape)}")
    return (q.unsqueeze(-2) @ e.transpose(-1, -2)).squeeze(-2)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm width mismatch: x {tuple(x.shape)}, gain {tuple(gain.shape)}")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def residual_postnorm(sub_out: torch.Tensor, x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return layer_norm(x + sub_out, gain, bias)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from any recorded computation")
    loss.backward()


def grad_check(fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor] | Sequence[torch.Tensor],
               eps: float = 1e-4, samples: int = 200, seed: int = 0,
               per_tensor: bool = False):
    """Compare autograd gradients against central differences.

    ``fn`` recomputes the scalar loss from the current parameter values;
    parameters are perturbed in place and restored. Up to ``samples`` random
    coordinates are checked per tensor. Returns the max relative error, with
    denominator max(|analytic|, |numeric|, 1e-8), or a name->error dict when
    ``per_tensor`` is set.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    plist = list(params.values())
    loss = fn()
    if not torch.isfinite(loss).all():
        raise ValueError("non-finite loss")
    grads = torch.autograd.grad(loss, plist, allow_unused=True)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            count = flat.numel()
            idx = np.arange(count) if count <= samples else rng.choice(count, samples, replace=False)
            worst = 0.0
            for k in idx:
                k = int(k)
                orig = flat[k].item()
                flat[k] = orig + eps
                up = fn().item()
                flat[k] = orig - eps
                down = fn().item()
                flat[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise ValueError("non-finite loss during perturbation")
                numeric = (up - down) / (2 * eps)
                analytic = gflat[k].item()
                denom = max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic - numeric) / denom)
            errors[name] = worst
    if per_tensor:
        return errors
    return max(errors.values()) if errors else 0.0
