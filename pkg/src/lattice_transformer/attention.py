"""Multi-head attention variants: baseline (optionally relative), controllable
lattice self-attention, and score-aware encoder-decoder attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import (
    DTYPE,
    NEG_INF,
    ShapeError,
    contract_qe,
    masked_softmax,
    merge_heads,
    split_heads,
)

BRANCHES = ("m", "f", "b")


@dataclass(frozen=True)
class BranchMasks:
    succ_mask: torch.Tensor
    pred_mask: torch.Tensor


def build_branch_masks(n: int) -> BranchMasks:
    """Triangular additive masks; the diagonal is open in both."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = torch.arange(n)
    succ = torch.where(idx[None, :] >= idx[:, None], 0.0, NEG_INF).to(DTYPE)
    pred = torch.where(idx[None, :] <= idx[:, None], 0.0, NEG_INF).to(DTYPE)
    return BranchMasks(succ, pred)


def causal_mask(m: int) -> torch.Tensor:
    """0 on and below the diagonal, NEG_INF above."""
    return build_branch_masks(m).pred_mask


def _uniform(shape, bound, generator=None):
    return (torch.rand(shape, dtype=DTYPE, generator=generator) * 2 - 1) * bound


class Projections(nn.Module):
    """Q/K/V/O projection matrices for one attention block."""

    def __init__(self, d_model: int, heads: int, generator=None):
        super().__init__()
        if d_model % heads:
            raise ShapeError(f"heads {heads} must divide d_model {d_model}")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        bound = math.sqrt(6.0 / (2 * d_model))
        self.wq = nn.Parameter(_uniform((d_model, d_model), bound, generator))
        self.wk = nn.Parameter(_uniform((d_model, d_model), bound, generator))
        self.wv = nn.Parameter(_uniform((d_model, d_model), bound, generator))
        self.wo = nn.Parameter(_uniform((d_model, d_model), bound, generator))

    def qkv(self, x_q, x_kv):
        if x_q.shape[-1] != self.d_model or x_kv.shape[-1] != self.d_model:
            raise ShapeError(f"inputs must have width {self.d_model}")
        q = split_heads(x_q @ self.wq, self.heads)
        k = split_heads(x_kv @ self.wk, self.heads)
        v = split_heads(x_kv @ self.wv, self.heads)
        return q, k, v

    def output(self, weights, v):
        return merge_heads(weights @ v) @ self.wo


def _relative_logits(proj: Projections, q, k, table, rel_index):
    logits = q @ k.transpose(-1, -2)
    if table is not None:
        emb = table[rel_index]  # (..., n, n, head_dim), shared across heads
        logits = logits + contract_qe(q, emb.unsqueeze(-4))
    return logits / math.sqrt(proj.head_dim)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention, with an optional relative-position table."""

    def __init__(self, d_model: int, heads: int, clip: int | None = None, generator=None):
        super().__init__()
        self.proj = Projections(d_model, heads, generator)
        self.clip = clip
        if clip is not None:
            k = self.proj.head_dim
            self.rel_table = nn.Parameter(_uniform((2 * clip + 1, k), math.sqrt(6.0 / (2 * clip + 1 + k)), generator))
        else:
            self.register_parameter("rel_table", None)

    def forward(self, x_q, x_kv=None, causal: bool = False, padding_mask=None, rel_index=None, trace=None):
        x_kv = x_q if x_kv is None else x_kv
        q, k, v = self.proj.qkv(x_q, x_kv)
        if self.rel_table is not None and rel_index is None:
            raise ValueError("relative attention needs rel_index")
        logits = _relative_logits(self.proj, q, k, self.rel_table, rel_index)
        if causal:
            logits = logits + causal_mask(q.shape[-2]).to(logits)
        if padding_mask is not None:
            logits = logits + _heads_axis(padding_mask)
        weights = masked_softmax(logits)
        if trace is not None:
            trace["weights"] = weights.detach()
        return self.proj.output(weights, v)


def dot_attention(x_q, x_kv, attn: MultiHeadAttention, causal=False, padding_mask=None, rel_index=None):
    return attn(x_q, x_kv, causal=causal, padding_mask=padding_mask, rel_index=rel_index)


def _heads_axis(mask):
    # (B, n, n) or (B, 1, n) -> broadcast over heads
    return mask.unsqueeze(-3) if mask.dim() >= 3 else mask


def _row_broadcast(v):
    # (B, n) -> (B, 1, 1, n): value of key j on every row i and head
    return v[..., None, None, :]


class LatticeSelfAttention(nn.Module):
    """Controllable lattice attention with marginal/forward/backward branches."""

    def __init__(self, d_model: int, heads: int, clip: int, generator=None):
        super().__init__()
        self.proj = Projections(d_model, heads, generator)
        self.clip = clip
        k = self.proj.head_dim
        self.lattice_table = nn.Parameter(_uniform((2 * clip + 1, k), math.sqrt(6.0 / (2 * clip + 1 + k)), generator))
        self.w_m = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.w_f = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.w_b = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.branch_logits = nn.Parameter(torch.zeros(3, dtype=DTYPE))

    def mixture(self) -> torch.Tensor:
        return torch.softmax(self.branch_logits, dim=0)

    def forward(self, x, rel_index, lat_mask, scores=None, succ_mask=None, pred_mask=None,
                use_marginal: bool = True, use_fb: bool = False, trace=None):
        """``scores`` is a (forward, marginal, backward) triple of (B, n) tensors or None.

        Without scores the layer runs the single marginal branch with no score
        term, i.e. w_m = 0 and (s_m, s_f, s_b) = (1, 0, 0).
        """
        n = x.shape[-2]
        if rel_index.shape[-2:] != (n, n) or lat_mask.shape[-2:] != (n, n):
            raise ShapeError(f"lattice matrices do not match {n} nodes")
        if scores is not None and any(s.shape[-1] != n for s in scores):
            raise ShapeError(f"score vectors do not match {n} nodes")
        q, k, v = self.proj.qkv(x, x)
        base = _relative_logits(self.proj, q, k, self.lattice_table, rel_index)
        common = _heads_axis(lat_mask)

        if scores is not None and use_marginal:
            a_m = masked_softmax(base + self.w_m * _row_broadcast(scores[1]), common)
        else:
            a_m = masked_softmax(base, common)

        if scores is None or not use_fb:
            final = a_m
            if trace is not None:
                trace.update(A_m=a_m.detach(), A_f=None, A_b=None, A_final=final.detach(), s=(1.0, 0.0, 0.0))
        else:
            if succ_mask is None or pred_mask is None:
                masks = build_branch_masks(n)
                succ_mask = masks.succ_mask if succ_mask is None else succ_mask
                pred_mask = masks.pred_mask if pred_mask is None else pred_mask
            a_f = masked_softmax(base + self.w_f * _row_broadcast(scores[0]), _heads_axis(succ_mask) + common)
            a_b = masked_softmax(base + self.w_b * _row_broadcast(scores[2]), _heads_axis(pred_mask) + common)
            s = self.mixture()
            final = s[0] * a_m + s[1] * a_f + s[2] * a_b
            if trace is not None:
                trace.update(A_m=a_m.detach(), A_f=a_f.detach(), A_b=a_b.detach(), A_final=final.detach(),
                             s=tuple(float(x) for x in s.detach()))
        return self.proj.output(final, v)


def lattice_self_attention(x, attn: LatticeSelfAttention, rel_index, lat_mask, scores=None,
                           masks: BranchMasks | None = None, **kw):
    succ = masks.succ_mask if masks is not None else None
    pred = masks.pred_mask if masks is not None else None
    return attn(x, rel_index, lat_mask, scores, succ, pred, **kw)


class CrossAttention(nn.Module):
    """Decoder queries over lattice encoder states, plus a marginal-score term."""

    def __init__(self, d_model: int, heads: int, generator=None):
        super().__init__()
        self.proj = Projections(d_model, heads, generator)
        self.w_m = nn.Parameter(torch.zeros((), dtype=DTYPE))

    def forward(self, y, x_enc, marginal=None, padding_mask=None, trace=None):
        q, k, v = self.proj.qkv(y, x_enc)
        if marginal is not None and marginal.shape[-1] != x_enc.shape[-2]:
            raise ShapeError(f"marginal has {marginal.shape[-1]} entries for {x_enc.shape[-2]} encoder states")
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(self.proj.head_dim)
        if marginal is not None:
            logits = logits + self.w_m * _row_broadcast(marginal)
        if padding_mask is not None:
            logits = logits + _heads_axis(padding_mask)
        weights = masked_softmax(logits)
        if trace is not None:
            trace["weights"] = weights.detach()
        return self.proj.output(weights, v)


def cross_attention(y, x_enc, attn: CrossAttention, marginal=None, padding_mask=None):
    return attn(y, x_enc, marginal, padding_mask)
