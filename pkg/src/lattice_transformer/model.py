"""Lattice transformer encoder-decoder, loss and search."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .attention import CrossAttention, LatticeSelfAttention, MultiHeadAttention, build_branch_masks
from .config import ModelConfig
from .features import EncoderInput
from .numerics import DTYPE, NEG_INF, residual_postnorm
from .position import sequence_matrix
from .vocab import BOS_ID, EOS_ID, PAD, UNK

# never produced by search
BLOCKED_OUTPUTS = (PAD, UNK, BOS_ID)


def _uniform(shape, bound, generator):
    return (torch.rand(shape, dtype=DTYPE, generator=generator) * 2 - 1) * bound


class LayerNorm(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))


class FeedForward(nn.Module):
    def __init__(self, d, width, generator):
        super().__init__()
        self.w1 = nn.Parameter(_uniform((d, width), math.sqrt(6.0 / (d + width)), generator))
        self.b1 = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.w2 = nn.Parameter(_uniform((width, d), math.sqrt(6.0 / (d + width)), generator))
        self.b2 = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x, dropout=0.0, training=False):
        h = F.dropout(torch.relu(x @ self.w1 + self.b1), dropout, training)
        return h @ self.w2 + self.b2


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig, generator):
        super().__init__()
        self.self_attn = LatticeSelfAttention(config.d_model, config.heads, config.clip_c, generator)
        self.ffn = FeedForward(config.d_model, config.ffn_width, generator)
        self.norm1 = LayerNorm(config.d_model)
        self.norm2 = LayerNorm(config.d_model)


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig, generator):
        super().__init__()
        self.self_attn = MultiHeadAttention(config.d_model, config.heads, config.clip_c, generator)
        self.cross_attn = CrossAttention(config.d_model, config.heads, generator)
        self.ffn = FeedForward(config.d_model, config.ffn_width, generator)
        self.norm1 = LayerNorm(config.d_model)
        self.norm2 = LayerNorm(config.d_model)
        self.norm3 = LayerNorm(config.d_model)


def _sublayer(norm: LayerNorm, x, out, p, training):
    return residual_postnorm(F.dropout(out, p, training), x, norm.gain, norm.bias)


class LatticeTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.src_vocab_size < 5 or config.tgt_vocab_size < 5:
            raise ValueError("vocabulary sizes must be set (>= 5) before building a model")
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d = config.d_model
        self.src_embed = nn.Parameter(torch.randn((config.src_vocab_size, d), dtype=DTYPE, generator=gen) * d ** -0.5)
        # also the output projection
        self.tgt_embed = nn.Parameter(torch.randn((config.tgt_vocab_size, d), dtype=DTYPE, generator=gen) * d ** -0.5)
        self.encoder = nn.ModuleList(EncoderLayer(config, gen) for _ in range(config.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(config, gen) for _ in range(config.dec_layers))

    # -- score switches ---------------------------------------------------

    def scores_active(self, src: EncoderInput) -> bool:
        return self.config.score_mode == "full" and src.use_scores

    def frozen_parameter_names(self, scores: bool) -> set[str]:
        """Score parameters that take no part in the computation (and so never train)."""
        cfg = self.config
        frozen = set()
        for l in range(cfg.enc_layers):
            pre = f"encoder.{l}.self_attn."
            if not scores or not cfg.use_marginal_encoder:
                frozen.add(pre + "w_m")
            if not scores or l not in cfg.fb_layers:
                frozen.update({pre + "w_f", pre + "w_b", pre + "branch_logits"})
        for l in range(cfg.dec_layers):
            if not scores or not cfg.use_marginal_decoder:
                frozen.add(f"decoder.{l}.cross_attn.w_m")
        return frozen

    def effective_scalars(self, scores: bool) -> list[dict]:
        """Per encoder layer (w_m, s_m, s_f, s_b) as actually applied."""
        out = []
        for l, layer in enumerate(self.encoder):
            att = layer.self_attn
            w_m = att.w_m.item() if scores and self.config.use_marginal_encoder else 0.0
            if scores and l in self.config.fb_layers:
                s = [float(x) for x in att.mixture().detach()]
            else:
                s = [1.0, 0.0, 0.0]
            out.append({"layer": l, "w_m": w_m, "s_m": s[0], "s_f": s[1], "s_b": s[2]})
        return out

    # -- encoder ----------------------------------------------------------

    def _branch_masks(self, src: EncoderInput):
        n = src.tokens.shape[-1]
        masks = build_branch_masks(n)
        succ, pred = masks.succ_mask, masks.pred_mask
        if self.config.fb_support == "direct":
            # unclipped L[j][i] == 1 exactly when j is a child of i
            one = self.config.clip_c + 1
            eye = torch.eye(n, dtype=torch.bool)
            child = (src.rel_index.transpose(-1, -2) == one) | eye
            parent = (src.rel_index == one) | eye
            succ = succ + torch.where(child, 0.0, NEG_INF).to(DTYPE)
            pred = pred + torch.where(parent, 0.0, NEG_INF).to(DTYPE)
        return succ, pred

    def encode(self, src: EncoderInput, trace: list | None = None) -> torch.Tensor:
        cfg = self.config
        if int(src.rel_index.max()) > 2 * cfg.clip_c or int(src.rel_index.min()) < 0:
            raise ValueError(f"relative indices outside [0, {2 * cfg.clip_c}]; input built with a different clip")
        p, training = cfg.dropout_rate, self.training
        scores = src.scores if self.scores_active(src) else None
        x = F.dropout(self.src_embed[src.tokens] * math.sqrt(cfg.d_model), p, training)
        succ = pred = None
        if scores is not None and cfg.fb_layers:
            succ, pred = self._branch_masks(src)
        for l, layer in enumerate(self.encoder):
            rec = {} if trace is not None else None
            att = layer.self_attn(x, src.rel_index, src.lat_mask, scores, succ, pred,
                                  use_marginal=cfg.use_marginal_encoder, use_fb=l in cfg.fb_layers, trace=rec)
            x = _sublayer(layer.norm1, x, att, p, training)
            x = _sublayer(layer.norm2, x, layer.ffn(x, p, training), p, training)
            if trace is not None:
                trace.append(rec)
        return x

    # -- decoder ----------------------------------------------------------

    def decode(self, tgt_in: torch.Tensor, memory: torch.Tensor, src: EncoderInput,
               trace: list | None = None) -> torch.Tensor:
        """Hidden states for every target prefix position, (B, T, d)."""
        cfg = self.config
        t = tgt_in.shape[-1]
        if t > cfg.max_len:
            raise ValueError(f"prefix length {t} exceeds max_len {cfg.max_len}")
        p, training = cfg.dropout_rate, self.training
        marginal = src.marginal if self.scores_active(src) and cfg.use_marginal_decoder else None
        rel = torch.from_numpy(sequence_matrix(t, cfg.clip_c).regular + cfg.clip_c)
        y = F.dropout(self.tgt_embed[tgt_in] * math.sqrt(cfg.d_model), p, training)
        key_pad = src.key_padding
        for layer in self.decoder:
            rec_self = {} if trace is not None else None
            rec_cross = {} if trace is not None else None
            att = layer.self_attn(y, causal=True, rel_index=rel, trace=rec_self)
            y = _sublayer(layer.norm1, y, att, p, training)
            att = layer.cross_attn(y, memory, marginal, key_pad, trace=rec_cross)
            y = _sublayer(layer.norm2, y, att, p, training)
            y = _sublayer(layer.norm3, y, layer.ffn(y, p, training), p, training)
            if trace is not None:
                trace.append({"self": rec_self, "cross": rec_cross})
        return y

    def log_probs(self, hidden: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(hidden @ self.tgt_embed.transpose(0, 1), dim=-1)

    def forward(self, src: EncoderInput, tgt_in: torch.Tensor) -> torch.Tensor:
        memory = self.encode(src)
        return self.log_probs(self.decode(tgt_in, memory, src))

    def decode_step(self, prefix: torch.Tensor, memory: torch.Tensor, src: EncoderInput) -> torch.Tensor:
        """Next-token log-probabilities for each prefix row, (B, V)."""
        if prefix.dim() == 1:
            prefix = prefix.unsqueeze(0)
        if bool((prefix[:, 0] != BOS_ID).any()):
            raise ValueError("prefix must start with <s>")
        return self.log_probs(self.decode(prefix, memory, src)[:, -1])


# ---------------------------------------------------------------------------
# baseline encoder: sequence-only relative-position transformer

class RelativeEncoder(nn.Module):
    """Standard relative-position encoder over plain token sequences."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.embed = nn.Parameter(torch.randn((config.src_vocab_size, config.d_model), dtype=DTYPE, generator=gen))
        self.attn = nn.ModuleList(MultiHeadAttention(config.d_model, config.heads, config.clip_c, gen)
                                  for _ in range(config.enc_layers))
        self.ffn = nn.ModuleList(FeedForward(config.d_model, config.ffn_width, gen) for _ in range(config.enc_layers))
        self.norm1 = nn.ModuleList(LayerNorm(config.d_model) for _ in range(config.enc_layers))
        self.norm2 = nn.ModuleList(LayerNorm(config.d_model) for _ in range(config.enc_layers))

    @classmethod
    def from_lattice_model(cls, model: LatticeTransformer) -> RelativeEncoder:
        enc = cls(model.config)
        with torch.no_grad():
            enc.embed.copy_(model.src_embed)
            for l, layer in enumerate(model.encoder):
                a, src_att = enc.attn[l], layer.self_attn
                for name in ("wq", "wk", "wv", "wo"):
                    getattr(a.proj, name).copy_(getattr(src_att.proj, name))
                a.rel_table.copy_(src_att.lattice_table)
                enc.ffn[l].load_state_dict(layer.ffn.state_dict())
                enc.norm1[l].load_state_dict(layer.norm1.state_dict())
                enc.norm2[l].load_state_dict(layer.norm2.state_dict())
        return enc

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        n = tokens.shape[-1]
        rel = torch.from_numpy(sequence_matrix(n, cfg.clip_c).regular + cfg.clip_c)
        x = self.embed[tokens] * math.sqrt(cfg.d_model)
        for l in range(cfg.enc_layers):
            x = residual_postnorm(self.attn[l](x, rel_index=rel), x, self.norm1[l].gain, self.norm1[l].bias)
            x = residual_postnorm(self.ffn[l](x), x, self.norm2[l].gain, self.norm2[l].bias)
        return x


# ---------------------------------------------------------------------------
# loss

def sequence_loss(log_probs: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    """Label-smoothed cross-entropy averaged over non-pad target tokens."""
    keep = targets != PAD
    count = int(keep.sum())
    if count == 0:
        raise ValueError("empty batch: no target tokens")
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if smoothing > 0.0:
        uniform = -log_probs.mean(dim=-1)
        per_token = (1.0 - smoothing) * nll + smoothing * uniform
    else:
        per_token = nll
    return (per_token * keep).sum() / count


def target_tensors(targets: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Decoder inputs (<s> + y) and outputs (y + </s>), right-padded."""
    t = max(len(y) for y in targets) + 1
    tin = torch.full((len(targets), t), PAD, dtype=torch.long)
    tout = torch.full((len(targets), t), PAD, dtype=torch.long)
    for r, y in enumerate(targets):
        tin[r, : len(y) + 1] = torch.tensor([BOS_ID, *y], dtype=torch.long)
        tout[r, : len(y) + 1] = torch.tensor([*y, EOS_ID], dtype=torch.long)
    return tin, tout


def batch_loss(model: LatticeTransformer, src: EncoderInput, targets: list[list[int]],
               smoothing: float | None = None) -> torch.Tensor:
    if len(targets) == 0:
        raise ValueError("empty batch")
    tin, tout = target_tensors(targets)
    smoothing = model.config.label_smoothing if smoothing is None else smoothing
    return sequence_loss(model(src, tin), tout, smoothing)


# ---------------------------------------------------------------------------
# search

def _block(logp: torch.Tensor) -> torch.Tensor:
    logp = logp.clone()
    logp[..., list(BLOCKED_OUTPUTS)] = -math.inf
    return logp


@torch.no_grad()
def greedy_decode(model: LatticeTransformer, src: EncoderInput, max_steps: int | None = None) -> list[list[int]]:
    """Batched argmax rollout; returns generated ids without <s>/</s>."""
    max_steps = model.config.max_len if max_steps is None else max_steps
    memory = model.encode(src)
    b = len(src)
    prefix = torch.full((b, 1), BOS_ID, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    for _ in range(max_steps):
        nxt = _block(model.decode_step(prefix, memory, src)).argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
        done |= nxt == EOS_ID
        if bool(done.all()):
            break
    out = []
    for row in prefix[:, 1:].tolist():
        seq = []
        for tok in row:
            if tok in (EOS_ID, PAD):
                break
            seq.append(tok)
        out.append(seq)
    return out


@torch.no_grad()
def beam_search(model: LatticeTransformer, src: EncoderInput, beam_size: int | None = None,
                max_steps: int | None = None, nbest: int = 1):
    """Length-normalised beam search for a single input.

    Hypotheses are ranked by total log-probability divided by the number of
    generated tokens (``</s>`` included). A hypothesis finishes on ``</s>`` or
    when it reaches ``max_steps`` tokens. Search stops once no alive
    hypothesis can still overtake the best finished one. Returns (ids, score), or a list of
    such pairs when ``nbest > 1``.
    """
    if len(src) != 1:
        raise ValueError("beam_search decodes one input at a time")
    beam_size = model.config.beam_size if beam_size is None else beam_size
    max_steps = model.config.max_len if max_steps is None else max_steps
    def normalised(item):
        hyp, score = item
        return score / (len(hyp) - 1)

    memory = model.encode(src)
    alive: list[tuple[list[int], float]] = [([BOS_ID], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(1, max_steps + 1):
        prefix = torch.tensor([h for h, _ in alive], dtype=torch.long)
        rows = [0] * len(alive)
        mem = memory[rows]
        logp = _block(model.decode_step(prefix, mem, src.select(rows)))
        total = torch.tensor([s for _, s in alive], dtype=DTYPE).unsqueeze(1) + logp
        flat = total.reshape(-1)
        k = min(beam_size, int(torch.isfinite(flat).sum()))
        top = torch.topk(flat, k, sorted=True)
        vocab = logp.shape[-1]
        nxt_alive = []
        for score, idx in zip(top.values.tolist(), top.indices.tolist()):
            h, tok = alive[idx // vocab][0], idx % vocab
            hyp = h + [tok]
            if tok == EOS_ID or step == max_steps:
                finished.append((hyp, score))
            else:
                nxt_alive.append((hyp, score))
        alive = nxt_alive
        if not alive:
            break
        # log-probs are <= 0, so an alive total S normalises to at most S / max_steps
        best_done = max((normalised(f) for f in finished), default=-math.inf)
        if best_done >= max(sc for _, sc in alive) / max_steps:
            break

    ranked = sorted(finished, key=normalised, reverse=True)
    results = []
    for hyp, score in ranked[:max(nbest, 1)]:
        ids = hyp[1:]
        if ids and ids[-1] == EOS_ID:
            ids = ids[:-1]
        results.append((ids, score / (len(hyp) - 1)))
    return results[0] if nbest <= 1 else results
