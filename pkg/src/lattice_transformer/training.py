"""Optimisers, batching and the R / R+1 / R+L / R+L+S training presets."""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .features import LatticeFeatures, collate_sources, lattice_features
from .lattice import Lattice, from_sequence
from .metrics import corpus_bleu, token_accuracy
from .model import LatticeTransformer, batch_loss, greedy_decode
from .numerics import backward
from .vocab import Vocab

logger = logging.getLogger(__name__)

INPUT_KINDS = ("sequence", "1best", "lattice", "lattice+scores")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainPreset:
    name: str
    input_kind: str
    init: str  # "fresh" or "R"
    optimizer: str  # "adam" (noam schedule) or "sgd"

    @property
    def uses_scores(self) -> bool:
        return self.input_kind == "lattice+scores"


PRESETS = {
    "R": TrainPreset("R", "sequence", "fresh", "adam"),
    "R+1": TrainPreset("R+1", "1best", "R", "sgd"),
    "R+L": TrainPreset("R+L", "lattice", "R", "sgd"),
    "R+L+S": TrainPreset("R+L+S", "lattice+scores", "R", "sgd"),
}


@dataclass
class TrainConfig:
    steps: int = 2000
    max_tokens: int = 512
    warmup: int = 400
    lr_factor: float = 1.0
    sgd_lr: float = 0.15
    clip_norm: float = 5.0
    eval_every: int = 250
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    eval_max_steps: int | None = None
    # stop early once dev token accuracy reaches this value
    stop_accuracy: float | None = None


# ---------------------------------------------------------------------------
# schedules and optimisers

def noam_lr(step: int, d_model: int, warmup: int) -> float:
    if step < 1 or warmup < 1:
        raise ValueError("step and warmup must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def _check_finite(grads):
    for g in grads:
        if g is not None and not bool(torch.isfinite(g).all()):
            raise TrainingError("non-finite gradient; step aborted")


@torch.no_grad()
def sgd_finetune_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], lr: float = 0.15) -> None:
    """In-place theta <- theta - lr * g. Checks every gradient before touching any parameter."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    _check_finite(grads)
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.sub_(lr * g)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9) -> AdamState:
    """Bias-corrected Adam update, in place."""
    _check_finite(grads)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


def clip_grad_norm(grads: Sequence[torch.Tensor | None], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# data

@dataclass(frozen=True)
class Example:
    features: LatticeFeatures
    target: tuple[int, ...]
    index: int


@dataclass
class Batch:
    src: object  # EncoderInput
    targets: list[list[int]]
    indices: list[int]

    @property
    def padded_source_tokens(self) -> int:
        return int(self.src.tokens.numel())


def make_batches(corpus: Sequence[Example], max_tokens: int, seed: int, clip: int,
                 use_scores: bool = True) -> list[Batch]:
    """Length-bucketed batches of at most ``max_tokens`` padded source positions, in seeded order."""
    rng = np.random.default_rng(seed)
    keep = []
    for ex in corpus:
        if ex.features.n > max_tokens:
            logger.warning("skipping example %d: %d nodes exceed max_tokens=%d", ex.index, ex.features.n, max_tokens)
            continue
        keep.append(ex)
    jitter = rng.random(len(keep))
    order = sorted(range(len(keep)), key=lambda i: (keep[i].features.n, len(keep[i].target), jitter[i]))
    groups: list[list[Example]] = []
    cur: list[Example] = []
    width = 0
    for i in order:
        ex = keep[i]
        w = max(width, ex.features.n)
        if cur and w * (len(cur) + 1) > max_tokens:
            groups.append(cur)
            cur, w = [], ex.features.n
        cur.append(ex)
        width = w
    if cur:
        groups.append(cur)
    perm = rng.permutation(len(groups))
    return [
        Batch(collate_sources([e.features for e in groups[g]], clip, use_scores),
              [list(e.target) for e in groups[g]], [e.index for e in groups[g]])
        for g in perm
    ]


@dataclass
class SplitData:
    sources: list[list[str]]
    targets: list[list[str]]
    lattices: list[Lattice] | None = None
    onebest: list[list[str]] | None = None

    def inputs(self, kind: str) -> list[Lattice]:
        if kind == "sequence":
            return [from_sequence(s) for s in self.sources]
        if kind == "1best":
            if self.onebest is None:
                raise TrainingError("1-best inputs not available")
            return [from_sequence(s) for s in self.onebest]
        if kind in ("lattice", "lattice+scores"):
            if self.lattices is None:
                raise TrainingError("lattice inputs not available")
            return list(self.lattices)
        raise ValueError(f"unknown input kind {kind!r}")


def build_examples(split: SplitData, kind: str, src_vocab: Vocab, tgt_vocab: Vocab,
                   config: ModelConfig) -> list[Example]:
    out = []
    for i, (lat, tgt) in enumerate(zip(split.inputs(kind), split.targets)):
        feats = lattice_features(lat, src_vocab, config.clip_c, config.lattice_reduce, scores=kind != "lattice")
        out.append(Example(feats, tuple(tgt_vocab.encode(tgt)), i))
    return out


# ---------------------------------------------------------------------------
# evaluation

@torch.no_grad()
def evaluate(model: LatticeTransformer, examples: Sequence[Example], use_scores: bool, tgt_vocab: Vocab,
             max_tokens: int = 512, max_steps: int | None = None) -> dict:
    """Greedy-decode dev BLEU, token accuracy and (unsmoothed) loss."""
    was_training = model.training
    model.eval()
    batches = make_batches(examples, max_tokens, seed=0, clip=model.config.clip_c, use_scores=use_scores)
    hyps: dict[int, list[str]] = {}
    refs: dict[int, list[str]] = {}
    loss_sum, count = 0.0, 0
    for batch in batches:
        n_tok = sum(len(t) + 1 for t in batch.targets)
        loss_sum += float(batch_loss(model, batch.src, batch.targets, smoothing=0.0)) * n_tok
        count += n_tok
        for idx, ids, tgt in zip(batch.indices, greedy_decode(model, batch.src, max_steps), batch.targets):
            hyps[idx] = tgt_vocab.decode(ids)
            refs[idx] = tgt_vocab.decode(tgt)
    model.train(was_training)
    keys = sorted(hyps)
    h = [hyps[k] for k in keys]
    r = [refs[k] for k in keys]
    return {"bleu": corpus_bleu(h, r), "token_accuracy": token_accuracy(h, r), "dev_loss": loss_sum / max(count, 1)}


# ---------------------------------------------------------------------------
# presets

def trainable_parameters(model: LatticeTransformer, preset: TrainPreset) -> dict[str, torch.nn.Parameter]:
    frozen = model.frozen_parameter_names(scores=preset.uses_scores and model.config.score_mode == "full")
    return {name: p for name, p in model.named_parameters() if name not in frozen}


def preset_config(preset: TrainPreset, config: ModelConfig) -> ModelConfig:
    if preset.uses_scores and config.score_mode == "none":
        raise TrainingError(f"preset {preset.name} needs scores but config has score_mode=none")
    if preset.name == "R+L":
        return config.replace(score_mode="none")
    return config


@dataclass
class RunResult:
    model: LatticeTransformer
    metrics: list[dict]
    best: dict
    checkpoint: Path | None
    src_vocab: Vocab
    tgt_vocab: Vocab


def run_preset(preset: TrainPreset | str, corpora: dict[str, SplitData], config: ModelConfig,
               train: TrainConfig | None = None, init_checkpoint=None, out_dir=None,
               on_step=None) -> RunResult:
    """Train one preset and keep the best-on-dev parameters (BLEU, ties by dev loss).

    ``on_step(step, model, loss)`` is called after every optimiser update.
    """
    preset = PRESETS[preset] if isinstance(preset, str) else preset
    train = train or TrainConfig()
    config = preset_config(preset, config)
    torch.manual_seed(train.seed)

    if preset.init == "fresh":
        src_vocab = Vocab.build(corpora["train"].sources)
        tgt_vocab = Vocab.build(corpora["train"].targets)
        config = config.replace(src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab))
        model = LatticeTransformer(config)
    else:
        if init_checkpoint is None:
            raise TrainingError(f"preset {preset.name} fine-tunes from an R checkpoint; none given")
        base, src_vocab, tgt_vocab = load_checkpoint(init_checkpoint)
        config = preset_config(preset, config.replace(src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab)))
        model = LatticeTransformer(config)
        model.load_state_dict(base.state_dict())

    params = trainable_parameters(model, preset)
    names, plist = list(params), list(params.values())
    train_ex = build_examples(corpora["train"], preset.input_kind, src_vocab, tgt_vocab, config)
    dev_ex = build_examples(corpora["dev"], preset.input_kind, src_vocab, tgt_vocab, config) if "dev" in corpora else []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8") if out_dir is not None else None

    metrics: list[dict] = []
    best: dict = {}
    best_state = None
    adam = AdamState()
    step, epoch = 0, 0
    stopped = False
    model.train()
    started = time.time()
    try:
        while step < train.steps and not stopped:
            batches = make_batches(train_ex, train.max_tokens, train.seed + epoch, config.clip_c, preset.uses_scores)
            epoch += 1
            for batch in batches:
                step += 1
                loss = batch_loss(model, batch.src, batch.targets)
                for p in plist:
                    p.grad = None
                backward(loss)
                grads = [p.grad for p in plist]
                clip_grad_norm(grads, train.clip_norm)
                if preset.optimizer == "adam":
                    lr = train.lr_factor * noam_lr(step, config.d_model, train.warmup)
                    adam_step(plist, grads, adam, lr, train.betas, train.adam_eps)
                else:
                    sgd_finetune_step(plist, grads, train.sgd_lr)
                if on_step is not None:
                    on_step(step, model, loss.item())
                last = step == train.steps
                if dev_ex and (step % train.eval_every == 0 or last):
                    ev = evaluate(model, dev_ex, preset.uses_scores, tgt_vocab, train.max_tokens, train.eval_max_steps)
                    rec = {"step": step, "loss": loss.item(), "preset": preset.name, **ev,
                           "elapsed": round(time.time() - started, 2)}
                    metrics.append(rec)
                    logger.info("%s step %d loss %.4f dev bleu %.2f acc %.4f", preset.name, step, rec["loss"],
                                rec["bleu"], rec["token_accuracy"])
                    if log_fh is not None:
                        log_fh.write(json.dumps(rec) + "\n")
                        log_fh.flush()
                    if not best or (rec["bleu"], -rec["dev_loss"]) > (best["bleu"], -best["dev_loss"]):
                        best = rec
                        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                    if train.stop_accuracy is not None and rec["token_accuracy"] >= train.stop_accuracy:
                        logger.info("%s reached dev accuracy %.4f at step %d", preset.name, rec["token_accuracy"], step)
                        stopped = last = True
                if last:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(ckpt, model, src_vocab, tgt_vocab)
    logger.info("%s trainable: %s", preset.name, ", ".join(n for n in names if n.rsplit(".", 1)[-1] in
                                                            ("w_m", "w_f", "w_b", "branch_logits")))
    return RunResult(model, metrics, best, ckpt, src_vocab, tgt_vocab)
