"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
Machine output goes to stdout or files; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__

logger = logging.getLogger("lattice_transformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_lines(path) -> list[list[str]]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.split() for line in fh]
    except OSError as err:
        raise DataError(f"cannot read {path}: {err.strerror}") from None


def _read_lattices(path):
    from .lattice import LatticeError, iter_jsonl

    try:
        with open(path, encoding="utf-8") as fh:
            return [lat for _, lat in iter_jsonl(fh)]
    except OSError as err:
        raise DataError(f"cannot read {path}: {err.strerror}") from None
    except LatticeError as err:
        raise DataError(f"{path}: {err}") from None


def _validated(path, renormalize=False):
    from .lattice import LatticeError, iter_jsonl, renormalize as renorm, validate

    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, lat in iter_jsonl(fh):
                if renormalize:
                    lat = renorm(lat)
                problems = validate(lat)
                if problems:
                    raise DataError(f"{path}: line {lineno}: " + "; ".join(problems))
                out.append(lat)
    except OSError as err:
        raise DataError(f"cannot read {path}: {err.strerror}") from None
    except LatticeError as err:
        raise DataError(f"{path}: {err}") from None
    return out


# ---------------------------------------------------------------------------
# lattice

def cmd_lattice(args) -> int:
    from .bpe import SegmentationError, merge_segmentations
    from .lattice import from_sequence, write_jsonl
    from .position import build_lattice_matrix
    from .scores import compute_scores

    if args.action == "validate":
        lats = _validated(args.input, args.renormalize)
        print(f"ok {len(lats)} lattices", file=sys.stderr)
        return EXIT_OK
    if args.action == "scores":
        for lat in _validated(args.input, args.renormalize):
            sc = compute_scores(lat)
            print(json.dumps({"m": sc.marginal.tolist(), "b": sc.backward.tolist()}))
        return EXIT_OK
    if args.action == "matrix":
        if args.clip < 1:
            raise UsageError("--clip must be >= 1")
        for lat in _validated(args.input, args.renormalize):
            lm = build_lattice_matrix(lat, args.clip, args.reduce)
            print(json.dumps({"regular": lm.regular.tolist(), "mask_neg": (lm.mask < 0).astype(int).tolist()}))
        return EXIT_OK
    # build
    if args.mode == "sequence":
        if args.segs:
            raise UsageError("--segs is only used with --mode bpe")
        lats = []
        for k, toks in enumerate(_read_lines(args.surface), 1):
            try:
                lats.append(from_sequence(toks))
            except ValueError as err:
                raise DataError(f"{args.surface}: line {k}: {err}") from None
    else:
        if not args.segs:
            raise UsageError("--mode bpe needs --segs")
        with open(args.surface, encoding="utf-8") as fh:
            surfaces = ["".join(line.split()) for line in fh]
        segs = [_read_lines(p) for p in args.segs]
        for p, s in zip(args.segs, segs):
            if len(s) != len(surfaces):
                raise DataError(f"{p} has {len(s)} lines, surface file has {len(surfaces)}")
        lats = []
        for k, surface in enumerate(surfaces):
            try:
                lats.append(merge_segmentations(surface, [s[k] for s in segs], args.marker, args.free_recombination))
            except (SegmentationError, ValueError) as err:
                raise DataError(f"line {k + 1}: {err}") from None
    if args.out:
        write_jsonl(args.out, lats)
    else:
        for lat in lats:
            print(lat.to_json())
    print(f"built {len(lats)} lattices", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth / eval

def cmd_synth(args) -> int:
    from .synth import SynthSpec, write_corpus

    try:
        spec = SynthSpec(vocab_size=args.vocab, min_len=args.min_len, max_len=args.max_len, task=args.task,
                         noise_rate=args.noise, fanout=args.fanout, seed=args.seed, successors=args.successors)
    except ValueError as err:
        raise UsageError(str(err)) from None
    counts = write_corpus(args.out, spec, args.size)
    print(json.dumps(counts), file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import corpus_bleu, token_accuracy

    hyps = _read_lines(args.hyp)
    refs = _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise DataError(f"line count mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise DataError("empty corpus")
    print(json.dumps({"bleu": round(corpus_bleu(hyps, refs), 6), "token_accuracy": round(token_accuracy(hyps, refs), 6),
                      "sentences": len(hyps)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / translate / attention dump

def _load_split(data_dir: Path, name: str):
    from .training import SplitData

    d = data_dir / name
    if not d.is_dir():
        return None
    lattices = _read_lattices(d / "lattices.jsonl") if (d / "lattices.jsonl").exists() else None
    onebest = _read_lines(d / "onebest.txt") if (d / "onebest.txt").exists() else None
    return SplitData(_read_lines(d / "source.txt"), _read_lines(d / "target.txt"), lattices, onebest)


def cmd_train(args) -> int:
    from .checkpoint import CheckpointError, read_header
    from .config import ConfigError, ModelConfig, format_config, load_config_file, parse_config_text
    from .training import PRESETS, TrainConfig, TrainingError, run_preset

    preset = PRESETS[args.preset]
    if preset.init != "fresh" and not args.init:
        raise UsageError(f"preset {args.preset} fine-tunes from an R checkpoint: pass --init")
    try:
        if args.config:
            config = load_config_file(args.config)
        elif args.init:
            config = parse_config_text("", ModelConfig.from_dict(read_header(args.init)["config"]))
        else:
            config = ModelConfig()
        config = config.replace(seed=args.seed)
    except (ConfigError, OSError) as err:
        raise UsageError(f"bad config: {err}") from None
    except CheckpointError as err:
        raise DataError(str(err)) from None
    data = Path(args.data)
    corpora = {k: v for k in ("train", "dev") if (v := _load_split(data, k)) is not None}
    if "train" not in corpora:
        raise DataError(f"{data}: no train split")
    train = TrainConfig(steps=args.steps, max_tokens=args.max_tokens, warmup=args.warmup, sgd_lr=args.sgd_lr,
                        eval_every=args.eval_every, seed=args.seed, lr_factor=args.lr_factor)
    try:
        result = run_preset(preset, corpora, config, train, init_checkpoint=args.init, out_dir=args.out)
    except TrainingError as err:
        raise UsageError(str(err)) from None
    except CheckpointError as err:
        raise DataError(str(err)) from None
    model = result.model
    uses = preset.uses_scores and model.config.score_mode == "full"
    frozen = model.frozen_parameter_names(uses)
    scalars = [n for n, _ in model.named_parameters() if n.rsplit(".", 1)[-1] in ("w_m", "w_f", "w_b", "branch_logits")]
    run_info = {
        "preset": preset.name,
        "config": model.config.to_dict(),
        "trainable_scalars": [n for n in scalars if n not in frozen],
        "frozen_scalars": [n for n in scalars if n in frozen],
        "effective_scalars": model.effective_scalars(uses),
        "best": result.best,
    }
    out = Path(args.out)
    (out / "config.txt").write_text(format_config(model.config), encoding="utf-8")
    (out / "run.json").write_text(json.dumps(run_info, indent=1), encoding="utf-8")
    print(json.dumps(run_info))
    return EXIT_OK


def _load_model(path):
    from .checkpoint import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, KeyError, ValueError) as err:
        raise DataError(f"cannot load checkpoint {path}: {err}") from None


def _inputs(kind, path):
    from .lattice import LatticeError, from_sequence

    if kind == "sequence":
        try:
            return [from_sequence(toks) for toks in _read_lines(path) if toks]
        except LatticeError as err:
            raise DataError(f"{path}: {err}") from None
    return _validated(path)


def _detok(tokens, marker="@@"):
    return " ".join(tokens).replace(marker + " ", "").removesuffix(marker)


def cmd_translate(args) -> int:
    from .features import collate_sources, lattice_features
    from .model import beam_search

    model, src_vocab, tgt_vocab = _load_model(args.checkpoint)
    cfg = model.config
    lats = _inputs(args.input_kind, args.input)
    use_scores = args.input_kind == "lattice" and not args.no_scores
    for lat in lats:
        feats = lattice_features(lat, src_vocab, cfg.clip_c, cfg.lattice_reduce, use_scores)
        src = collate_sources([feats], cfg.clip_c, use_scores)
        if args.nbest > 1:
            hyps = beam_search(model, src, args.beam, args.max_steps, nbest=args.nbest)
            print(json.dumps([{"hyp": _detok(tgt_vocab.decode(ids)), "score": score} for ids, score in hyps]))
        else:
            ids, _ = beam_search(model, src, args.beam, args.max_steps)
            print(_detok(tgt_vocab.decode(ids)))
    return EXIT_OK


def attention_dump(model, src_vocab, tgt_vocab, lat, use_scores=True, beam=1, max_steps=None) -> dict:
    """Encoder self-attention branches and decoder cross-attention for one input."""
    from .features import collate_sources, lattice_features
    from .model import beam_search, target_tensors

    cfg = model.config
    feats = lattice_features(lat, src_vocab, cfg.clip_c, cfg.lattice_reduce, use_scores)
    src = collate_sources([feats], cfg.clip_c, use_scores)
    ids, _ = beam_search(model, src, beam, max_steps)
    enc_trace, dec_trace = [], []
    with torch.no_grad():
        memory = model.encode(src, trace=enc_trace)
        # a hypothesis cut at max_len has no room for the final </s> position
        tin = target_tensors([ids])[0][:, : cfg.max_len]
        model.decode(tin, memory, src, trace=dec_trace)
    layers = []
    for l, rec in enumerate(enc_trace):
        heads = []
        for h in range(cfg.heads):
            a_m = rec["A_m"][0, h].tolist()
            entry = {"head": h, "A_m": a_m,
                     "A_f": rec["A_f"][0, h].tolist() if rec["A_f"] is not None else a_m,
                     "A_b": rec["A_b"][0, h].tolist() if rec["A_b"] is not None else a_m,
                     "A_final": rec["A_final"][0, h].tolist()}
            heads.append(entry)
        layers.append({"layer": l, "s": list(rec["s"]), "heads": heads})
    cross = [{"layer": l, "heads": [{"head": h, "weights": rec["cross"]["weights"][0, h].tolist()}
                                    for h in range(cfg.heads)]} for l, rec in enumerate(dec_trace)]
    target = (["<s>"] + tgt_vocab.decode(ids))[: tin.shape[1]]
    return {"tokens": list(lat.tokens), "target": target, "layers": layers, "cross": cross}


def cmd_attention_dump(args) -> int:
    model, src_vocab, tgt_vocab = _load_model(args.checkpoint)
    lats = _inputs(args.input_kind, args.input)
    if len(lats) != 1:
        raise UsageError(f"attention dump takes exactly one input, got {len(lats)}")
    dump = attention_dump(model, src_vocab, tgt_vocab, lats[0], use_scores=args.input_kind == "lattice")
    Path(args.out).write_text(json.dumps(dump), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lattice-transformer", description="Lattice transformer toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    lat = sub.add_parser("lattice", help="build, validate and inspect lattices")
    lsub = lat.add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = lsub.add_parser("build")
    b.add_argument("--mode", choices=("bpe", "sequence"), default="bpe")
    b.add_argument("--surface", required=True, help="surface strings (bpe) or token lines (sequence)")
    b.add_argument("--segs", nargs="+", default=[], help="segmentation files, one per BPE size")
    b.add_argument("--marker", default="@@")
    b.add_argument("--free-recombination", action="store_true")
    b.add_argument("--out")
    for name in ("validate", "scores", "matrix"):
        q = lsub.add_parser(name)
        q.add_argument("input")
        q.add_argument("--renormalize", action="store_true", help="rescale forward scores before use")
        if name == "matrix":
            q.add_argument("--clip", type=int, default=16)
            q.add_argument("--reduce", choices=("min", "max"), default="min")
    lat.set_defaults(func=cmd_lattice)

    s = sub.add_parser("synth", help="write a synthetic noisy-lattice corpus")
    s.add_argument("--task", choices=("copy", "reverse", "map"), default="copy")
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--fanout", type=int, default=3)
    s.add_argument("--size", type=int, default=2000)
    s.add_argument("--vocab", type=int, default=50)
    s.add_argument("--min-len", type=int, default=3)
    s.add_argument("--max-len", type=int, default=8)
    s.add_argument("--successors", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one of the R / R+1 / R+L / R+L+S presets")
    t.add_argument("--preset", choices=("R", "R+1", "R+L", "R+L+S"), required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--init")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--max-tokens", type=int, default=512)
    t.add_argument("--warmup", type=int, default=400)
    t.add_argument("--lr-factor", type=float, default=1.0)
    t.add_argument("--sgd-lr", type=float, default=0.15)
    t.add_argument("--eval-every", type=int, default=250)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="beam-search translation")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input-kind", choices=("sequence", "lattice"), required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--beam", type=int, default=4)
    tr.add_argument("--max-steps", type=int)
    tr.add_argument("--nbest", type=int, default=1)
    tr.add_argument("--no-scores", action="store_true", help="treat lattice input as score-free")
    tr.set_defaults(func=cmd_translate)

    a = sub.add_parser("attention-dump", help="export attention weights as JSON")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--input-kind", choices=("sequence", "lattice"), default="lattice")
    a.add_argument("--input", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attention_dump)

    e = sub.add_parser("eval", help="corpus BLEU and token accuracy")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:
        # usage errors exit 1; --help and --version exit 0
        return int(stop.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except BrokenPipeError:
        # reader went away (e.g. `| head`); silence the flush at interpreter exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except Exception as err:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
