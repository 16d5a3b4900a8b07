"""Checkpoint container.

Layout: a magic line, one JSON header line (model config and vocabularies),
then one record per parameter: a text line ``name<TAB>d1,d2,...`` followed by
the little-endian float64 payload and a newline.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .numerics import DTYPE
from .vocab import Vocab

MAGIC = b"LATTICE-TRANSFORMER-CHECKPOINT 1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, src_vocab: Vocab, tgt_vocab: Vocab) -> None:
    state = model.state_dict()
    header = {"config": model.config.to_dict(), "src_vocab": src_vocab.itos, "tgt_vocab": tgt_vocab.itos,
              "records": len(state)}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, ensure_ascii=False).encode("utf-8") + b"\n")
        for name, value in state.items():
            shape = ",".join(str(s) for s in value.shape)
            fh.write(f"{name}\t{shape}\n".encode("utf-8"))
            fh.write(value.detach().cpu().numpy().astype("<f8").tobytes())
            fh.write(b"\n")


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a lattice transformer checkpoint")
        try:
            return json.loads(fh.readline())
        except json.JSONDecodeError as err:
            raise CheckpointError(f"{path}: corrupt header: {err.msg}") from None


def load_checkpoint(path, config: ModelConfig | None = None):
    """Return (model, src_vocab, tgt_vocab); every record shape is checked against the config."""
    from .model import LatticeTransformer

    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a lattice transformer checkpoint")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as err:
            raise CheckpointError(f"{path}: corrupt header: {err.msg}") from None
        src_vocab = Vocab(header["src_vocab"][4:])
        tgt_vocab = Vocab(header["tgt_vocab"][4:])
        if config is None:
            config = ModelConfig.from_dict(header["config"])
        model = LatticeTransformer(config)
        expected = model.state_dict()
        loaded = {}
        for _ in range(header["records"]):
            line = fh.readline().decode("utf-8").rstrip("\n")
            if "\t" not in line:
                raise CheckpointError(f"{path}: truncated record list")
            name, dims = line.split("\t")
            shape = tuple(int(s) for s in dims.split(",")) if dims else ()
            if name not in expected:
                raise CheckpointError(f"{path}: unexpected parameter {name}")
            if tuple(expected[name].shape) != shape:
                raise CheckpointError(f"{path}: {name} has shape {shape}, config expects {tuple(expected[name].shape)}")
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count or fh.read(1) != b"\n":
                raise CheckpointError(f"{path}: truncated payload for {name}")
            loaded[name] = torch.from_numpy(np.frombuffer(payload, dtype="<f8").copy().reshape(shape)).to(DTYPE)
        missing = set(expected) - set(loaded)
        if missing:
            raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    model.load_state_dict(loaded)
    model.eval()
    return model, src_vocab, tgt_vocab
