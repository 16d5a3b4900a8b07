"""Model configuration and the flat ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

SCORE_MODES = ("full", "none")
FB_SUPPORTS = ("descendants", "direct")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_width: int = 128
    clip_c: int = 16
    dropout_rate: float = 0.1
    label_smoothing: float = 0.1
    fb_support: str = "descendants"
    # None means every encoder layer
    fb_layers: tuple[int, ...] | None = None
    use_marginal_encoder: bool = True
    use_marginal_decoder: bool = True
    score_mode: str = "full"
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    max_len: int = 64
    beam_size: int = 4
    seed: int = 0
    lattice_reduce: str = "min"

    def __post_init__(self):
        if self.fb_layers is None:
            self.fb_layers = tuple(range(self.enc_layers))
        self.fb_layers = tuple(sorted(int(x) for x in self.fb_layers))
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        bad = [x for x in self.fb_layers if not 0 <= x < self.enc_layers]
        if bad:
            raise ConfigError(f"fb_layers {bad} outside [0, {self.enc_layers})")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"score_mode must be one of {SCORE_MODES}")
        if self.fb_support not in FB_SUPPORTS:
            raise ConfigError(f"fb_support must be one of {FB_SUPPORTS}")
        if self.lattice_reduce not in ("min", "max"):
            raise ConfigError("lattice_reduce must be 'min' or 'max'")
        if self.clip_c < 1:
            raise ConfigError("clip_c must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("dropout_rate and label_smoothing must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["fb_layers"] = list(self.fb_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk": ModelConfig(),
    # transformer-base sizes; documentation only, far too large for CPU training here
    "paper-base": ModelConfig(d_model=512, heads=8, enc_layers=6, dec_layers=6, ffn_width=2048, beam_size=4),
}


def _parse_value(name: str, raw: str, kind) -> Any:
    raw = raw.strip()
    if name == "fb_layers":
        if raw.lower() == "all":
            return None
        if raw.lower() in ("", "none"):
            return ()
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {raw!r}")
    return raw


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse ``key = value`` lines (``#`` comments) over ``base`` defaults."""
    kinds = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    values = (base or ModelConfig()).to_dict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, kinds[key])
    return ModelConfig.from_dict(values)


def load_config_file(path, base: ModelConfig | None = None) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def format_config(config: ModelConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value) if value else "none"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
