"""Quantization job configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_bits(value) -> int:
    """``t``/``ternary``/``1.58`` -> 0, otherwise an integer bit-width in 2..8."""
    s = str(value).strip().lower()
    if s in ("t", "ternary", "1.58", "0"):
        return 0
    try:
        b = int(s)
    except ValueError:
        raise ConfigError(f"bad bit-width {value!r}") from None
    if not 2 <= b <= 8:
        raise ConfigError(f"bit-width must be ternary or 2..8, got {b}")
    return b


@dataclass
class QuantConfig:
    bits: int = 2  # 0 = ternary
    group_size: int = 128
    epochs: int = 20
    batch_size: int = 64
    micro_batches: int = 4
    lr_logits: float = 1e-4
    lr_scales: float = 5e-5
    weight_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    tau_start: float = 2.0
    tau_end: float = 0.05
    kappa_start: float = 100.0
    kappa_end: float = 500.0
    alpha: typing.Optional[float] = None  # None: 3 for ternary, 6 otherwise
    sigma_init: float = 0.01
    seed: int = 0
    clip_target: str = "none"  # none | logits | all
    clip_threshold: float = math.inf
    init_method: str = "gptq"  # gptq | rtn
    damp: float = 0.01
    parameterization: str = "auto"  # auto | full | shift
    shift_halfwidth: int = 2
    stage_split: float = 0.5
    holdout_fraction: float = 0.125
    activation: str = "silu"
    scale_epochs: int = 1
    do_no_harm: bool = True
    num_sequences: typing.Optional[int] = None
    seq_len: typing.Optional[int] = None

    def __post_init__(self):
        self.bits = parse_bits(self.bits)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.group_size < 1 or self.batch_size < 1 or self.micro_batches < 1:
            raise ConfigError("group_size, batch_size and micro_batches must be >= 1")
        if not (self.tau_start > 0 and self.tau_end > 0 and self.kappa_start > 0 and self.kappa_end > 0):
            raise ConfigError("temperature and noise-scale endpoints must be positive")
        if self.clip_target not in ("none", "logits", "all"):
            raise ConfigError(f"clip_target must be none, logits or all, got {self.clip_target!r}")
        if self.init_method not in ("gptq", "rtn"):
            raise ConfigError(f"init_method must be gptq or rtn, got {self.init_method!r}")
        if self.parameterization not in ("auto", "full", "shift"):
            raise ConfigError(f"unknown parameterization {self.parameterization!r}")
        if not 0.0 <= self.stage_split <= 1.0:
            raise ConfigError("stage_split must be in [0, 1]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def ternary(self) -> bool:
        return self.bits == 0

    @property
    def effective_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 3.0 if self.ternary else 6.0

    @property
    def calib_row_limit(self) -> int | None:
        if self.num_sequences is None or self.seq_len is None:
            return None
        return self.num_sequences * self.seq_len

    def replace(self, **changes) -> QuantConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bits"] = "t" if self.ternary else self.bits
        if math.isinf(d["clip_threshold"]):
            d["clip_threshold"] = "inf"
        return d


ACTIVATIONS = ("silu", "identity")


def _coerce(name: str, raw: str, hint):
    if typing.get_origin(hint) is typing.Union:
        if raw.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {hint.__name__}") from None


def parse_config_text(text: str, base: QuantConfig | None = None) -> QuantConfig:
    hints = typing.get_type_hints(QuantConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "betas":
            b1, b2 = (p.strip() for p in raw.strip("()[] ").split(","))
            values["beta1"] = _coerce("beta1", b1, float)
            values["beta2"] = _coerce("beta2", b2, float)
            continue
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = parse_bits(raw) if key == "bits" else _coerce(key, raw.strip("\"'"), hints[key])
    try:
        return dataclasses.replace(base or QuantConfig(), **values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_config(path, base: QuantConfig | None = None) -> QuantConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)
