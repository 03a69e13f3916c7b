"""Model/training configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fusion import DEFAULT_ORDER, parse_order


class ConfigContractError(ValueError):
    """A config file or value breaks the documented contract; names the offending key."""


@dataclass
class ModelConfig:
    # architecture
    d: int = 256
    h_l: int = 8
    h_m: int = 8
    encoder_heads: int = 8
    n_v: int = 4
    n_a: int = 4
    n_t: int = 6
    n_c: int = 3
    ffn_mult: int = 4
    amr_hidden_layers: int = 1
    dropout: float = 0.1
    token_mode: str = "vector"
    disc_bias: str = "broadcast"
    diff_sign: str = "positive"
    common_length: int = 0
    # objective
    alpha: float = 0.01
    beta: float = 5e-6
    gamma: float = 0.5
    # optimisation
    batch_size: int = 64
    base_lr: float = 1e-5
    warmup_fraction: float = 0.1
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    precision: str = "f64"
    threshold: float = 0.5
    probe_size: int = 32
    # ablations
    disable_amr: bool = False
    disable_diff: bool = False
    disable_cml: bool = False
    fusion_order: tuple[str, ...] = field(default=DEFAULT_ORDER)
    disable_token_embeddings: bool = False
    identical_head: bool = False
    disable_label_correlation: bool = False
    disable_label_modal_attention: bool = False

    def __post_init__(self):
        self.fusion_order = parse_order(self.fusion_order)
        self.validate()

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigContractError(f"{key}: {why}")

        for key in ("alpha", "beta", "gamma"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        for key in ("d", "h_l", "h_m", "encoder_heads", "n_v", "n_a", "n_t", "n_c", "batch_size", "ffn_mult"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("h_l", "h_m", "encoder_heads"):
            if self.d % getattr(self, key):
                bad(key, f"must divide d={self.d}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            bad("warmup_fraction", "must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            bad("dropout", "must lie in [0, 1)")
        if self.token_mode not in ("vector", "scalar"):
            bad("token_mode", "expected vector or scalar")
        if self.disc_bias not in ("broadcast", "per_position"):
            bad("disc_bias", "expected broadcast or per_position")
        if self.diff_sign not in ("positive", "printed"):
            bad("diff_sign", "expected positive or printed")
        if self.precision not in ("f32", "f64"):
            bad("precision", "expected f32 or f64")
        if self.base_lr <= 0:
            bad("base_lr", "must be > 0")
        if self.epochs < 1:
            bad("epochs", "must be >= 1")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def toy_config(**overrides) -> ModelConfig:
    """Small configuration that trains on the synthetic default set in about a minute on one core."""
    base = dict(
        d=32, h_l=4, h_m=4, encoder_heads=4, n_v=1, n_a=1, n_t=1, n_c=1,
        dropout=0.0, base_lr=2e-3, epochs=300, patience=300, batch_size=64,
        # the orthogonality sum grows with tau^2 * d, so the toy scale needs a larger beta
        beta=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


_FIELDS = {f.name: f for f in fields(ModelConfig)}


def _coerce(key: str, raw: str):
    default = getattr(ModelConfig(), key)
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return parse_order(raw)
        return raw
    except ValueError as exc:
        raise ConfigContractError(f"{key}: cannot parse {raw!r} ({exc})") from None


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigContractError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigContractError(f"{key}: unknown config key (line {lineno})")
        if key in values:
            raise ConfigContractError(f"{key}: given twice (line {lineno})")
        values[key] = _coerce(key, raw)
    base = base or ModelConfig()
    try:
        return dataclasses.replace(base, **values)
    except ConfigContractError:
        raise
    except Exception as exc:  # pragma: no cover - defensive
        raise ConfigContractError(str(exc)) from None


def load_config(path: str | Path) -> ModelConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(config: ModelConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
