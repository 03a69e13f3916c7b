"""Per-modality transformer encoders (visual, audio, text)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import Dropout, EncoderLayer, sinusoidal_positions

MODALITIES = ("visual", "audio", "text")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityConfig:
    modality_id: str
    input_dim: int
    seq_len: int
    layers: int
    heads: int = 8
    model_dim: int = 256
    ffn_dim: int | None = None
    dropout: float = 0.1

    def __post_init__(self):
        if self.modality_id not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality_id!r}")
        if self.model_dim % self.heads:
            raise ConfigError(f"{self.modality_id}: model dim {self.model_dim} not divisible by {self.heads} heads")
        if self.layers < 1 or self.seq_len < 1 or self.input_dim < 1:
            raise ConfigError(f"{self.modality_id}: layers, seq_len and input_dim must be positive")

    @property
    def hidden(self) -> int:
        return self.ffn_dim or 4 * self.model_dim


class ModalityEncoder(nn.Module):
    """Affine input projection, sinusoidal positions and a post-LN encoder stack.

    Takes feature-major input ``(batch, d_m, tau)`` and returns ``(batch, d, tau)``.
    """

    def __init__(self, config: ModalityConfig):
        super().__init__()
        self.config = config
        self.proj = nn.Linear(config.input_dim, config.model_dim)
        self.drop = Dropout(config.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(config.model_dim, config.heads, config.hidden, config.dropout) for _ in range(config.layers)
        )

    def forward(self, features: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.config
        if features.dim() != 3 or features.shape[1] != cfg.input_dim:
            raise ConfigError(
                f"{cfg.modality_id}: expected features (batch, {cfg.input_dim}, tau), got {tuple(features.shape)}"
            )
        x = self.proj(features.transpose(1, 2))
        if positions is None:
            positions = sinusoidal_positions(x.shape[1], cfg.model_dim, x.dtype)
        x = self.drop(x + positions)
        for layer in self.layers:
            x = layer(x)
        return x.transpose(1, 2)


def encode(features: torch.Tensor, encoder: ModalityEncoder) -> torch.Tensor:
    """Encode a single ``d_m x tau`` matrix into ``d x tau``."""
    if features.dim() == 2:
        return encoder(features.unsqueeze(0)).squeeze(0)
    return encoder(features)
