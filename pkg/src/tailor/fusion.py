"""Cross-modal encoder and the hierarchical (granularity-descent) fusion."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import diffcore as dc
from .layers import Dropout, EncoderLayer, sinusoidal_positions
from .unimodal import ConfigError

DEFAULT_ORDER = ("v", "a", "t", "c")


def parse_order(order: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(order, str):
        order = [s.strip() for s in order.replace(",", " ").split()] if ("," in order or " " in order) else list(order)
    order = tuple(order)
    if sorted(order) != sorted(DEFAULT_ORDER):
        raise ConfigError(f"fusion order must be a permutation of v,a,t,c; got {order}")
    return order


def temporal_pool(x: torch.Tensor, length: int) -> torch.Tensor:
    """Average-pool ``(batch, d, tau)`` along time to ``length`` steps."""
    if x.shape[-1] == length:
        return x
    return F.adaptive_avg_pool1d(x, length)


class CrossModalEncoder(nn.Module):
    """Concatenate two streams in time, add positions and modality tokens, encode.

    ``token_mode="vector"`` gives each stream a learned d-vector broadcast over
    time; ``"scalar"`` gives one learned scalar per timestep broadcast over
    features, which needs fixed stream lengths.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        layers: int,
        ffn_dim: int | None = None,
        dropout: float = 0.0,
        token_mode: str = "vector",
        lengths: tuple[int, int] | None = None,
        use_tokens: bool = True,
    ):
        super().__init__()
        self.dim = dim
        self.token_mode = token_mode
        self.use_tokens = use_tokens
        if token_mode == "vector":
            self.token_a = nn.Parameter(torch.randn(dim) * 0.02)
            self.token_b = nn.Parameter(torch.randn(dim) * 0.02)
        elif token_mode == "scalar":
            if lengths is None:
                raise ConfigError("scalar token embeddings need fixed stream lengths")
            self.token_a = nn.Parameter(torch.randn(lengths[0]) * 0.02)
            self.token_b = nn.Parameter(torch.randn(lengths[1]) * 0.02)
        else:
            raise ConfigError(f"unknown token mode {token_mode!r}")
        self.drop = Dropout(dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(dim, heads, ffn_dim or 4 * dim, dropout) for _ in range(layers)
        )

    def _tokens(self, token, tau):
        if self.token_mode == "vector":
            return token.expand(tau, self.dim)
        if token.shape[0] != tau:
            raise ConfigError(f"scalar token table has length {token.shape[0]}, stream has {tau}")
        return token[:, None].expand(tau, self.dim)

    def forward(self, a: torch.Tensor, b: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
        if a.shape[-2] != self.dim or b.shape[-2] != self.dim:
            raise dc.DimensionError(f"CME streams must have dim {self.dim}: got {tuple(a.shape)} and {tuple(b.shape)}")
        ta, tb = a.shape[-1], b.shape[-1]
        x = dc.concat([a.transpose(1, 2), b.transpose(1, 2)], axis=1)
        if positions is None:
            positions = sinusoidal_positions(ta + tb, self.dim, x.dtype)
        x = x + positions
        if self.use_tokens:
            x = x + dc.concat([self._tokens(self.token_a, ta), self._tokens(self.token_b, tb)], axis=0)
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x)
        return x.transpose(1, 2)


class HierarchicalFusion(nn.Module):
    """Three chained cross-modal encoders following a fusion order over {v, a, t, c}.

    ``lengths`` maps each symbol to its stream length; only scalar token mode
    needs it.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        layers: int,
        order: str | Sequence[str] = DEFAULT_ORDER,
        ffn_dim: int | None = None,
        dropout: float = 0.0,
        token_mode: str = "vector",
        lengths: dict[str, int] | None = None,
        use_tokens: bool = True,
    ):
        super().__init__()
        self.order = parse_order(order)
        stage_lengths: list[tuple[int, int] | None] = [None, None, None]
        if lengths is not None:
            acc = lengths[self.order[0]]
            for i, sym in enumerate(self.order[1:]):
                stage_lengths[i] = (acc, lengths[sym])
                acc += lengths[sym]
        self.stages = nn.ModuleList(
            CrossModalEncoder(dim, heads, layers, ffn_dim, dropout, token_mode, stage_lengths[i], use_tokens)
            for i in range(3)
        )

    def forward(self, streams: dict[str, torch.Tensor]) -> torch.Tensor:
        """``streams`` maps v, a, t to private reps and c to the summed common rep."""
        z = streams[self.order[0]]
        for stage, sym in zip(self.stages, self.order[1:]):
            z = stage(z, streams[sym])
        return z


def hcme(pv, pa, pt, c, fusion: HierarchicalFusion) -> torch.Tensor:
    return fusion({"v": pv, "a": pa, "t": pt, "c": c})
