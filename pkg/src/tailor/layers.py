"""Transformer building blocks shared by the uni-modal and cross-modal encoders.

All sequence tensors in this file are time-major: ``(batch, time, dim)``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from . import diffcore as dc


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype = dc.DEFAULT_DTYPE) -> torch.Tensor:
    """Fixed sinusoidal table of shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.tensor(table, dtype=dtype)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return dc.layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(nn.Module):
    """Dropout driven by an explicit generator so runs are reproducible."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self.generator: torch.Generator | None = None

    def forward(self, x):
        return dc.dropout(x, self.rate, self.training, self.generator)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=bias)
        self.k = nn.Linear(dim, dim, bias=bias)
        self.v = nn.Linear(dim, dim, bias=bias)
        self.out = nn.Linear(dim, dim, bias=bias)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.dim // self.heads).transpose(1, 2)

    def scores(self, query, key):
        """Unscaled per-head scores q k^T, shape (batch, heads, tq, tk)."""
        return dc.matmul(self._split(self.q(query)), dc.transpose(self._split(self.k(key))))

    def forward(self, query, key, value, return_scores: bool = False):
        r = self.scores(query, key)
        weights = dc.softmax_rows(r / math.sqrt(self.dim // self.heads))
        ctx = dc.matmul(weights, self._split(self.v(value)))
        b, _, tq, _ = ctx.shape
        out = self.out(ctx.transpose(1, 2).reshape(b, tq, self.dim))
        return (out, r) if return_scores else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(dc.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Post-LN transformer encoder layer: sublayer, residual add, then layer norm."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.ln1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.ln2 = LayerNorm(dim)
        self.drop = Dropout(dropout)

    def forward(self, x):
        x = self.ln1(x + self.drop(self.attn(x, x, x)))
        return self.ln2(x + self.drop(self.ffn(x)))


def zero_sublayers(module: nn.Module) -> None:
    """Zero every attention and feed-forward weight below ``module``.

    Layer norms are reset to the identity affine map. Used by residual-path
    checks.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (MultiHeadAttention, FeedForward)):
                for p in m.parameters():
                    p.zero_()
            elif isinstance(m, LayerNorm):
                m.gain.fill_(1.0)
                m.bias.zero_()
