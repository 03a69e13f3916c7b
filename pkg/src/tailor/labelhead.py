"""Label-guided decoder: label self-attention, label-to-modality cross-attention
and per-label sigmoid classifiers."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from . import diffcore as dc
from .amr import bce_sum
from .layers import FeedForward, LayerNorm, MultiHeadAttention


class LabelSelfAttention(nn.Module):
    """Learned label embeddings refined by one multi-head self-attention block.

    Returns the refined ``l x d`` table and the raw per-head correlation
    scores ``r = q k^T`` with shape ``(heads, l, l)``.
    """

    def __init__(self, num_labels: int, dim: int, heads: int, use_correlation: bool = True):
        super().__init__()
        self.embedding = nn.Parameter(torch.randn(num_labels, dim) * 0.02)
        self.attn = MultiHeadAttention(dim, heads, bias=False)
        self.ln = LayerNorm(dim)
        self.use_correlation = use_correlation

    @property
    def head_dim(self) -> int:
        return self.attn.dim // self.attn.heads

    def forward(self, return_scores: bool = True):
        L = self.embedding
        if not self.use_correlation:
            return (L, None) if return_scores else L
        s, r = self.attn(L[None], L[None], L[None], return_scores=True)
        out = self.ln(L + s[0])
        return (out, r[0]) if return_scores else out


def label_self_attention(module: LabelSelfAttention):
    return module()


def partitioned_attention(r: torch.Tensor, v: torch.Tensor, pivot: int, scale: float) -> torch.Tensor:
    """Per-head attention output assembled from the pivot/rest block split of ``r``.

    Row ``k`` is ``softmax(r_kk)v_k + softmax(r_k~k)v_k~`` where both weights
    come from one scaled softmax over the full row. The result is reordered
    back to the original label order.
    """
    l = r.shape[0]
    rest = [j for j in range(l) if j != pivot]
    idx = torch.tensor([pivot] + rest)
    rp = r[idx][:, idx] * scale
    vk, vr = v[pivot : pivot + 1], v[rest]
    w = dc.softmax_rows(rp)
    blocks_k = w[:1, :1] @ vk + w[:1, 1:] @ vr
    blocks_r = w[1:, :1] @ vk + w[1:, 1:] @ vr
    s = torch.cat([blocks_k, blocks_r], dim=0)
    out = torch.empty_like(s)
    out[idx] = s
    return out


class LabelGuidedDecoder(nn.Module):
    """Cross-attention from label space into the fused sequence, then FFN.

    With ``use_modal_attention=False`` every label receives the same
    time-averaged projection of the fused sequence instead of attending.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int | None = None, dropout: float = 0.0,
                 use_modal_attention: bool = True):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, bias=False)
        self.ln1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim or 4 * dim, dropout)
        self.ln2 = LayerNorm(dim)
        self.use_modal_attention = use_modal_attention

    def forward(self, labels: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        """``labels``: ``(l, d)``; ``fused``: ``(batch, d, L_M)``. Returns ``(batch, l, d)``."""
        if labels.shape[-1] != fused.shape[-2]:
            raise dc.DimensionError(f"label dim {labels.shape[-1]} does not match fused dim {fused.shape[-2]}")
        seq = fused.transpose(1, 2)
        q = labels.expand(seq.shape[0], *labels.shape)
        if self.use_modal_attention:
            dep = self.attn(q, seq, seq)
        else:
            dep = self.attn.out(self.attn.v(seq.mean(dim=1, keepdim=True))).expand_as(q)
        hat = self.ln1(q + dep)
        return self.ln2(hat + self.ffn(hat))


class PerLabelClassifier(nn.Module):
    def __init__(self, num_labels: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num_labels, dim) * dim**-0.5)
        self.bias = nn.Parameter(torch.zeros(num_labels))

    def forward(self, tailored: torch.Tensor) -> torch.Tensor:
        return dc.sigmoid((tailored * self.weight).sum(dim=-1) + self.bias)


def classify(tailored, classifier: PerLabelClassifier):
    return classifier(tailored)


def loss_ml(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return bce_sum(probs, labels)


def correlation_matrices(r: torch.Tensor, head_dim: int, raw: bool = False) -> torch.Tensor:
    """Row-softmaxed (scaled) correlation scores per head, or raw ``r`` when ``raw``."""
    if raw:
        return r.detach()
    return dc.softmax_rows(r.detach() / math.sqrt(head_dim))


def export_correlations(
    r: torch.Tensor,
    label_names: Sequence[str],
    out_dir: str | Path,
    head_dim: int,
    raw: bool = False,
) -> list[Path]:
    """Write ``correlations_head{h}.csv`` for every head; row label influences column label."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mats = correlation_matrices(r, head_dim, raw)
    if mats.shape[-1] != len(label_names):
        raise dc.DimensionError(f"{mats.shape[-1]} labels in matrix but {len(label_names)} names given")
    paths = []
    for h, mat in enumerate(mats):
        path = out_dir / f"correlations_head{h}.csv"
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label", *label_names])
            for name, row in zip(label_names, mat.tolist()):
                w.writerow([name, *(repr(float(x)) for x in row)])
        paths.append(path)
    return paths
