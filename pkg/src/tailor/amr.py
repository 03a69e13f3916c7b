"""Adversarial multi-modal refinement.

Each uni-modal embedding is split into a common part (one generator shared by
all modalities) and a private part (one extractor per modality). A single
modality discriminator is trained to tell the modalities apart; the common
branch sees it through a gradient reversal so the generator learns to confuse
it. Orthogonality and common-semantic losses regularise the split.

Representations are feature-major: ``(batch, d, tau)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import diffcore as dc
from .unimodal import ConfigError

KEYS = ("v", "a", "t")


def modality_labels(tau: int, dtype: torch.dtype = dc.DEFAULT_DTYPE) -> dict[str, torch.Tensor]:
    """One-hot ``tau x 3`` ground-truth rows for visual, audio and text."""
    eye = torch.eye(3, dtype=dtype)
    return {m: eye[i].expand(tau, 3) for i, m in enumerate(KEYS)}


class PointwiseMLP(nn.Module):
    """Affine -> GELU -> affine, applied independently at every timestep."""

    def __init__(self, dim: int, hidden_layers: int = 1):
        super().__init__()
        self.fcs = nn.ModuleList(nn.Linear(dim, dim) for _ in range(hidden_layers + 1))

    def forward(self, x):
        h = x.transpose(1, 2)
        for i, fc in enumerate(self.fcs):
            h = fc(h)
            if i < len(self.fcs) - 1:
                h = dc.gelu(h)
        return h.transpose(1, 2)


class ModalityDiscriminator(nn.Module):
    def __init__(self, dim: int, bias_mode: str = "broadcast", seq_len: int | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(dim, 3))
        nn.init.normal_(self.weight, std=dim**-0.5)
        if bias_mode == "broadcast":
            self.bias = nn.Parameter(torch.zeros(3))
        elif bias_mode == "per_position":
            if not seq_len:
                raise ConfigError("per-position discriminator bias needs a fixed sequence length")
            self.bias = nn.Parameter(torch.zeros(seq_len, 3))
        else:
            raise ConfigError(f"unknown discriminator bias mode {bias_mode!r}")
        self.bias_mode = bias_mode

    def forward(self, rep: torch.Tensor) -> torch.Tensor:
        """Map ``(batch, d, tau)`` (or ``d x tau``) to per-timestep modality probabilities."""
        if rep.shape[-2] != self.weight.shape[0]:
            raise dc.DimensionError(f"discriminator expects feature dim {self.weight.shape[0]}, got {rep.shape[-2]}")
        if self.bias_mode == "per_position" and rep.shape[-1] != self.bias.shape[0]:
            raise ConfigError(f"per-position bias has tau={self.bias.shape[0]}, input has tau={rep.shape[-1]}")
        return dc.softmax_rows(dc.matmul(dc.transpose(rep), self.weight) + self.bias)


class CommonSemanticHead(nn.Module):
    """Temporal mean-pool, shared affine map to label logits, sigmoid."""

    def __init__(self, dim: int, num_labels: int):
        super().__init__()
        self.fc = nn.Linear(dim, num_labels)

    def forward(self, common):
        return dc.sigmoid(self.fc(common.mean(dim=-1)))


@dataclass
class RefinedRepresentations:
    common: dict[str, torch.Tensor]
    private: dict[str, torch.Tensor]


class AdversarialRefinement(nn.Module):
    def __init__(
        self,
        dim: int,
        num_labels: int,
        hidden_layers: int = 1,
        bias_mode: str = "broadcast",
        seq_len: int | None = None,
    ):
        super().__init__()
        self.generator = PointwiseMLP(dim, hidden_layers)
        self.private = nn.ModuleDict({m: PointwiseMLP(dim, hidden_layers) for m in KEYS})
        self.discriminator = ModalityDiscriminator(dim, bias_mode, seq_len)
        self.semantic = CommonSemanticHead(dim, num_labels)

    def refine(self, v, a, t) -> RefinedRepresentations:
        inputs = dict(zip(KEYS, (v, a, t)))
        return RefinedRepresentations(
            common={m: self.generator(x) for m, x in inputs.items()},
            private={m: self.private[m](x) for m, x in inputs.items()},
        )

    forward = refine


def _adversarial_ce(reps, discriminator, reverse: bool) -> torch.Tensor:
    n = next(iter(reps.values())).shape[0]
    if n == 0:
        raise dc.ContractError("adversarial loss on an empty batch")
    total = 0.0
    for i, m in enumerate(KEYS):
        x = dc.grad_reversal(reps[m]) if reverse else reps[m]
        logp = dc.clamped_log(discriminator(x))
        # one-hot rows pick column i at every timestep
        total = total - logp[..., i].sum()
    return total / n


def loss_common(common: dict[str, torch.Tensor], discriminator: ModalityDiscriminator, reverse: bool = True):
    """Common adversarial loss; the reversal pushes the generator toward confusion."""
    return _adversarial_ce(common, discriminator, reverse)


def loss_private(private: dict[str, torch.Tensor], discriminator: ModalityDiscriminator):
    return _adversarial_ce(private, discriminator, reverse=False)


def loss_diff(common: dict[str, torch.Tensor], private: dict[str, torch.Tensor], sign: str = "positive"):
    """Sum over modalities and samples of ||C^T P||_F^2.

    ``sign="printed"`` negates the penalty, which rewards redundancy instead.
    """
    total = 0.0
    for m in KEYS:
        c, p = common[m], private[m]
        if c.shape != p.shape:
            raise dc.DimensionError(f"loss_diff: common {tuple(c.shape)} vs private {tuple(p.shape)} for {m}")
        total = total + dc.frobenius_sq(dc.matmul(dc.transpose(c), p))
    if sign == "printed":
        return -total
    if sign != "positive":
        raise ConfigError(f"unknown orthogonality sign {sign!r}")
    return total


def bce_sum(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if probs.shape != labels.shape:
        raise dc.ContractError(f"label shape {tuple(labels.shape)} does not match predictions {tuple(probs.shape)}")
    return -(labels * dc.clamped_log(probs) + (1 - labels) * dc.clamped_log(1 - probs)).sum()


def loss_cml(common: dict[str, torch.Tensor], labels: torch.Tensor, head: CommonSemanticHead):
    total = 0.0
    for m in KEYS:
        total = total + bce_sum(head(common[m]), labels)
    return total


@torch.no_grad()
def mean_probabilities(reps: dict[str, torch.Tensor], discriminator: ModalityDiscriminator):
    """Mean discriminator output per modality, averaged over samples and timesteps."""
    return {m: discriminator(reps[m]).mean(dim=(0, 1)) for m in KEYS}
