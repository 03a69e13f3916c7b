"""The full model: uni-modal encoders, refinement, hierarchical fusion and label decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import amr
from . import diffcore as dc
from .config import ModelConfig
from .fusion import HierarchicalFusion, temporal_pool
from .labelhead import LabelGuidedDecoder, LabelSelfAttention, PerLabelClassifier, loss_ml
from .layers import Dropout
from .unimodal import ModalityConfig, ModalityEncoder

MODALITY_KEYS = {"visual": "v", "audio": "a", "text": "t"}


@dataclass(frozen=True)
class InputShapes:
    """Per-modality (feature dim, sequence length) plus label count."""

    dims: dict[str, int]
    lengths: dict[str, int]
    num_labels: int

    def common_length(self, requested: int = 0) -> int:
        return requested or min(self.lengths.values())


@dataclass
class ForwardOutput:
    probs: torch.Tensor
    fused: torch.Tensor
    uni: dict[str, torch.Tensor]
    reps: amr.RefinedRepresentations | None
    correlations: torch.Tensor | None
    losses: dict[str, torch.Tensor] = field(default_factory=dict)


def total_loss(l_ml, l_c, l_p, l_diff, l_cml, config: ModelConfig):
    """Weighted objective; ablation switches drop the corresponding terms."""
    if config.disable_amr:
        return l_ml
    out = l_ml + config.alpha * (l_c + l_p)
    if not config.disable_diff:
        out = out + config.beta * l_diff
    if not config.disable_cml:
        out = out + config.gamma * l_cml
    return out


class TailorModel(nn.Module):
    def __init__(self, config: ModelConfig, shapes: InputShapes):
        super().__init__()
        self.config = config
        self.shapes = shapes
        d = config.d
        ffn = config.ffn_mult * d
        layers = {"visual": config.n_v, "audio": config.n_a, "text": config.n_t}
        self.encoders = nn.ModuleDict(
            {
                m: ModalityEncoder(
                    ModalityConfig(m, shapes.dims[m], shapes.lengths[m], layers[m], config.encoder_heads, d, ffn,
                                   config.dropout)
                )
                for m in MODALITY_KEYS
            }
        )
        tau_c = shapes.common_length(config.common_length)
        self.common_length = tau_c
        if not config.disable_amr:
            aligned = len(set(shapes.lengths.values())) == 1
            self.amr = amr.AdversarialRefinement(
                d, shapes.num_labels, config.amr_hidden_layers, config.disc_bias,
                shapes.lengths["visual"] if aligned else None,
            )
        stream_lengths = {MODALITY_KEYS[m]: shapes.lengths[m] for m in MODALITY_KEYS}
        stream_lengths["c"] = tau_c
        self.fusion = HierarchicalFusion(
            d, config.encoder_heads, config.n_c, config.fusion_order, ffn, config.dropout, config.token_mode,
            stream_lengths, use_tokens=not config.disable_token_embeddings,
        )
        self.fused_length = sum(stream_lengths.values())
        if config.identical_head:
            self.dense = nn.Linear(d, shapes.num_labels)
        else:
            self.label_attn = LabelSelfAttention(shapes.num_labels, d, config.h_l,
                                                 use_correlation=not config.disable_label_correlation)
            self.decoder = LabelGuidedDecoder(d, config.h_m, ffn, config.dropout,
                                              use_modal_attention=not config.disable_label_modal_attention)
            self.classifier = PerLabelClassifier(shapes.num_labels, d)

    def set_dropout_generator(self, generator: torch.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.generator = generator

    def named_parameter_list(self):
        return list(self.named_parameters())

    def forward(self, visual, audio, text, labels: torch.Tensor | None = None) -> ForwardOutput:
        feats = {"visual": visual, "audio": audio, "text": text}
        uni = {MODALITY_KEYS[m]: self.encoders[m](x) for m, x in feats.items()}
        reps = None
        if self.config.disable_amr:
            streams = dict(uni)
            streams["c"] = sum(temporal_pool(uni[k], self.common_length) for k in amr.KEYS)
        else:
            reps = self.amr.refine(uni["v"], uni["a"], uni["t"])
            streams = dict(reps.private)
            streams["c"] = sum(temporal_pool(reps.common[k], self.common_length) for k in amr.KEYS)
        fused = self.fusion(streams)

        correlations = None
        if self.config.identical_head:
            probs = dc.sigmoid(self.dense(fused.mean(dim=-1)))
        else:
            label_table, correlations = self.label_attn()
            tailored = self.decoder(label_table, fused)
            probs = self.classifier(tailored)

        out = ForwardOutput(probs, fused, uni, reps, correlations)
        if labels is not None:
            out.losses = self.losses(out, labels)
        return out

    def losses(self, out: ForwardOutput, labels: torch.Tensor) -> dict[str, torch.Tensor]:
        cfg = self.config
        l_ml = loss_ml(out.probs, labels)
        zero = torch.zeros((), dtype=l_ml.dtype)
        if cfg.disable_amr:
            l_c = l_p = l_diff = l_cml = zero
        else:
            reps = out.reps
            l_c = amr.loss_common(reps.common, self.amr.discriminator)
            l_p = amr.loss_private(reps.private, self.amr.discriminator)
            l_diff = amr.loss_diff(reps.common, reps.private, cfg.diff_sign)
            l_cml = amr.loss_cml(reps.common, labels, self.amr.semantic)
        l_all = total_loss(l_ml, l_c, l_p, l_diff, l_cml, cfg)
        return {"L_ml": l_ml, "L_C": l_c, "L_P": l_p, "L_diff": l_diff, "L_cml": l_cml, "L_All": l_all}


def build_model(config: ModelConfig, shapes: InputShapes, seed: int | None = None) -> TailorModel:
    """Construct a model with parameters drawn deterministically from ``seed``."""
    seed = config.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TailorModel(config, shapes)
    return model.to(dc.dtype_for(config.precision))
