"""Stacked encoder-decoder network with cross-stage aggregation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from spgnet.attention import SPG, GuidedAttentionBundle, Passthrough, SPGConfig
from spgnet.backbone import EncoderSpec, GlobalContext, PoolingStrategy, ResNetEncoder, check_pyramid, conv_bn
from spgnet.decoder import DecoderSpec, make_decoder, upsample_to

LINKS = ("spg", "plain", "se", "ge")


@dataclass
class StagePlan:
    """One encoder-decoder stage and the link that feeds the next stage.

    ``link`` is ``None`` for the final stage, which carries the prediction
    head instead.  ``spg`` is required when ``link == "spg"``.
    """

    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    link: str | None = None
    spg: SPGConfig | None = None
    se_reduction: int = 16
    ge_extent: int | None = None

    def __post_init__(self):
        if self.spg is not None and self.link is None:
            self.link = "spg"
        if self.link is not None and self.link not in LINKS:
            raise ValueError(f"unknown stage link {self.link!r}")
        if self.link == "spg" and self.spg is None:
            raise ValueError("an 'spg' link needs an SPGConfig")
        if self.link not in (None, "spg") and self.spg is not None:
            raise ValueError(f"SPGConfig given for a {self.link!r} link")

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "link": self.link,
            "spg": None if self.spg is None else self.spg.to_dict(),
            "se_reduction": self.se_reduction,
            "ge_extent": self.ge_extent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        d = dict(d)
        spg = d.pop("spg", None)
        return cls(
            encoder=EncoderSpec(**d.pop("encoder", {})),
            decoder=DecoderSpec(**d.pop("decoder", {})),
            spg=None if spg is None else SPGConfig(**spg),
            **d,
        )


@dataclass
class NetworkPlan:
    stages: list[StagePlan]
    num_classes: int
    csfa_enabled: bool = True
    global_context: bool = True

    def __post_init__(self):
        self.stages = [s if isinstance(s, StagePlan) else StagePlan.from_dict(s) for s in self.stages]
        if not self.stages:
            raise ValueError("a network needs at least one stage")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        widths = {s.decoder.channels for s in self.stages}
        if len(widths) != 1:
            raise ValueError(f"decoder widths differ across stages: {sorted(widths)}")
        for i, stage in enumerate(self.stages):
            final = i == len(self.stages) - 1
            if final and stage.link is not None:
                raise ValueError("the final stage predicts and cannot carry a stage link")
            if not final and stage.link is None:
                raise ValueError(f"stage {i + 1} needs a link (spg/plain/se/ge) to the next stage")
            if stage.spg is not None:
                if stage.spg.num_classes != self.num_classes:
                    raise ValueError("SPG class count differs from the network's")
                if stage.spg.decoder_channels != stage.decoder.channels:
                    raise ValueError("SPG width differs from the decoder width")

    @property
    def channels(self) -> int:
        return self.stages[0].decoder.channels

    @classmethod
    def stacked(
        cls,
        depths=(18, 18),
        channels=128,
        num_classes=19,
        link="spg",
        variant="sigmoid",
        identity_path=True,
        supervised=True,
        width_multiplier=1,
        decoder_style="upsample",
        csfa_enabled=True,
        global_context=True,
    ) -> "NetworkPlan":
        """Plan ``len(depths)`` stages sharing one decoder width and link kind."""
        stages = []
        for i, depth in enumerate(depths):
            final = i == len(depths) - 1
            spg = None
            if not final and link == "spg":
                spg = SPGConfig(num_classes, channels, variant, identity_path, supervised)
            stages.append(
                StagePlan(
                    EncoderSpec(depth, width_multiplier=width_multiplier),
                    DecoderSpec(channels, decoder_style),
                    link=None if final else link,
                    spg=spg,
                )
            )
        return cls(stages, num_classes, csfa_enabled, global_context)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "csfa_enabled": self.csfa_enabled,
            "global_context": self.global_context,
            "stages": [s.to_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkPlan":
        d = dict(d)
        return cls(stages=[StagePlan.from_dict(s) for s in d.pop("stages")], **d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ForwardOutput:
    """Per-stage stride-4 logits (``None`` where a stage has no classifier) and
    the final logits at input resolution."""

    per_stage_logits: list[torch.Tensor | None]
    final_prediction: torch.Tensor
    supervised: list[bool]
    attention: list[GuidedAttentionBundle | None]


class CrossStageAggregation(nn.Module):
    """Adds 1x1-projected encoder and decoder features of the previous stage."""

    def __init__(self, prev_encoder_channels, prev_decoder_channels, encoder_channels):
        super().__init__()
        self.enc = nn.ModuleList(
            nn.Conv2d(p, c, 1, bias=False) for p, c in zip(prev_encoder_channels, encoder_channels)
        )
        self.dec = nn.ModuleList(nn.Conv2d(prev_decoder_channels, c, 1, bias=False) for c in encoder_channels)

    def aggregate(self, level, current, prev_encoder, prev_decoder):
        if current.shape[-2:] != prev_encoder.shape[-2:] or current.shape[-2:] != prev_decoder.shape[-2:]:
            raise ValueError(
                f"CSFA level {level}: sizes {tuple(current.shape[-2:])}, {tuple(prev_encoder.shape[-2:])}, "
                f"{tuple(prev_decoder.shape[-2:])} do not match"
            )
        return current + self.enc[level](prev_encoder) + self.dec[level](prev_decoder)


class Stage(nn.Module):
    def __init__(self, plan: StagePlan, num_classes, first, prev: StagePlan | None, csfa, global_context):
        super().__init__()
        d = plan.decoder.channels
        self.entry = None if first else conv_bn(d, plan.encoder.stem_channels, 1)
        self.encoder = ResNetEncoder(plan.encoder, stem=first)
        enc_channels = plan.encoder.channels
        use_context = global_context and plan.decoder.style == "upsample"
        self.context = GlobalContext(enc_channels[-1], d) if use_context else None
        self.decoder = make_decoder(enc_channels, plan.decoder)
        self.csfa = None
        if prev is not None and csfa:
            self.csfa = CrossStageAggregation(prev.encoder.channels, prev.decoder.channels, enc_channels)
        self.link_kind = plan.link
        self.supervised = plan.link is None or (plan.spg is not None and plan.spg.supervised)
        if plan.link is None:
            self.head = nn.Conv2d(d, num_classes, 1)
        elif plan.link == "spg":
            self.spg = SPG(plan.spg)
        else:
            self.link = Passthrough(d, plan.link, plan.se_reduction, plan.ge_extent)

    def encode(self, x, prev_encoder=None, prev_decoder=None):
        if self.entry is not None:
            x = self.entry(x)
        else:
            x = self.encoder.stem(x)
        pyramid = []
        for i, stage in enumerate(self.encoder.stages):
            x = stage(x)
            if self.csfa is not None:
                x = self.csfa.aggregate(i, x, prev_encoder[i], prev_decoder[i])
            pyramid.append(x)
        return pyramid

    def forward(self, x, pooling, prev_encoder=None, prev_decoder=None):
        pyramid = self.encode(x, prev_encoder, prev_decoder)
        context = None if self.context is None else self.context(pyramid[-1], pooling)
        x_d, levels = self.decoder(pyramid, context)
        if self.link_kind is None:
            return pyramid, levels, self.head(x_d), None, None
        if self.link_kind == "spg":
            bundle = self.spg(x_d)
            return pyramid, levels, bundle.logits, bundle, bundle.next_input
        return pyramid, levels, None, None, self.link(x_d)


class SPGNet(nn.Module):
    """N encoder-decoder stages; stage k+1 starts from stage k's link output at stride 4."""

    def __init__(self, plan: NetworkPlan):
        super().__init__()
        self.plan = plan
        self.pooling = PoolingStrategy()
        prev = None
        stages = []
        for i, sp in enumerate(plan.stages):
            stages.append(Stage(sp, plan.num_classes, i == 0, prev, plan.csfa_enabled, plan.global_context))
            prev = sp
        self.stages = nn.ModuleList(stages)

    def set_pooling(self, pooling: PoolingStrategy):
        self.pooling = pooling
        return self

    def forward(self, image) -> ForwardOutput:
        size = image.shape[-2:]
        x, prev_enc, prev_dec = image, None, None
        logits, attention = [], []
        for k, stage in enumerate(self.stages):
            prev_enc, prev_dec, stage_logits, bundle, x = stage(x, self.pooling, prev_enc, prev_dec)
            if k == 0:
                check_pyramid(prev_enc, size)
            logits.append(stage_logits)
            attention.append(bundle)
        final = upsample_to(logits[-1], size)
        return ForwardOutput(logits, final, [s.supervised for s in self.stages], attention)


def build(plan: NetworkPlan) -> SPGNet:
    return SPGNet(plan)
