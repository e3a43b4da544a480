"""Two-path waterbody segmentation network.

Wiring: a stride-8 convolutional backbone emits an early low-level feature
F_l, a penultimate-stage feature for auxiliary supervision, and the final
feature F. F is processed by two paths (aquatic / non-aquatic classes): per
path, F is optionally modulated by that path's half of the F_l channels
(low-level modulation), a multi-scale context head emits class logits, the
two logit maps are optionally cross-modulated in parallel (each conditioned
on the other's ORIGINAL logits, no weight sharing), then concatenated,
reordered to taxonomy id order and bilinearly upsampled to the input size.

All classifier convs and all modulation output convs are zero-initialized,
so at step 0 every configuration emits identical (all-zero) logits and the
modulations are exact identities.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadInputShape, ConfigInvalid, ShapeMismatch
from .modulation import ModulationNet, _zero_init_conv, modulate
from .taxonomy import ClassTaxonomy, path_split, reassembly_permutation

STRIDE_MULTIPLE = 32  # required input divisibility
OUTPUT_STRIDE = 8


class BackboneOutput(NamedTuple):
    low_level: torch.Tensor  # early-stage feature, stride 8
    aux: torch.Tensor        # penultimate-stage feature, stride 8
    main: torch.Tensor       # final feature F, stride 8


@dataclass
class AquaNetConfig:
    """Model shape and component toggles. Toggles are independent;
    cross-path modulation without two paths is a documented no-op."""

    backbone_widths: tuple = (16, 24, 32, 48, 64)
    head_width: int = 32
    head_dilations: tuple = (1, 12, 24, 36)
    mod_hidden: int = 16
    two_paths: bool = True
    low_level_modulation: bool = True
    cross_path_modulation: bool = True
    aux_weight: float = 0.4

    def validate(self) -> "AquaNetConfig":
        if len(self.backbone_widths) != 5 or any(w < 1 for w in self.backbone_widths):
            raise ConfigInvalid(f"backbone_widths must be 5 positive ints, got {self.backbone_widths}")
        if self.head_width < 1 or self.mod_hidden < 1:
            raise ConfigInvalid("head_width and mod_hidden must be positive")
        if any(d < 1 for d in self.head_dilations):
            raise ConfigInvalid(f"dilations must be positive, got {self.head_dilations}")
        if self.aux_weight < 0:
            raise ConfigInvalid(f"aux_weight must be >= 0, got {self.aux_weight}")
        return self

    def to_dict(self) -> dict:
        return {
            "backbone_widths": list(self.backbone_widths),
            "head_width": self.head_width,
            "head_dilations": list(self.head_dilations),
            "mod_hidden": self.mod_hidden,
            "two_paths": self.two_paths,
            "low_level_modulation": self.low_level_modulation,
            "cross_path_modulation": self.cross_path_modulation,
            "aux_weight": self.aux_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AquaNetConfig":
        cfg = cls(
            backbone_widths=tuple(d.get("backbone_widths", cls.backbone_widths)),
            head_width=int(d.get("head_width", cls.head_width)),
            head_dilations=tuple(d.get("head_dilations", cls.head_dilations)),
            mod_hidden=int(d.get("mod_hidden", cls.mod_hidden)),
            two_paths=bool(d.get("two_paths", cls.two_paths)),
            low_level_modulation=bool(d.get("low_level_modulation", cls.low_level_modulation)),
            cross_path_modulation=bool(d.get("cross_path_modulation", cls.cross_path_modulation)),
            aux_weight=float(d.get("aux_weight", cls.aux_weight)),
        )
        return cfg.validate()


def _groups_for(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _conv_gn_relu(in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride,
                  padding=dilation, dilation=dilation, bias=False),
        nn.GroupNorm(_groups_for(out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Five conv stages: strides 2,2,2 then two dilated stride-1 stages, so
    every emitted feature sits at 1/8 of the input resolution."""

    def __init__(self, widths=(16, 24, 32, 48, 64)):
        super().__init__()
        w0, w1, w2, w3, w4 = widths
        self.stem = _conv_gn_relu(3, w0, stride=2)
        self.stage1 = _conv_gn_relu(w0, w1, stride=2)
        self.stage2 = _conv_gn_relu(w1, w2, stride=2)      # -> low_level
        self.stage3 = _conv_gn_relu(w2, w3, dilation=2)    # -> aux feature
        self.stage4 = _conv_gn_relu(w3, w4, dilation=4)    # -> main feature F
        self.low_level_channels = w2
        self.aux_channels = w3
        self.out_channels = w4

    def forward(self, image: torch.Tensor) -> BackboneOutput:
        h, w = image.shape[-2:]
        if h % STRIDE_MULTIPLE or w % STRIDE_MULTIPLE:
            raise BadInputShape(
                f"input {h}x{w} not divisible by {STRIDE_MULTIPLE}"
            )
        x = self.stem(image)
        x = self.stage1(x)
        low = self.stage2(x)
        aux = self.stage3(low)
        main = self.stage4(aux)
        return BackboneOutput(low_level=low, aux=aux, main=main)


class ContextHead(nn.Module):
    """Multi-scale context head: parallel dilated 3x3 branches plus a
    global-pooling branch, concatenated, projected, then a zero-initialized
    pointwise classifier emits the logits."""

    def __init__(self, in_channels: int, num_out: int, branch_width: int = 32,
                 dilations=(1, 12, 24, 36)):
        super().__init__()
        self.branches = nn.ModuleList(
            [_conv_gn_relu(in_channels, branch_width, dilation=d) for d in dilations]
        )
        self.gap_conv = nn.Conv2d(in_channels, branch_width, kernel_size=1)
        n_in = branch_width * (len(dilations) + 1)
        self.project = nn.Sequential(
            nn.Conv2d(n_in, branch_width * 2, kernel_size=1, bias=False),
            nn.GroupNorm(_groups_for(branch_width * 2), branch_width * 2),
            nn.ReLU(inplace=True),
        )
        self.classifier = _zero_init_conv(nn.Conv2d(branch_width * 2, num_out, kernel_size=1))
        self.num_out = num_out

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        outs = [b(feat) for b in self.branches]
        gap = F.relu(self.gap_conv(feat.mean(dim=(-2, -1), keepdim=True)))
        outs.append(gap.expand(-1, -1, feat.shape[-2], feat.shape[-1]))
        x = self.project(torch.cat(outs, dim=1))
        return self.classifier(x)


def cross_path(net_a: ModulationNet, net_b: ModulationNet,
               p1: torch.Tensor, p2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mutually modulate two score maps in parallel: both adjustments are
    conditioned on the ORIGINAL maps, and the two nets share no weights."""
    if p1.shape[-2:] != p2.shape[-2:]:
        raise ShapeMismatch(f"score maps differ spatially: {tuple(p1.shape)} vs {tuple(p2.shape)}")
    if net_a is net_b:
        raise ConfigInvalid("cross-path modulation nets must not share weights")
    return modulate(net_a, p1, p2), modulate(net_b, p2, p1)


class AquaNet(nn.Module):
    """Full model. forward(image) -> (class logits at input resolution in
    taxonomy id order, auxiliary logits at 1/8 resolution)."""

    def __init__(self, config: AquaNetConfig, taxonomy: ClassTaxonomy):
        super().__init__()
        config.validate()
        self.config = config
        self.num_classes = taxonomy.num_classes
        aquatic, rest = path_split(taxonomy)
        if config.two_paths and (not aquatic or not rest):
            raise ConfigInvalid(
                "two-path model needs both aquatic and non-aquatic classes; "
                f"got {len(aquatic)}/{len(rest)}"
            )
        self.backbone = Backbone(config.backbone_widths)
        c_main = self.backbone.out_channels
        c_low = self.backbone.low_level_channels
        hw = config.head_width

        if config.two_paths:
            self.aquatic_channels = len(aquatic)
            self.rest_channels = len(rest)
            # each path conditions on its own half of the low-level channels
            self.low_split = (c_low // 2, c_low - c_low // 2)
            if config.low_level_modulation and c_low < 2:
                raise ConfigInvalid("low-level modulation with two paths needs >= 2 low-level channels")
            if config.low_level_modulation:
                self.lm_aquatic = ModulationNet(self.low_split[0], c_main, config.mod_hidden)
                self.lm_rest = ModulationNet(self.low_split[1], c_main, config.mod_hidden)
            self.head_aquatic = ContextHead(c_main, len(aquatic), hw, config.head_dilations)
            self.head_rest = ContextHead(c_main, len(rest), hw, config.head_dilations)
            if config.cross_path_modulation:
                self.cm_aquatic = ModulationNet(len(rest), len(aquatic), config.mod_hidden)
                self.cm_rest = ModulationNet(len(aquatic), len(rest), config.mod_hidden)
            perm = torch.tensor(reassembly_permutation(taxonomy), dtype=torch.long)
            self.register_buffer("reassembly", perm)
        else:
            if config.low_level_modulation:
                self.lm_single = ModulationNet(c_low, c_main, config.mod_hidden)
            self.head = ContextHead(c_main, self.num_classes, hw, config.head_dilations)

        self.aux_head = nn.Sequential(
            _conv_gn_relu(self.backbone.aux_channels, hw),
            _zero_init_conv(nn.Conv2d(hw, self.num_classes, kernel_size=1)),
        )

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise BadInputShape(f"expected (N,3,H,W) or (3,H,W) image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        bb = self.backbone(image)
        cfg = self.config

        if cfg.two_paths:
            low_a, low_b = torch.split(bb.low_level, self.low_split, dim=1)
            feat_a = modulate(self.lm_aquatic, bb.main, low_a) if cfg.low_level_modulation else bb.main
            feat_b = modulate(self.lm_rest, bb.main, low_b) if cfg.low_level_modulation else bb.main
            p1 = self.head_aquatic(feat_a)
            p2 = self.head_rest(feat_b)
            if cfg.cross_path_modulation:
                p1, p2 = cross_path(self.cm_aquatic, self.cm_rest, p1, p2)
            logits = torch.cat([p1, p2], dim=1).index_select(1, self.reassembly)
        else:
            feat = modulate(self.lm_single, bb.main, bb.low_level) \
                if cfg.low_level_modulation else bb.main
            logits = self.head(feat)
            # cross_path_modulation has no effect without a second path

        p_final = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        p_aux = self.aux_head(bb.aux)
        if squeeze:
            p_final, p_aux = p_final.squeeze(0), p_aux.squeeze(0)
        return p_final, p_aux


def _name_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic, name-keyed initialization: identical weights for
    identically named submodules across configs and runs. Conv weights are
    fan-in-scaled normal; norm layers identity; modules marked for zero
    init (modulation outputs, classifiers) stay exactly zero."""
    for name, module in sorted(model.named_modules(), key=lambda kv: kv[0]):
        if getattr(module, "_zero_init", False):
            for p in module.parameters(recurse=False):
                nn.init.zeros_(p)
            continue
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            rng = _name_rng(seed, name)
            vals = rng.standard_normal(tuple(module.weight.shape)) * std
            with torch.no_grad():
                module.weight.copy_(torch.from_numpy(vals).to(module.weight.dtype))
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.GroupNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def build_model(config: AquaNetConfig, taxonomy: ClassTaxonomy, seed: int = 0) -> AquaNet:
    """Construct an AquaNet with reproducible weights."""
    return init_weights(AquaNet(config, taxonomy), seed)


def valid_eval_size(h: int, w: int) -> tuple[int, int]:
    """Smallest stride-valid size >= (h, w)."""
    m = STRIDE_MULTIPLE
    return (max(m, -(-h // m) * m), max(m, -(-w // m) * m))
