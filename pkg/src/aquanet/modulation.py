"""Residual affine feature modulation: adjust a feature map F1 conditioned on
a second map F2 as  out = alpha * F1 + beta + F1,  with alpha and beta
predicted from F2 by a small parameter network.

The parameter network runs at 1/8 of the conditioning resolution (three 2x
average-pooling downsamples interleaved with pointwise convs and two leaky
rectifiers), then two pointwise-conv heads emit alpha and beta, which are
bilinearly resampled to the target shape. Exactly six 1x1 convolutions and
two leaky rectifiers sit in the graph; the final conv of each head is
zero-initialized, so a fresh block is an exact identity on F1.
"""

from __future__ import annotations

import copy
import math
from typing import Callable, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteGradient, ShapeMismatch


class ModulationParams(NamedTuple):
    alpha: torch.Tensor
    beta: torch.Tensor


def _zero_init_conv(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    conv._zero_init = True  # honored by deterministic re-initialization
    return conv


class ModulationNet(nn.Module):
    """Predicts (alpha, beta) for the modulation of a target feature map from
    a conditioning map with ``in_channels`` channels."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 16,
                 negative_slope: float = 0.01):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.negative_slope = negative_slope
        self.pool = nn.AvgPool2d(2, stride=2, ceil_mode=True)
        self.trunk_in = nn.Conv2d(in_channels, hidden, kernel_size=1)
        self.trunk_mid = nn.Conv2d(hidden, hidden, kernel_size=1)
        self.alpha_hidden = nn.Conv2d(hidden, hidden, kernel_size=1)
        self.alpha_out = _zero_init_conv(nn.Conv2d(hidden, out_channels, kernel_size=1))
        self.beta_hidden = nn.Conv2d(hidden, hidden, kernel_size=1)
        self.beta_out = _zero_init_conv(nn.Conv2d(hidden, out_channels, kernel_size=1))
        for conv in (self.trunk_in, self.trunk_mid, self.alpha_hidden, self.beta_hidden):
            nn.init.kaiming_normal_(conv.weight, a=negative_slope, mode="fan_in",
                                    nonlinearity="leaky_relu")
            nn.init.zeros_(conv.bias)

    def forward(self, cond: torch.Tensor, out_hw: tuple[int, int]) -> ModulationParams:
        """alpha, beta of spatial size ``out_hw`` (and ``out_channels``),
        computed from ``cond`` at 1/8 resolution."""
        squeeze = cond.dim() == 3
        if squeeze:
            cond = cond.unsqueeze(0)
        if cond.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"conditioning map has {cond.shape[1]} channels, net expects {self.in_channels}"
            )
        x = self.pool(cond)
        x = F.leaky_relu(self.trunk_in(x), self.negative_slope)
        x = self.pool(x)
        x = F.leaky_relu(self.trunk_mid(x), self.negative_slope)
        x = self.pool(x)
        alpha = self.alpha_out(self.alpha_hidden(x))
        beta = self.beta_out(self.beta_hidden(x))
        if tuple(alpha.shape[-2:]) != tuple(out_hw):
            alpha = F.interpolate(alpha, size=tuple(out_hw), mode="bilinear",
                                  align_corners=False)
            beta = F.interpolate(beta, size=tuple(out_hw), mode="bilinear",
                                 align_corners=False)
        if squeeze:
            alpha, beta = alpha.squeeze(0), beta.squeeze(0)
        return ModulationParams(alpha, beta)


def modulation_params(net: ModulationNet, f2: torch.Tensor,
                      target_shape: Sequence[int]) -> ModulationParams:
    """(alpha, beta) matching ``target_shape`` = (C, H, W)."""
    c, h, w = target_shape
    if c != net.out_channels:
        raise ShapeMismatch(f"target has {c} channels, net emits {net.out_channels}")
    return net(f2, (h, w))


def modulate(net: ModulationNet, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """alpha * f1 + beta + f1 with (alpha, beta) predicted from f2. Output
    shape equals f1's; a freshly constructed net returns f1 unchanged."""
    if f1.dim() not in (3, 4) or f2.dim() not in (3, 4):
        raise ShapeMismatch("feature maps must be (C,H,W) or (N,C,H,W)")
    alpha, beta = modulation_params(net, f2, f1.shape[-3:])
    if f1.dim() == 4 and alpha.dim() == 3:
        alpha, beta = alpha.unsqueeze(0), beta.unsqueeze(0)
    if f1.dim() == 3 and alpha.dim() == 4:
        if alpha.shape[0] != 1:
            raise ShapeMismatch("batched conditioning with unbatched target")
        alpha, beta = alpha.squeeze(0), beta.squeeze(0)
    return alpha * f1 + beta + f1


def _as_output_tuple(out) -> tuple[torch.Tensor, ...]:
    if isinstance(out, torch.Tensor):
        return (out,)
    return tuple(out)


def grad_check(block: Callable, input_shapes: Sequence[Sequence[int]],
               epsilon: float = 1e-4, seed: int = 0) -> float:
    """Compare analytic gradients of loss = sum(outputs) against central
    finite differences, over every input element and every parameter of
    ``block``. Returns the max scaled error
    |analytic - numeric| / max(|numeric|, 1).

    Runs in double precision on a deepcopy of the block; ``block`` itself is
    left untouched.
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    if isinstance(block, nn.Module):
        block = copy.deepcopy(block).double()
        params = list(block.parameters())
    else:
        params = []
    gen = torch.Generator().manual_seed(seed)
    inputs = [torch.randn(tuple(s), generator=gen, dtype=torch.float64,
                          requires_grad=True) for s in input_shapes]
    leaves = inputs + params

    loss = sum(o.sum() for o in _as_output_tuple(block(*inputs)))
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)
    analytic = [torch.zeros_like(leaf) if g is None else g
                for leaf, g in zip(leaves, analytic)]

    def loss_value() -> float:
        with torch.no_grad():
            return float(sum(o.sum() for o in _as_output_tuple(block(*inputs))))

    max_err = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.view(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + epsilon
            plus = loss_value()
            flat[i] = orig - epsilon
            minus = loss_value()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            a = gflat[i].item()
            if not (math.isfinite(a) and math.isfinite(numeric)):
                raise NonFiniteGradient(f"non-finite gradient at element {i} of a leaf")
            err = abs(a - numeric) / max(abs(numeric), 1.0)
            if err > max_err:
                max_err = err
    return max_err


class ModulateBlock(nn.Module):
    """ModulationNet + the modulate arithmetic as one differentiable block,
    mainly for gradient checking the composite."""

    def __init__(self, net: ModulationNet):
        super().__init__()
        self.net = net

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        return modulate(self.net, f1, f2)
