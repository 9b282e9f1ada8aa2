"""The unfolding network: initialization, then K blocks of GDM -> DRM -> PMM.

Tensors follow the ``(batch, channel, H, W)`` layout.  A factor stack is a
single ``(B, m+1, H, W)`` tensor with the distance factor in channel 0.
Sparse observations enter as their scatter map ``y_map`` (the adjoint of the
sampling operator applied to ``y``) together with the binary sampling mask.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator

from ..objectives import ShadowFactor
from .layers import ConvBlock, StageBlock, conv2, soft_threshold


class ModelConfig(BaseModel):
    K: int = Field(3, ge=1)
    C: int = Field(32, ge=1)
    m: int = Field(2, ge=0)
    unet_depth: int = Field(3, ge=1)
    base_channels: int = Field(32, ge=1)
    H: int = Field(256, ge=2)
    W: int = Field(256, ge=2)
    use_drm: bool = True

    @model_validator(mode="after")
    def _divisible(self):
        f = 2 ** (self.unet_depth - 1)
        if self.H % f or self.W % f:
            raise ValueError(f"H and W must be divisible by 2**(unet_depth-1) = {f}")
        return self


def _inv_softplus(x: float) -> float:
    return math.log(math.expm1(x))


class InitModule(nn.Module):
    """Produces the initial factors, the initial map X^0 and the feature v^0."""

    def __init__(self, m: int, channels: int, with_feature: bool = True):
        super().__init__()
        self.m = m
        in_ch = m + 3  # y_map, mask, i earlier factors, m+1-i raw inputs
        self.factor_nets = nn.ModuleList(conv2(in_ch, channels, 1) for _ in range(m + 1))
        self.fuse = nn.Conv2d(m + 1, 1, 1)
        self.lift = nn.Sequential(ConvBlock(m + 1, channels), ConvBlock(channels, channels)) if with_feature else None

    def forward(self, y_map, mask, env):
        factors = []
        for i, net in enumerate(self.factor_nets):
            x = torch.cat([y_map, mask, *factors, env[:, i:]], dim=1)
            factors.append(net(x))
        stack = torch.cat(factors, dim=1)
        x0 = self.fuse(stack)
        v0 = self.lift(stack) if self.lift is not None else None
        return stack, x0, v0


class GDM(nn.Module):
    """Learnable-step sequential gradient update with soft thresholding.

    ``eps_raw`` is unconstrained; the applied threshold is ``softplus(eps_raw)``.
    """

    def __init__(self, m: int, beta: float = 0.5, eps: float = 1e-3):
        super().__init__()
        self.beta = nn.Parameter(torch.full((m + 1,), beta))
        self.eps_raw = nn.Parameter(torch.tensor(_inv_softplus(eps)))

    @property
    def eps(self) -> torch.Tensor:
        return F.softplus(self.eps_raw)

    def forward(self, stack, y_map, mask):
        eps = self.eps
        factors = list(stack.unbind(dim=1))
        for i in range(len(factors)):
            total = torch.stack(factors, dim=1).sum(dim=1)
            grad = mask[:, 0] * total - y_map[:, 0]
            factors[i] = soft_threshold(factors[i] - self.beta[i] * grad, eps)
        return torch.stack(factors, dim=1)


class DRM(nn.Module):
    """Attention-guided fusion of the factor stack into a rough map.

    The previous factoring feature is reweighted channel-wise, then
    spatially, refined, and used to gate the freshly lifted feature.
    """

    def __init__(self, m: int, channels: int):
        super().__init__()
        self.lift = nn.Sequential(ConvBlock(m + 1, channels), ConvBlock(channels, channels))
        self.channel_fc = nn.Linear(channels, channels)
        self.spatial_conv = nn.Conv2d(2, 1, 7, padding=3)
        self.refine = ConvBlock(channels, channels)
        self.dconv = ConvBlock(channels, channels, groups=channels)
        self.out = nn.Conv2d(channels, 1, 3, padding=1)

    def channel_attention(self, v):
        pooled = v.mean(dim=(2, 3)) + v.amax(dim=(2, 3))
        return torch.sigmoid(self.channel_fc(pooled))[:, :, None, None]

    def spatial_attention(self, v):
        desc = torch.cat([v.mean(dim=1, keepdim=True), v.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial_conv(desc))

    def forward(self, stack, v_prev):
        v_new = self.lift(stack)
        v_ch = v_prev * self.channel_attention(v_prev)
        v_mod = self.refine(v_ch * self.spatial_attention(v_ch))
        d = self.dconv(v_mod)
        return self.out(v_new * torch.sigmoid(d) + d), v_new


class PlainFusion(nn.Module):
    """1x1 convolution replacing the DRM in ablations."""

    def __init__(self, m: int):
        super().__init__()
        self.conv = nn.Conv2d(m + 1, 1, 1)

    def forward(self, stack, v_prev):
        return self.conv(stack), v_prev


class PMM(nn.Module):
    """U-shaped proximal network built from stage blocks, with a global residual."""

    def __init__(self, base: int, depth: int):
        super().__init__()
        self.depth = depth
        ch = [base * 2 ** d for d in range(depth)]
        self.head_in = nn.Conv2d(1, base, 3, padding=1)
        self.enc = nn.ModuleList(StageBlock(c) for c in ch)
        self.down = nn.ModuleList(nn.Conv2d(ch[d], ch[d + 1], 3, stride=2, padding=1) for d in range(depth - 1))
        self.up = nn.ModuleList(
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch[d + 1], ch[d], 3, padding=1))
            for d in range(depth - 1)
        )
        self.fuse = nn.ModuleList(nn.Conv2d(2 * ch[d], ch[d], 1) for d in range(depth - 1))
        self.dec = nn.ModuleList(StageBlock(ch[d]) for d in range(depth - 1))
        self.head_out = nn.Conv2d(base, 1, 3, padding=1)

    def forward(self, x):
        f = self.head_in(x)
        skips = []
        for d, stage in enumerate(self.enc):
            f = stage(f)
            if d < self.depth - 1:
                skips.append(f)
                f = self.down[d](f)
        for d in reversed(range(self.depth - 1)):
            f = self.up[d](f)
            f = self.dec[d](self.fuse[d](torch.cat([f, skips[d]], dim=1)))
        return x + self.head_out(f)


class UnfoldingBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.gdm = GDM(cfg.m)
        self.drm = DRM(cfg.m, cfg.C) if cfg.use_drm else PlainFusion(cfg.m)
        self.pmm = PMM(cfg.base_channels, cfg.unet_depth)

    def forward(self, stack, v, y_map, mask):
        stack = self.gdm(stack, y_map, mask)
        rough, v = self.drm(stack, v)
        return stack, self.pmm(rough), v, rough


class RadioDUNOutput(NamedTuple):
    x_hat: torch.Tensor
    x_sigma: torch.Tensor
    history: list
    stack: torch.Tensor
    x0: torch.Tensor


class RadioDUN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.m < 1:
            raise ValueError("the network needs at least one obstacle factor (m >= 1)")
        self.cfg = cfg
        self.init = InitModule(cfg.m, cfg.C, with_feature=cfg.use_drm)
        self.blocks = nn.ModuleList(UnfoldingBlock(cfg) for _ in range(cfg.K))
        self.shadow = ShadowFactor(cfg.m)

    def check_inputs(self, y_map, mask, env):
        c = self.cfg
        if y_map.dim() != 4 or y_map.shape[1] != 1:
            raise ValueError(f"y_map must be (B, 1, H, W), got {tuple(y_map.shape)}")
        if mask.shape != y_map.shape:
            raise ValueError("mask and y_map shapes differ")
        if env.shape[0] != y_map.shape[0] or env.shape[1] != c.m + 1 or env.shape[2:] != y_map.shape[2:]:
            raise ValueError(f"env must be (B, {c.m + 1}, H, W), got {tuple(env.shape)}")
        f = 2 ** (c.unet_depth - 1)
        if y_map.shape[2] % f or y_map.shape[3] % f:
            raise ValueError(f"spatial size must be divisible by {f}")

    def forward(self, y_map, mask, env) -> RadioDUNOutput:
        self.check_inputs(y_map, mask, env)
        stack, x0, v = self.init(y_map, mask, env)
        history = []
        x_hat = x0
        for block in self.blocks:
            stack, x_hat, v, _ = block(stack, v, y_map, mask)
            history.append(x_hat)
        return RadioDUNOutput(x_hat, self.shadow(stack), history, stack, x0)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
