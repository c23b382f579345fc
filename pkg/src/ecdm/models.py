"""Conditional noise predictor (small UNet) and the patch discriminator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class DenoiserConfig:
    image_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (2,)
    time_embed_dim: int = 128
    num_groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if self.image_channels < 1 or self.base_channels < 1 or self.time_embed_dim < 2:
            raise ValueError("channel counts and embedding size must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty list of positive ints")
        bad = [a for a in self.attention_levels if not 0 <= a < len(self.channel_multipliers)]
        if bad:
            raise ValueError(f"attention levels {bad} outside 0..{len(self.channel_multipliers) - 1}")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.num_groups:
                raise ValueError(f"{self.base_channels * m} channels not divisible into {self.num_groups} groups")

    @property
    def in_channels(self) -> int:
        # image channels + one edge-condition channel
        return self.image_channels + 1

    @property
    def out_channels(self) -> int:
        return self.image_channels

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    base_channels: int = 32
    n_layers: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: ``[sin(t w_k), cos(t w_k)]`` with w_k from 1 down to 1/10000.

    ``t`` may be a scalar or a 1-D tensor; the result has shape ``(dim,)`` or
    ``(len(t), dim)`` respectively.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    scalar = not isinstance(t, torch.Tensor) or t.ndim == 0
    tt = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    if (tt < 0).any():
        raise ValueError("timesteps must be non-negative")
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1)
    else:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1))
    args = tt[:, None] * freqs[None, :].to(tt.device)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb[0] if scalar else emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        # per-block Linear + sigmoid that maps the step embedding to this block's width
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + torch.sigmoid(self.temb(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """Edge-conditioned UNet predicting the injected noise.

    The edge map is concatenated to the noisy image as an extra input channel.
    The step embedding goes sinusoid -> Linear + sigmoid, and every residual
    block adds its own Linear + sigmoid projection of that vector.
    """

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        g, temb_dim = cfg.num_groups, cfg.time_embed_dim
        self.time_mlp = nn.Linear(temb_dim, temb_dim)
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = chans[0]
        for level, ch in enumerate(chans):
            self.down_blocks.append(ResBlock(prev, ch, temb_dim, g))
            self.down_attn.append(AttnBlock(ch, g) if level in cfg.attention_levels else nn.Identity())
            if level < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        self.mid = ResBlock(prev, prev, temb_dim, g)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(chans))):
            ch = chans[level]
            self.up_blocks.append(ResBlock(prev + ch, ch, temb_dim, g))
            self.up_attn.append(AttnBlock(ch, g) if level in cfg.attention_levels else nn.Identity())
            if level > 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))
            prev = ch

        self.norm_out = nn.GroupNorm(g, prev)
        self.conv_out = nn.Conv2d(prev, cfg.out_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, condition: torch.Tensor, t) -> torch.Tensor:
        if x_t.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got {tuple(x_t.shape)}")
        if condition.ndim == 3:
            condition = condition[:, None]
        if condition.shape[0] == 1 and x_t.shape[0] > 1:
            condition = condition.expand(x_t.shape[0], -1, -1, -1)
        if condition.shape[-2:] != x_t.shape[-2:] or condition.shape[0] != x_t.shape[0]:
            raise ValueError(f"condition shape {tuple(condition.shape)} does not match image {tuple(x_t.shape)}")
        if condition.shape[1] != 1:
            raise ValueError("condition must be a single-channel edge map")
        if x_t.shape[1] != self.cfg.image_channels:
            raise ValueError(f"expected {self.cfg.image_channels} image channels, got {x_t.shape[1]}")
        f = self.cfg.downsample_factor
        if x_t.shape[-2] % f or x_t.shape[-1] % f:
            raise ValueError(f"spatial dims {tuple(x_t.shape[-2:])} must be divisible by {f}")

        t = torch.as_tensor(t, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        if (t < 1).any():
            raise ValueError("diffusion step must be >= 1")
        temb = torch.sigmoid(self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim).to(x_t.dtype)))

        h = self.conv_in(torch.cat([x_t, condition.to(x_t.dtype)], dim=1))
        skips = []
        for level, (block, attn) in enumerate(zip(self.down_blocks, self.down_attn)):
            h = attn(block(h, temb))
            skips.append(h)
            if level < len(self.downsamples):
                h = self.downsamples[level](h)
        h = self.mid(h, temb)
        for i, (block, attn) in enumerate(zip(self.up_blocks, self.up_attn)):
            h = attn(block(torch.cat([h, skips.pop()], dim=1), temb))
            if i < len(self.upsamples):
                h = self.upsamples[i](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def denoiser_forward(model: Denoiser, x_t: torch.Tensor, condition: torch.Tensor, t, T: int | None = None) -> torch.Tensor:
    if T is not None and int(torch.as_tensor(t).max()) > T:
        raise ValueError(f"diffusion step {t} exceeds T={T}")
    return model(x_t, condition, t)


class PatchDiscriminator(nn.Module):
    """Strided convolutional patch classifier; each output cell sees a local window.

    No normalisation layers: any statistic pooled over the image would make a
    patch score depend on pixels outside its receptive field.
    """

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        layers: list[nn.Module] = [
            nn.Conv2d(cfg.in_channels, cfg.base_channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        ]
        ch = cfg.base_channels
        for i in range(1, cfg.n_layers):
            stride = 2 if i < cfg.n_layers - 1 else 1
            nxt = cfg.base_channels * min(2**i, 8)
            layers += [nn.Conv2d(ch, nxt, 4, stride=stride, padding=1), nn.LeakyReLU(0.2)]
            ch = nxt
        layers.append(nn.Conv2d(ch, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def logits(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(image.shape)}")
        return self.net(image)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(image))

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                rf += (m.kernel_size[0] - 1) * jump
                jump *= m.stride[0]
        return rf


def discriminator_forward(model: PatchDiscriminator, image: torch.Tensor) -> torch.Tensor:
    return model(image)


def count_params(params) -> int:
    """Number of scalar parameters in a module, a mapping of tensors, or an iterable of tensors."""
    if isinstance(params, nn.Module):
        tensors: Iterable[torch.Tensor] = params.parameters()
    elif isinstance(params, Mapping):
        tensors = params.values()
    else:
        tensors = params
    return sum(p.numel() for p in tensors)
