"""Fourier high-pass edge operator.

``extract_edges`` is FFT -> radial high-pass mask -> inverse FFT (real part).
It is linear and, with a hard mask, idempotent.  ``edge_condition`` adds the
per-image unit max-abs rescale used when an edge map is fed to the denoiser.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

# Rec.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class HighPassConfig:
    cutoff_fraction: float = 0.05
    soft_width: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.cutoff_fraction < 1.0):
            raise ValueError(f"cutoff_fraction must lie in (0, 1), got {self.cutoff_fraction}")
        if self.soft_width < 0.0:
            raise ValueError(f"soft_width must be >= 0, got {self.soft_width}")

    def to_dict(self) -> dict:
        return asdict(self)


def radial_frequency(height: int, width: int, dtype=torch.float64) -> torch.Tensor:
    """Radial frequency of each FFT bin, normalised so the per-axis Nyquist is 1."""
    fy = torch.fft.fftfreq(height, dtype=dtype).abs() * 2.0
    fx = torch.fft.fftfreq(width, dtype=dtype).abs() * 2.0
    return torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def highpass_mask(height: int, width: int, cfg: HighPassConfig | None = None, dtype=torch.float64) -> torch.Tensor:
    """Frequency-domain mask in unshifted FFT layout (DC at [0, 0])."""
    cfg = cfg or HighPassConfig()
    if not isinstance(cfg, HighPassConfig):
        raise TypeError(f"expected HighPassConfig, got {type(cfg).__name__}")
    if height < 2 or width < 2:
        raise ValueError(f"mask needs at least 2x2 bins, got {height}x{width}")
    r = radial_frequency(height, width, dtype)
    lo = cfg.cutoff_fraction
    if cfg.soft_width == 0.0:
        mask = (r >= lo).to(dtype)
    else:
        ramp = ((r - lo) / cfg.soft_width).clamp(0.0, 1.0)
        mask = 0.5 - 0.5 * torch.cos(math.pi * ramp)
    mask[0, 0] = 0.0
    return mask


def to_luminance(image: torch.Tensor) -> torch.Tensor:
    """Collapse a channel axis at dim -3 to one luma channel; 1-channel input passes through."""
    c = image.shape[-3]
    if c == 1:
        return image
    if c != 3:
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=image.dtype, device=image.device).view(3, 1, 1)
    return (image * w).sum(dim=-3, keepdim=True)


def extract_edges(image, cfg: HighPassConfig | None = None):
    """Edge map of an image.

    Accepts ``(H, W)``, ``(C, H, W)`` or ``(B, C, H, W)`` arrays or tensors with
    C in {1, 3}.  Returns the same layout with one channel (2-D stays 2-D) and
    the same container type as the input.  Differentiable for tensor input.
    """
    is_numpy = isinstance(image, np.ndarray)
    x = torch.as_tensor(image) if is_numpy else image
    if not torch.is_floating_point(x):
        x = x.to(torch.float32)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim not in (3, 4):
        raise ValueError(f"expected 2-, 3- or 4-D image, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"image too small for edge extraction: {h}x{w}")
    lum = to_luminance(x)
    mask = highpass_mask(h, w, cfg, dtype=torch.float64).to(lum.device)
    spec = torch.fft.fft2(lum.to(torch.float64))
    out = torch.fft.ifft2(spec * mask).real.to(x.dtype)
    if squeeze:
        out = out[0]
    return out.numpy() if is_numpy else out


def normalize_edges(edges: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Rescale each image (last two dims, all channels) to unit max-abs value."""
    peak = edges.abs().amax(dim=(-2, -1), keepdim=True)
    if edges.ndim >= 3:
        peak = peak.amax(dim=-3, keepdim=True)
    return edges / peak.clamp_min(eps)


def edge_condition(image: torch.Tensor, cfg: HighPassConfig | None = None) -> torch.Tensor:
    """Edge map as fed to the denoiser: high-pass then unit max-abs rescale."""
    return normalize_edges(extract_edges(image, cfg))
