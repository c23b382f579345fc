"""Training objectives. Every squared norm is reduced as a mean over batch and pixels."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import torch

from .edges import HighPassConfig, extract_edges

log = logging.getLogger(__name__)

SCORE_EPS = 1e-7
DISCRIMINATOR_FORMS = ("squared_log", "log_likelihood")


@dataclass(frozen=True)
class LossWeights:
    lambda_real: float = 10.0
    lambda_diff: float = 0.1
    lambda_style: float = 100.0
    lambda_mod: float = 1.0
    lambda_edge: float = 1000.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).pow(2).mean()


def diffusion_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    return mse(eps_pred, eps_true)


def style_loss(x_hat_tir: torch.Tensor, x_tir: torch.Tensor) -> torch.Tensor:
    return mse(x_hat_tir, x_tir)


def clamp_scores(scores: torch.Tensor, eps: float = SCORE_EPS) -> tuple[torch.Tensor, bool]:
    """Clamp scores into [eps, 1 - eps]; also report whether anything was moved."""
    fired = bool(((scores < eps) | (scores > 1.0 - eps)).any())
    return scores.clamp(eps, 1.0 - eps), fired


def discriminator_loss(
    d_real: torch.Tensor,
    d_fake: torch.Tensor,
    w: LossWeights | None = None,
    form: str = "squared_log",
    return_clamped: bool = False,
):
    """Discriminator objective.

    ``squared_log`` (default): lambda_real * mean(log(d_real)^2) + mean(log(1 - d_fake)^2).
    ``log_likelihood``: the negated GAN log-likelihood,
    -(lambda_real * mean(log d_real) + mean(log(1 - d_fake))).
    Both are minimised by d_real -> 1 and d_fake -> 0.
    """
    w = w or LossWeights()
    if form not in DISCRIMINATOR_FORMS:
        raise ValueError(f"form must be one of {DISCRIMINATOR_FORMS}, got {form!r}")
    real, fired_r = clamp_scores(d_real)
    fake, fired_f = clamp_scores(d_fake)
    clamped = fired_r or fired_f
    if clamped:
        log.debug("discriminator scores clamped to [%g, %g]", SCORE_EPS, 1 - SCORE_EPS)
    if form == "squared_log":
        loss = w.lambda_real * torch.log(real).pow(2).mean() + torch.log1p(-fake).pow(2).mean()
    else:
        loss = -(w.lambda_real * torch.log(real).mean() + torch.log1p(-fake).mean())
    return (loss, clamped) if return_clamped else loss


def modality_loss(d_fake_vis: torch.Tensor) -> torch.Tensor:
    return (1.0 - d_fake_vis).pow(2).mean()


def edge_loss(x_vis: torch.Tensor, x_hat_vis: torch.Tensor, cfg: HighPassConfig | None = None) -> torch.Tensor:
    """MSE between the edge maps of the visible image and of its generated thermal counterpart."""
    return mse(extract_edges(x_hat_vis, cfg), extract_edges(x_vis, cfg))


def generator_objective(parts: Mapping[str, torch.Tensor | float], w: LossWeights | None = None):
    w = w or LossWeights()
    missing = {"diff", "style", "mod", "edge"} - set(parts)
    if missing:
        raise KeyError(f"missing loss parts: {sorted(missing)}")
    for name in ("diff", "style", "mod", "edge"):
        value = parts[name]
        finite = torch.isfinite(value).all() if isinstance(value, torch.Tensor) else math.isfinite(value)
        if not finite:
            raise FloatingPointError(f"non-finite loss part {name!r}: {value}")
    return (
        w.lambda_diff * parts["diff"]
        + w.lambda_style * parts["style"]
        + w.lambda_mod * parts["mod"]
        + w.lambda_edge * parts["edge"]
    )
