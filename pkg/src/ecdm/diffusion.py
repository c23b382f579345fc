"""Linear noise schedule and the closed-form forward/reverse diffusion maths.

All tables are 1-indexed by diffusion step: entry 0 is a padding slot that
holds the t = 0 convention (beta 0, alpha_bar 1, posterior variance 0), so
``schedule.betas[1]`` is the first real variance and ``schedule.betas[T]``
the last.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch

Step = Union[int, torch.Tensor]

# posterior-mean scaling: "alpha" divides by sqrt(alpha_t) (standard DDPM),
# "alpha_bar" divides by sqrt(alpha_bar_t) (literal printed form, kept for comparison)
MEAN_FORMS = ("alpha", "alpha_bar")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    posterior_vars: np.ndarray = field(repr=False)

    def to_text(self) -> str:
        return f"T = {self.T}\nbeta_start = {self.beta_start!r}\nbeta_end = {self.beta_end!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "NoiseSchedule":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        try:
            return build_linear_schedule(int(kv["T"]), float(kv["beta_start"]), float(kv["beta_end"]))
        except KeyError as exc:
            raise ValueError(f"schedule block missing key {exc}") from None

    def table(self, name: str, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(getattr(self, name), dtype=dtype)


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    T = int(T)
    betas = np.empty(T + 1, dtype=np.float64)
    betas[0] = 0.0
    betas[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    # linspace can drift in the last ulp; pin the endpoints exactly (T = 1 keeps beta_start)
    betas[T] = beta_end
    betas[1] = beta_start
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    post = np.zeros(T + 1, dtype=np.float64)
    post[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    for arr in (betas, alphas, alpha_bars, post):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas, alpha_bars, post)


def _check_step(t: Step, schedule: NoiseSchedule) -> None:
    if isinstance(t, torch.Tensor):
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < 1 or hi > schedule.T:
        raise ValueError(f"step out of range [1, {schedule.T}]: {t}")


def _coef(values: np.ndarray, t: Step, like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[t]`` as a tensor broadcastable against ``like`` (batch-first)."""
    table = torch.tensor(values, dtype=torch.float64)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        out = table[t.long().cpu()].to(like.dtype).to(like.device)
        return out.view(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(table[int(t)]), dtype=like.dtype, device=like.device)


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch between image and {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_step(x_prev: torch.Tensor, t: Step, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """One forward Markov step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise."""
    _check_shapes(x_prev, noise, "noise")
    _check_step(t, schedule)
    beta = _coef(schedule.betas, t, x_prev)
    return torch.sqrt(1.0 - beta) * x_prev + torch.sqrt(beta) * noise


def q_sample(x0: torch.Tensor, t: Step, kappa: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Jump straight to step ``t``: sqrt(abar_t) x0 + sqrt(1 - abar_t) kappa."""
    _check_shapes(x0, kappa, "noise")
    _check_step(t, schedule)
    abar = _coef(schedule.alpha_bars, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * kappa


def posterior_mean(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: Step,
    schedule: NoiseSchedule,
    mean_form: str = "alpha",
) -> torch.Tensor:
    _check_shapes(x_t, eps_pred, "predicted noise")
    _check_step(t, schedule)
    if mean_form not in MEAN_FORMS:
        raise ValueError(f"mean_form must be one of {MEAN_FORMS}, got {mean_form!r}")
    beta = _coef(schedule.betas, t, x_t)
    abar = _coef(schedule.alpha_bars, t, x_t)
    scale = _coef(schedule.alphas if mean_form == "alpha" else schedule.alpha_bars, t, x_t)
    return (x_t - beta / torch.sqrt(1.0 - abar) * eps_pred) / torch.sqrt(scale)


def posterior_variance(t: int, schedule: NoiseSchedule) -> float:
    _check_step(t, schedule)
    return float(schedule.posterior_vars[int(t)])


def predict_x0(x_t: torch.Tensor, eps_pred: torch.Tensor, t: Step, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert q_sample for x0 given a noise estimate."""
    abar = _coef(schedule.alpha_bars, t, x_t)
    return (x_t - torch.sqrt(1.0 - abar) * eps_pred) / torch.sqrt(abar)
