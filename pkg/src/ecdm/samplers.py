"""Reverse-process samplers.

``model`` is any callable ``model(x_t, condition, t) -> eps_hat``; a trained
:class:`~ecdm.models.Denoiser` or a planted oracle both fit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .diffusion import NoiseSchedule, posterior_mean, predict_x0

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class FastSamplerConfig:
    timesteps: int = 5
    order: int = 3
    skip_type: str = "time_uniform"
    condition_scale: float = 0.5
    guidance: bool = True
    # clamp each x0 estimate to the data range before the solver update
    clip_x0: bool = True
    # recorded from the reference configuration; the executed solver is fixed-step
    method: str = "multistep"
    requested_method: str = "adaptive"
    solver_type: str = "taylor"
    atol: float = 0.0078
    rtol: float = 0.05

    def __post_init__(self):
        if not 1 <= self.order <= 3:
            raise ValueError(f"order must be 1, 2 or 3, got {self.order}")
        if self.timesteps < self.order:
            raise ValueError(f"timesteps ({self.timesteps}) must be >= order ({self.order})")
        if self.condition_scale < 0:
            raise ValueError("condition_scale must be non-negative")
        if self.skip_type != "time_uniform":
            raise ValueError(f"only time_uniform skipping is supported, got {self.skip_type!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_batch(condition: torch.Tensor) -> torch.Tensor:
    if condition.ndim == 2:
        return condition[None, None]
    if condition.ndim == 3:
        return condition[:, None] if condition.shape[0] != 1 else condition[None]
    return condition


def _generator(seed) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _step_tensor(t: int, batch: int, device) -> torch.Tensor:
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


@torch.no_grad()
def ancestral_sample(
    model: EpsModel,
    condition: torch.Tensor,
    schedule: NoiseSchedule,
    seed: int = 0,
    x_T: Optional[torch.Tensor] = None,
    deterministic: bool = False,
    clamp: bool = True,
    mean_form: str = "alpha",
) -> torch.Tensor:
    """Ancestral DDPM sampling from step T down to 0.

    With ``deterministic=True`` every step returns the posterior mean (the
    zero-noise limit).  The final step is always noise-free since its
    posterior variance is zero.
    """
    cond = _as_batch(condition)
    gen = _generator(seed)
    b, _, h, w = cond.shape
    x = torch.randn((b, 1, h, w), generator=gen) if x_T is None else x_T.clone()
    x = x.to(cond.device)
    for t in range(schedule.T, 0, -1):
        eps = model(x, cond, _step_tensor(t, b, x.device))
        mean = posterior_mean(x, eps, t, schedule, mean_form=mean_form)
        var = float(schedule.posterior_vars[t])
        if deterministic or t == 1 or var == 0.0:
            x = mean
        else:
            x = mean + math.sqrt(var) * torch.randn(x.shape, generator=gen).to(x.device)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite sample at step {t}; check model parameters")
    return x.clamp(-1.0, 1.0) if clamp else x


def time_grid(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Integer steps uniformly spaced from T to 0 inclusive (``steps + 1`` points)."""
    grid = np.round(np.linspace(schedule.T, 0, steps + 1)).astype(int).tolist()
    if len(set(grid)) != len(grid):
        raise ValueError(f"{steps} steps do not fit in T={schedule.T}")
    return grid


class _Counter:
    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, *args):
        self.calls += 1
        return self.fn(*args)


def guided_eps(model: EpsModel, x: torch.Tensor, cond: torch.Tensor, t: torch.Tensor, cfg: FastSamplerConfig):
    """Blend conditional and null-condition (all-zero edges) noise predictions."""
    eps_c = model(x, cond, t)
    if not cfg.guidance or cfg.condition_scale == 1.0:
        return eps_c
    eps_u = model(x, torch.zeros_like(cond), t)
    return eps_u + cfg.condition_scale * (eps_c - eps_u)


def fast_sample(
    model: EpsModel,
    condition: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: FastSamplerConfig | None = None,
    seed: int = 0,
    x_T: Optional[torch.Tensor] = None,
    clamp: bool = True,
    return_calls: bool = False,
):
    """Multistep data-prediction solver on a time-uniform grid.

    Exactly ``cfg.timesteps`` guided noise evaluations (each one or two model
    calls).  The solver order ramps up over the first steps and the final
    step into t = 0 is first order, which returns the last x0 estimate.
    Differentiable in the model parameters when called with grad enabled.
    """
    cfg = cfg or FastSamplerConfig()
    cond = _as_batch(condition)
    counted = _Counter(model)
    b, _, h, w = cond.shape
    x = torch.randn((b, 1, h, w), generator=_generator(seed)) if x_T is None else x_T
    x = x.to(cond.device)

    grid = time_grid(schedule, cfg.timesteps)
    abar = schedule.alpha_bars
    alpha = [math.sqrt(abar[t]) for t in grid]
    sigma = [math.sqrt(1.0 - abar[t]) for t in grid]
    lam = [math.log(a) - math.log(s) if s > 0 else math.inf for a, s in zip(alpha, sigma)]

    x0_hist: list[torch.Tensor] = []
    for i in range(cfg.timesteps):
        s_t = grid[i]
        eps = guided_eps(counted, x, cond, _step_tensor(s_t, b, x.device), cfg)
        x0 = predict_x0(x, eps, s_t, schedule)
        x0_hist.append(x0.clamp(-1.0, 1.0) if cfg.clip_x0 else x0)
        x0_hist = x0_hist[-3:]
        nxt = i + 1
        if sigma[nxt] == 0.0:
            # final jump to clean data: first-order update collapses to the x0 estimate
            x = x0_hist[-1]
            break
        order = min(cfg.order, i + 1)
        if nxt == cfg.timesteps:
            order = 1
        h_ = lam[nxt] - lam[i]
        a_t, s_ratio = alpha[nxt], sigma[nxt] / sigma[i]
        phi1 = math.expm1(-h_)
        x_new = s_ratio * x - a_t * phi1 * x0_hist[-1]
        if order >= 2:
            h0 = lam[i] - lam[i - 1]
            r0 = h0 / h_
            d1_0 = (x0_hist[-1] - x0_hist[-2]) / r0
            if order == 2:
                x_new = x_new + a_t * (phi1 / h_ + 1.0) * d1_0
            else:
                h1 = lam[i - 1] - lam[i - 2]
                r1 = h1 / h_
                d1_1 = (x0_hist[-2] - x0_hist[-3]) / r1
                d1 = d1_0 + r0 / (r0 + r1) * (d1_0 - d1_1)
                d2 = (d1_0 - d1_1) / (r0 + r1)
                x_new = x_new + a_t * (phi1 / h_ + 1.0) * d1 - a_t * ((phi1 + h_) / h_**2 - 0.5) * d2
        x = x_new
    if not torch.isfinite(x).all():
        raise FloatingPointError("non-finite fast sample; check model parameters")
    out = x.clamp(-1.0, 1.0) if clamp else x
    return (out, counted.calls) if return_calls else out
