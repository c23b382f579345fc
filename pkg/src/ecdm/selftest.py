"""Fast end-to-end invariant suite behind ``ecdm selftest``.

Each check returns a :class:`CheckResult`; none of them touch the network or
anything outside the given work directory.
"""

from __future__ import annotations

import math
import tempfile
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import plan_counts, round_half_up
from .diffusion import build_linear_schedule, posterior_mean, q_sample, q_step
from .edges import HighPassConfig, extract_edges
from .losses import (
    LossWeights,
    diffusion_loss,
    discriminator_loss,
    edge_loss,
    generator_objective,
    modality_loss,
    style_loss,
)
from .metrics import fid, kid, psnr_from_mse, ssim
from .samplers import FastSamplerConfig, ancestral_sample, fast_sample


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


class OracleDenoiser:
    """Returns the exact injected noise for a planted clean image ``x0``."""

    def __init__(self, x0: torch.Tensor, schedule):
        self.x0, self.schedule = x0, schedule

    def __call__(self, x_t, cond, t):
        abar = torch.tensor(self.schedule.alpha_bars, dtype=x_t.dtype)[t.long()].view(-1, 1, 1, 1)
        return (x_t - abar.sqrt() * self.x0) / (1 - abar).sqrt()


def check_forward_oracle(draws: int = 10_000, seed: int = 0) -> CheckResult:
    sched = build_linear_schedule()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.full((draws,), 0.7, dtype=torch.float64)
    worst = 0.0
    for t in (1, 2, 5, 10):
        x = x0.clone()
        for s in range(1, t + 1):
            x = q_step(x, s, sched, torch.randn(draws, generator=g, dtype=torch.float64))
        y = q_sample(x0, t, torch.randn(draws, generator=g, dtype=torch.float64), sched)
        se_mean = math.sqrt(x.var().item() / draws + y.var().item() / draws)
        z_mean = abs(x.mean().item() - y.mean().item()) / se_mean
        # standard error of a sample variance under normality: var * sqrt(2 / (n - 1))
        se_var = math.sqrt(2 / (draws - 1)) * math.hypot(x.var().item(), y.var().item())
        z_var = abs(x.var().item() - y.var().item()) / se_var
        worst = max(worst, z_mean, z_var)
    return CheckResult("forward oracle", worst <= 3.0, f"max |z| = {worst:.2f} over t in (1, 2, 5, 10)")


def check_reverse_identity(seed: int = 0) -> CheckResult:
    sched = build_linear_schedule()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand((1, 1, 16, 20), generator=g, dtype=torch.float64) * 1.8 - 0.9
    kappa = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    rms_t1 = (posterior_mean(q_sample(x0, 1, kappa, sched), kappa, 1, sched) - x0).pow(2).mean().sqrt().item()
    oracle = OracleDenoiser(x0, sched)
    cond = torch.zeros_like(x0)
    x_T = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    full = ancestral_sample(oracle, cond, sched, x_T=x_T, deterministic=True, clamp=False)
    rms_full = (full - x0).pow(2).mean().sqrt().item()
    fast = fast_sample(oracle, cond, sched, FastSamplerConfig(), x_T=x_T, clamp=False)
    rms_fast = (fast - x0).pow(2).mean().sqrt().item()
    ok = rms_t1 <= 1e-5 and rms_full <= 1e-3 and rms_fast <= 1e-2
    return CheckResult("reverse identity", ok, f"rms t=1 {rms_t1:.1e}, full {rms_full:.1e}, 5-step {rms_fast:.1e}")


def check_schedule() -> CheckResult:
    s = build_linear_schedule(1000, 1e-4, 0.02)
    t = np.arange(2, 1001)
    ok = (
        s.betas[1] == 1e-4
        and s.betas[1000] == 0.02
        and s.posterior_vars[1] == 0.0
        and bool(np.all(s.posterior_vars[t] > 0))
        and bool(np.all(s.posterior_vars[t] <= s.betas[t]))
        and bool(np.all(np.diff(s.alpha_bars) < 0))
    )
    return CheckResult("schedule fidelity", ok, f"beta_1={float(s.betas[1])!r}, beta_T={float(s.betas[1000])!r}")


def _fd_rel_error(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-6) -> float:
    x = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    fd = torch.zeros_like(x)
    flat, fd_flat = x.detach().view(-1), fd.view(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        fd_flat[i] = (fn(plus.view_as(x)) - fn(minus.view_as(x))) / (2 * h)
    return ((grad - fd).norm() / fd.norm().clamp_min(1e-12)).item()


def loss_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Relative error of autograd vs central differences for each loss on 8x8 inputs."""
    g = torch.Generator().manual_seed(seed)

    def rnd(*shape):
        return torch.randn(shape, generator=g, dtype=torch.float64)

    def scores(*shape):
        return torch.rand(shape, generator=g, dtype=torch.float64) * 0.8 + 0.1

    a, b = rnd(2, 1, 8, 8), rnd(2, 1, 8, 8)
    vis = rnd(2, 3, 8, 8)
    d_real, d_fake = scores(2, 1, 8, 8), scores(2, 1, 8, 8)
    # a soft ramp keeps the edge loss smooth enough for finite differences
    hp = HighPassConfig(0.3, 0.2)
    w = LossWeights()
    return {
        "L_diff": _fd_rel_error(lambda x: diffusion_loss(a, x), b),
        "L_style": _fd_rel_error(lambda x: style_loss(x, a), b),
        "L_mod": _fd_rel_error(modality_loss, d_fake),
        "L_edge": _fd_rel_error(lambda x: edge_loss(vis, x, hp), b),
        "L_D(real)": _fd_rel_error(lambda x: discriminator_loss(x, d_fake, w), d_real),
        "L_D(fake)": _fd_rel_error(lambda x: discriminator_loss(d_real, x, w), d_fake),
    }


def check_losses() -> CheckResult:
    errs = loss_gradient_errors()
    one = torch.tensor(1.0, dtype=torch.float64)
    total = float(generator_objective({"diff": one, "style": one, "mod": one, "edge": one}, LossWeights()))
    half = torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)
    l_d = float(discriminator_loss(half, half, LossWeights()))
    expected_d = 11 * math.log(0.5) ** 2
    ok = max(errs.values()) <= 1e-3 and total == 1101.1 and abs(l_d - expected_d) <= 1e-5
    worst = max(errs, key=errs.get)
    return CheckResult("loss correctness", ok,
                       f"worst grad err {errs[worst]:.1e} ({worst}), objective {total!r}, L_D(0.5) {l_d:.6f}")


def check_edges(n: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = HighPassConfig(0.05)
    worst = 0.0
    for _ in range(n):
        a = torch.from_numpy(rng.normal(size=(1, 1, 24, 32)))
        b = torch.from_numpy(rng.normal(size=(1, 1, 24, 32)))
        c = torch.full((1, 1, 24, 32), float(rng.uniform(-1, 1)), dtype=torch.float64)
        ea = extract_edges(a, cfg)
        worst = max(
            worst,
            extract_edges(c, cfg).abs().max().item(),
            (extract_edges(a + b, cfg) - ea - extract_edges(b, cfg)).abs().max().item(),
            (extract_edges(ea, cfg) - ea).abs().max().item(),
            abs(ea.mean().item()),
        )
    return CheckResult("edge operator", worst <= 1e-5, f"max deviation {worst:.1e} over {n} images")


def check_metrics(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    d = 8
    a = rng.normal(size=(10_000, d))
    mu = np.full(d, 0.5)
    fid_aa = fid(a, a)
    fid_shift = fid(a, rng.normal(size=(10_000, d)) + mu)
    target = float(mu @ mu)
    kids = np.array([kid(rng.normal(size=(100, d)), rng.normal(size=(100, d))) for _ in range(100)])
    kid_z = abs(kids.mean()) / (kids.std(ddof=1) / math.sqrt(len(kids)))
    x = rng.uniform(-1, 1, size=(32, 40))
    ok = (
        fid_aa < 1e-6
        and abs(fid_shift - target) <= 0.02 * target
        and kid_z <= 3.0
        and psnr_from_mse(0.01) == 20.0
        and ssim(x, x) == 1.0
    )
    return CheckResult("metric oracles", ok,
                       f"FID(A,A) {fid_aa:.1e}, shifted {fid_shift:.3f} vs {target:.3f}, KID |z| {kid_z:.2f}")


def check_augment() -> CheckResult:
    bad = []
    for n in (10, 100, 1000):
        for k in range(6):
            ratio = k / 5
            expected = round_half_up(k * n / 5)
            mul, mix = plan_counts(n, ratio, "multiple"), plan_counts(n, ratio, "mixed")
            if (mul.n_real_used, mul.n_pseudo) != (n, expected):
                bad.append(("multiple", n, ratio))
            if (mix.n_real_used, mix.n_pseudo, mix.total) != (n - expected, expected, n):
                bad.append(("mixed", n, ratio))
    ok = not bad and plan_counts(1000, 0.2, "multiple").n_pseudo == 200 and plan_counts(1000, 0.2, "mixed").n_real_used == 800
    return CheckResult("augmentation arithmetic", ok, "sweep exact" if ok else f"mismatches {bad[:3]}")


def check_micro_train(workdir: Path, steps: int = 200, seed: int = 0) -> CheckResult:
    """200 stage-1 updates on a tiny toy set, one stage-2 round, then a fast sample."""
    from .data import generate_dataset, GenConfig, load_images, load_manifest
    from .models import DenoiserConfig
    from .tmat import TmatConfig, init_state, prepare_data, stage1_epoch, stage2_round

    n, bs = 64, 8
    root = workdir / "toy"
    generate_dataset(n, root, seed=seed, cfg=GenConfig(height=32, width=40))
    thermal = load_images(load_manifest(root / "manifest.json"), channels=1)
    visible = load_images(load_manifest(root / "manifest_visible.json"), channels=3)
    epochs = math.ceil(steps / (n // bs))
    cfg = TmatConfig(s_diff=epochs, s_adv=1, batch_size=bs, learning_rate=1e-3, seed=seed,
                     denoiser=DenoiserConfig(base_channels=8, time_embed_dim=32, num_groups=4))
    sched = cfg.schedule()
    data = prepare_data(thermal, visible, cfg)
    state = init_state(cfg)
    while state.global_step < steps:
        stage1_epoch(state, data, cfg, sched)
    state.stage1_complete = True
    n_stage1 = state.global_step
    first = np.mean([e["l_diff"] for e in state.losses[: n // bs]])
    last = np.mean([e["l_diff"] for e in state.losses[state.global_step - n // bs : state.global_step]])
    g0, d0 = state.g_updates, state.d_updates
    stage2_round(state, (data.thermal[:4], data.thermal_cond[:4]), (data.visible[:4], data.visible_cond[:4]), cfg, sched)
    with torch.no_grad():
        sample = fast_sample(state.denoiser, data.thermal_cond[:2], sched, cfg.fast_sampler, seed=seed)
    ok = (
        last < first
        and state.g_updates - g0 == cfg.s_g
        and state.d_updates - d0 == cfg.s_d
        and bool(torch.isfinite(sample).all())
    )
    return CheckResult("micro-train", ok, f"{n_stage1} stage-1 steps + 1 adversarial round, L_diff {first:.3f} -> {last:.3f}")


def run_selftest(workdir: str | Path | None = None, log: Callable[[str], None] = print) -> list[CheckResult]:
    checks: list[tuple[str, Callable[[], CheckResult]]] = [
        ("forward oracle", check_forward_oracle),
        ("reverse identity", check_reverse_identity),
        ("schedule fidelity", check_schedule),
        ("loss correctness", check_losses),
        ("edge operator", check_edges),
        ("metric oracles", check_metrics),
        ("augmentation arithmetic", check_augment),
    ]
    with tempfile.TemporaryDirectory() as tmp:
        base = Path(workdir) if workdir is not None else Path(tmp)
        checks.append(("micro-train", lambda: check_micro_train(base)))
        results = []
        for name, fn in checks:
            start = time.perf_counter()
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = fn()
            except Exception as exc:  # a crashing check is a failed check
                res = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
            res.seconds = time.perf_counter() - start
            log(res.line())
            results.append(res)
    return results
