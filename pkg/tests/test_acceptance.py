"""Acceptance criteria 1-10, one PASS/FAIL line each (see the terminal summary).

Criterion 7 trains three toy models end to end and takes over an hour on a
single CPU core; it is marked ``slow``.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from ecdm.augment import plan_counts, round_half_up, synthesize_pseudo
from ecdm.data import GenConfig, generate_dataset, load_images, load_manifest
from ecdm.diffusion import build_linear_schedule, posterior_mean, q_sample, q_step
from ecdm.edges import HighPassConfig, edge_condition, extract_edges
from ecdm.losses import LossWeights, discriminator_loss, generator_objective
from ecdm.metrics import FeatureExtractor, fid, kid, psnr_from_mse, ssim
from ecdm.models import DenoiserConfig, DiscriminatorConfig
from ecdm.samplers import FastSamplerConfig, ancestral_sample, fast_sample
from ecdm.selftest import OracleDenoiser, loss_gradient_errors
from ecdm.tmat import TmatConfig, init_state, load_generator, load_state, prepare_data, run_tmat, stage2_round


def ncc(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image normalized cross-correlation of (B, 1, H, W) maps."""
    a = a - a.mean(dim=(-2, -1), keepdim=True)
    b = b - b.mean(dim=(-2, -1), keepdim=True)
    num = (a * b).sum(dim=(-2, -1))
    den = a.pow(2).sum(dim=(-2, -1)).sqrt() * b.pow(2).sum(dim=(-2, -1)).sqrt()
    return (num / den.clamp_min(1e-12)).flatten()


def test_criterion_1_forward_oracle(acceptance):
    start = time.perf_counter()
    sched = build_linear_schedule()
    g = torch.Generator().manual_seed(11)
    n = 10_000
    x0 = torch.full((n,), -0.4, dtype=torch.float64)
    zs = {}
    for t in (1, 2, 5, 10):
        x = x0.clone()
        for s in range(1, t + 1):
            x = q_step(x, s, sched, torch.randn(n, generator=g, dtype=torch.float64))
        y = q_sample(x0, t, torch.randn(n, generator=g, dtype=torch.float64), sched)
        z_mean = abs(x.mean() - y.mean()).item() / math.sqrt((x.var() + y.var()).item() / n)
        z_var = abs(x.var() - y.var()).item() / (math.sqrt(2 / (n - 1)) * math.hypot(x.var().item(), y.var().item()))
        zs[t] = max(z_mean, z_var)
    elapsed = time.perf_counter() - start
    ok = max(zs.values()) <= 3.0 and elapsed < 30
    acceptance(1, ok, f"max |z| per t {{{', '.join(f'{t}: {z:.2f}' for t, z in zs.items())}}}, {elapsed:.1f}s")


def test_criterion_2_reverse_identity(acceptance):
    start = time.perf_counter()
    sched = build_linear_schedule()
    g = torch.Generator().manual_seed(12)
    x0 = torch.rand((2, 1, 64, 80), generator=g, dtype=torch.float64) * 1.9 - 0.95
    kappa = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    rms = lambda a: (a - x0).pow(2).mean().sqrt().item()  # noqa: E731
    r1 = rms(posterior_mean(q_sample(x0, 1, kappa, sched), kappa, 1, sched))
    oracle = OracleDenoiser(x0, sched)
    x_T = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    cond = torch.zeros_like(x0)
    r_full = rms(ancestral_sample(oracle, cond, sched, x_T=x_T, deterministic=True, clamp=False))
    r_fast = rms(fast_sample(oracle, cond, sched, FastSamplerConfig(timesteps=5), x_T=x_T, clamp=False))
    elapsed = time.perf_counter() - start
    ok = r1 <= 1e-5 and r_full <= 1e-3 and r_fast <= 1e-2 and elapsed < 120
    acceptance(2, ok, f"rms t=1 {r1:.1e}, T=1000 pass {r_full:.1e}, 5-step {r_fast:.1e}, {elapsed:.1f}s")


def test_criterion_3_schedule(acceptance):
    start = time.perf_counter()
    s = build_linear_schedule(1000, 1e-4, 0.02)
    bad = [t for t in range(2, 1001) if not 0.0 < s.posterior_vars[t] <= s.betas[t]]
    ok = (
        s.betas[1] == 1e-4
        and s.betas[1000] == 0.02
        and s.posterior_vars[1] == 0.0
        and not bad
        and all(s.alpha_bars[t] < s.alpha_bars[t - 1] for t in range(1, 1001))
    )
    elapsed = time.perf_counter() - start
    acceptance(3, ok and elapsed < 1.0, f"beta_1, beta_T exact, {len(bad)} variance violations, {elapsed * 1000:.0f}ms")


def test_criterion_4_losses(acceptance):
    errs = loss_gradient_errors(seed=4)
    one = torch.tensor(1.0, dtype=torch.float64)
    total = float(generator_objective({"diff": one, "style": one, "mod": one, "edge": one}, LossWeights()))
    half = torch.full((4, 1, 8, 8), 0.5, dtype=torch.float64)
    l_d = discriminator_loss(half, half, LossWeights()).item()
    ok = max(errs.values()) <= 1e-3 and total == 1101.1 and abs(l_d - 11 * math.log(0.5) ** 2) <= 1e-5
    acceptance(4, ok, f"max grad rel err {max(errs.values()):.1e}, objective {total!r}, L_D(0.5) {l_d:.6f}")


def test_criterion_5_edges(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    cfg = HighPassConfig(0.05)
    worst = {"constant": 0.0, "linearity": 0.0, "idempotence": 0.0, "zero mean": 0.0}
    for _ in range(100):
        a = torch.from_numpy(rng.uniform(-1, 1, size=(1, 1, 64, 80)))
        b = torch.from_numpy(rng.uniform(-1, 1, size=(1, 1, 64, 80)))
        c = torch.full((1, 1, 64, 80), float(rng.uniform(-1, 1)), dtype=torch.float64)
        ea = extract_edges(a, cfg)
        worst["constant"] = max(worst["constant"], extract_edges(c, cfg).abs().max().item())
        worst["linearity"] = max(worst["linearity"],
                                 (extract_edges(a + b, cfg) - ea - extract_edges(b, cfg)).abs().max().item())
        worst["idempotence"] = max(worst["idempotence"], (extract_edges(ea, cfg) - ea).abs().max().item())
        worst["zero mean"] = max(worst["zero mean"], abs(ea.mean().item()))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-5 and elapsed < 10
    acceptance(5, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")


def test_criterion_6_tmat_contract(acceptance, tmp_path):
    cfg = TmatConfig(
        s_diff=2, s_adv=1, s_g=2, s_d=1, batch_size=4, learning_rate=1e-3, seed=6,
        fast_sampler=FastSamplerConfig(timesteps=2, order=2),
        denoiser=DenoiserConfig(base_channels=8, time_embed_dim=16, num_groups=4),
        discriminator=DiscriminatorConfig(base_channels=8),
    )
    generate_dataset(8, tmp_path / "d", seed=6, cfg=GenConfig(height=16, width=24))
    thermal = load_images(load_manifest(tmp_path / "d" / "manifest.json"), channels=1)
    visible = load_images(load_manifest(tmp_path / "d" / "manifest_visible.json"), channels=3)
    data = prepare_data(thermal, visible, cfg)

    fresh = init_state(cfg)
    try:
        stage2_round(fresh, (data.thermal[:2], data.thermal_cond[:2]), (data.visible[:2], data.visible_cond[:2]), cfg)
        gated = False
    except RuntimeError:
        gated = fresh.global_step == 0

    run_tmat(data, cfg, tmp_path / "full")
    trace = [json.loads(x) for x in (tmp_path / "full" / "losses.jsonl").read_text().splitlines()]
    stage2 = [e for e in trace if e["stage"] == 2]
    first_stage2 = min(e["step"] for e in stage2)
    stage1_done_before = all(e["stage"] == 1 for e in trace if e["step"] < first_stage2)
    pattern = ["G" if e["l_d"] is None else "D" for e in stage2]
    rounds = [pattern[i:i + 3] for i in range(0, len(pattern), 3)]
    per_round_ok = bool(rounds) and all(r == ["G", "G", "D"] for r in rounds)

    ckpt = run_tmat(data, cfg, tmp_path / "part", stop_after_epochs=1)
    run_tmat(data, cfg, tmp_path / "part", resume=ckpt)
    a = load_state(tmp_path / "full" / "final.ckpt")[0]
    b = load_state(tmp_path / "part" / "final.ckpt")[0]
    counters = ("global_step", "g_updates", "d_updates", "stage1_epochs", "stage2_epochs")
    resume_ok = all(getattr(a, k) == getattr(b, k) for k in counters) and a.config_hash == b.config_hash == cfg.config_hash()

    ok = gated and stage1_done_before and per_round_ok and resume_ok
    acceptance(6, ok, f"{len(rounds)} rounds all G,G,D: {per_round_ok}; stage-2 gated: {gated}; "
                      f"resume counters and hash match: {resume_ok}")


SEEDS = (0, 1, 2)


def toy_config(seed: int) -> TmatConfig:
    return TmatConfig(
        s_diff=30, s_adv=1, batch_size=16, stage2_batch_size=8, learning_rate=5e-4,
        stage2_learning_rate=1e-4, d_learning_rate=1e-4, seed=seed,
        denoiser=DenoiserConfig(base_channels=16),
    )


@torch.no_grad()
def _sample(model, cond, sched, cfg, seed):
    noise = torch.randn((len(cond), 1, *cond.shape[-2:]), generator=torch.Generator().manual_seed(seed))
    return fast_sample(model.eval(), cond, sched, cfg, x_T=noise)


@pytest.mark.slow
def test_criterion_7_toy_learning_gain(acceptance, tmp_path):
    start = time.perf_counter()
    torch.set_num_threads(max(1, torch.get_num_threads()))
    generate_dataset(500, tmp_path / "train", seed=1)
    generate_dataset(100, tmp_path / "test", seed=2, split="test")
    thermal = load_images(load_manifest(tmp_path / "train" / "manifest.json"), channels=1)
    visible = load_images(load_manifest(tmp_path / "train" / "manifest_visible.json"), channels=3)
    test_tir = load_images(load_manifest(tmp_path / "test" / "manifest.json"), channels=1)
    test_vis = load_images(load_manifest(tmp_path / "test" / "manifest_visible.json"), channels=3)
    extractor = FeatureExtractor(seed=0)
    ref_feats = extractor(test_tir)
    sampler = FastSamplerConfig()

    per_seed = []
    for seed in SEEDS:
        cfg = toy_config(seed)
        sched = cfg.schedule()
        out = tmp_path / f"run{seed}"
        run_tmat(prepare_data(thermal, visible, cfg), cfg, out)
        trace = [json.loads(x) for x in (out / "losses.jsonl").read_text().splitlines()]
        s1 = [e for e in trace if e["stage"] == 1]
        per_epoch = math.ceil(len(thermal) / cfg.batch_size)
        first = float(np.mean([e["l_diff"] for e in s1[:per_epoch]]))
        last = float(np.mean([e["l_diff"] for e in s1[-per_epoch:]]))

        z_tir = edge_condition(test_tir, cfg.highpass)
        z_vis = edge_condition(test_vis, cfg.highpass)
        res = {"seed": seed, "fall": 1 - last / first}
        for tag, ckpt in (("stage1", "stage1.ckpt"), ("final", "final.ckpt")):
            model = load_generator(out / ckpt)[0]
            cond = _sample(model, z_tir, sched, sampler, 100 + seed)
            base = _sample(model, torch.zeros_like(z_tir), sched, sampler, 100 + seed)
            res[f"{tag}_ncc"] = ncc(extract_edges(cond), z_tir).mean().item()
            res[f"{tag}_ncc_unc"] = ncc(extract_edges(base), z_tir).mean().item()
            res[f"{tag}_fid"] = fid(extractor(_sample(model, z_vis, sched, sampler, 200 + seed)), ref_feats)
        per_seed.append(res)
        print(json.dumps(res))

    elapsed = time.perf_counter() - start
    ok_a = all(r["fall"] >= 0.5 for r in per_seed)
    ok_b = all(r["final_ncc"] >= 0.3 and r["final_ncc"] > r["final_ncc_unc"] for r in per_seed)
    wins = sum(r["final_fid"] < r["stage1_fid"] for r in per_seed)
    ok_c = wins >= 2
    detail = (
        f"(a) L_diff fall {min(r['fall'] for r in per_seed):.0%} min; "
        f"(b) NCC {min(r['final_ncc'] for r in per_seed):.2f} min vs baseline "
        f"{max(r['final_ncc_unc'] for r in per_seed):.2f} max (stage-1 only {np.mean([r['stage1_ncc'] for r in per_seed]):.2f}); "
        f"(c) toy-FID lower after stage 2 in {wins}/3 seeds "
        f"({np.mean([r['stage1_fid'] for r in per_seed]):.2f} -> {np.mean([r['final_fid'] for r in per_seed]):.2f}); "
        f"{elapsed / 60:.0f} min"
    )
    acceptance(7, ok_a and ok_b and ok_c and elapsed < 2 * 3600, detail)


def test_criterion_8_metrics(acceptance):
    rng = np.random.default_rng(8)
    d = 16
    a = rng.normal(size=(10_000, d))
    mu = rng.normal(size=d) * 0.5
    f_aa = fid(a, a)
    f_shift = fid(a, rng.normal(size=(10_000, d)) + mu)
    target = float(mu @ mu)
    kids = np.array([kid(rng.normal(size=(64, d)), rng.normal(size=(64, d))) for _ in range(100)])
    kid_z = abs(kids.mean()) / (kids.std(ddof=1) / math.sqrt(100))
    x = rng.uniform(-1, 1, size=(64, 80))
    ok = (f_aa < 1e-6 and abs(f_shift - target) <= 0.02 * target and kid_z <= 3
          and psnr_from_mse(0.01) == 20.0 and ssim(x, x) == 1.0)
    acceptance(8, ok, f"FID(A,A) {f_aa:.1e}, shifted {f_shift:.4f} vs {target:.4f}, KID mean |z| {kid_z:.2f}, "
                      f"PSNR(0.01) {psnr_from_mse(0.01)!r}, SSIM(x,x) {ssim(x, x)!r}")


class _ZeroEps:
    def __call__(self, x, cond, t):
        return torch.zeros_like(x)


def test_criterion_9_augmentation(acceptance, tmp_path):
    start = time.perf_counter()
    mismatches = []
    for n in (10, 100, 1000):
        for k, ratio in enumerate((0.0, 0.2, 0.4, 0.6, 0.8, 1.0)):
            want = round_half_up(n * k / 5)
            mul, mix = plan_counts(n, ratio, "multiple"), plan_counts(n, ratio, "mixed")
            if (mul.n_real_used, mul.n_pseudo) != (n, want) or (mix.n_real_used, mix.n_pseudo) != (n - want, want):
                mismatches.append((n, ratio))
    arithmetic_s = time.perf_counter() - start

    generate_dataset(6, tmp_path / "vis", seed=9, cfg=GenConfig(height=16, width=24))
    visible = load_manifest(tmp_path / "vis" / "manifest_visible.json")
    pseudo = synthesize_pseudo(visible, _ZeroEps(), build_linear_schedule(), tmp_path / "pseudo",
                               FastSamplerConfig(timesteps=2, order=1))
    transfer = all(
        json.dumps(p.boxes).encode() == json.dumps(v.boxes).encode() and p.labels == v.labels
        for v, p in zip(visible.records, pseudo.records)
    ) and len(pseudo) == len(visible)
    ok = not mismatches and transfer and arithmetic_s < 1.0
    acceptance(9, ok, f"sweep mismatches {len(mismatches)}, label transfer identical: {transfer}, "
                      f"{arithmetic_s * 1000:.1f}ms")


def test_criterion_10_selftest(acceptance, tmp_path):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "ecdm.cli", "selftest", "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=900)
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    acceptance(10, proc.returncode == 0 and elapsed < 600, f"exit {proc.returncode}, {summary}, {elapsed:.0f}s")
