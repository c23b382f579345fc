"""Two-stage modality adversarial training.

Stage 1 fits the denoiser on thermal images conditioned on their own edges.
Stage 2 treats the denoiser plus the fast sampler as a generator, conditions
it on visible edges, and trains it against a patch discriminator alongside
the style, modality and edge terms.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, build_linear_schedule, q_sample
from .edges import HighPassConfig, edge_condition, to_luminance
from .losses import (
    LossWeights,
    diffusion_loss,
    discriminator_loss,
    edge_loss,
    generator_objective,
    modality_loss,
    style_loss,
)
from .models import Denoiser, DenoiserConfig, DiscriminatorConfig, PatchDiscriminator
from .samplers import FastSamplerConfig, fast_sample

log = logging.getLogger(__name__)

CONDITION_MODES = ("thermal_edge", "visible_edge", "thermal_image", "visible_image", "none")
# run-length fields; changing them does not change what a checkpoint means
_HASH_EXCLUDED = ("s_diff", "s_adv")


@dataclass(frozen=True)
class TmatConfig:
    s_diff: int = 30
    s_adv: int = 10
    s_g: int = 2
    s_d: int = 1
    batch_size: int = 16
    stage2_batch_size: Optional[int] = None
    learning_rate: float = 1e-4
    d_learning_rate: Optional[float] = None
    stage2_learning_rate: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    stage1_condition: str = "thermal_edge"
    discriminator_form: str = "squared_log"
    weights: LossWeights = field(default_factory=LossWeights)
    fast_sampler: FastSamplerConfig = field(default_factory=FastSamplerConfig)
    highpass: HighPassConfig = field(default_factory=HighPassConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        for name in ("s_diff", "s_g", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.s_adv < 0 or self.s_d < 0:
            raise ValueError("s_adv and s_d must be >= 0")
        if self.stage2_batch_size is not None and self.stage2_batch_size < 1:
            raise ValueError("stage2_batch_size must be >= 1")
        optional = (self.d_learning_rate, self.stage2_learning_rate)
        if self.learning_rate < 0 or any(lr is not None and lr < 0 for lr in optional):
            raise ValueError("learning rates must be non-negative")
        if self.stage1_condition not in CONDITION_MODES:
            raise ValueError(f"stage1_condition must be one of {CONDITION_MODES}")

    @property
    def g_lr(self) -> float:
        return self.learning_rate

    @property
    def stage2_g_lr(self) -> float:
        return self.learning_rate if self.stage2_learning_rate is None else self.stage2_learning_rate

    @property
    def d_lr(self) -> float:
        return self.learning_rate if self.d_learning_rate is None else self.d_learning_rate

    @property
    def adv_batch_size(self) -> int:
        return self.stage2_batch_size or self.batch_size

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("denoiser",):
            d[key]["channel_multipliers"] = list(d[key]["channel_multipliers"])
            d[key]["attention_levels"] = list(d[key]["attention_levels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TmatConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["fast_sampler"] = FastSamplerConfig(**d["fast_sampler"])
        d["highpass"] = HighPassConfig(**d["highpass"])
        d["denoiser"] = DenoiserConfig(**d["denoiser"])
        d["discriminator"] = DiscriminatorConfig(**d["discriminator"])
        return cls(**d)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _HASH_EXCLUDED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def paper_config(**overrides) -> TmatConfig:
    """Full-scale hyperparameters as reported (70/20 epochs, batch 4, lr 2e-5)."""
    base = dict(s_diff=70, s_adv=20, s_g=2, s_d=1, batch_size=4, learning_rate=2e-5)
    base.update(overrides)
    return TmatConfig(**base)


@dataclass
class TrainData:
    """Thermal images with their stage-1 conditions, plus (unpaired) visible images and edges."""

    thermal: torch.Tensor
    thermal_cond: torch.Tensor
    visible: Optional[torch.Tensor] = None
    visible_cond: Optional[torch.Tensor] = None

    def __post_init__(self):
        if len(self.thermal) == 0:
            raise ValueError("empty thermal dataset")


def make_condition(image: torch.Tensor, mode: str, highpass: HighPassConfig) -> torch.Tensor:
    if mode.endswith("_edge"):
        return edge_condition(image, highpass)
    if mode.endswith("_image"):
        return to_luminance(image)
    if mode == "none":
        return torch.zeros_like(image[:, :1])
    raise ValueError(f"unknown condition mode {mode!r}")


def prepare_data(thermal: torch.Tensor, visible: Optional[torch.Tensor], cfg: TmatConfig) -> TrainData:
    mode = cfg.stage1_condition
    if mode.startswith("visible"):
        if visible is None or len(visible) != len(thermal):
            raise ValueError(f"condition mode {mode!r} needs visible images paired with the thermal set")
        cond_src = visible
    else:
        cond_src = thermal
    return TrainData(
        thermal=thermal,
        thermal_cond=make_condition(cond_src, mode, cfg.highpass),
        visible=visible,
        visible_cond=None if visible is None else edge_condition(visible, cfg.highpass),
    )


@dataclass
class TrainState:
    denoiser: Denoiser
    discriminator: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    config_hash: str
    stage: int = 1
    epoch: int = 0
    stage1_epochs: int = 0
    stage2_epochs: int = 0
    global_step: int = 0
    g_updates: int = 0
    d_updates: int = 0
    stage1_complete: bool = False
    losses: list = field(default_factory=list)
    sink: Optional[Callable[[dict], None]] = field(default=None, repr=False)

    def record(self, entry: dict) -> None:
        self.losses.append(entry)
        if self.sink is not None:
            self.sink(entry)


def init_state(cfg: TmatConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    den = Denoiser(cfg.denoiser)
    disc = PatchDiscriminator(cfg.discriminator)
    opt_g = torch.optim.Adam(den.parameters(), lr=cfg.g_lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.d_lr, betas=(cfg.beta1, cfg.beta2))
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(den, disc, opt_g, opt_d, rng, cfg.config_hash())


def _check_finite(value: torch.Tensor, what: str, state: TrainState) -> None:
    if not torch.isfinite(value):
        raise FloatingPointError(
            f"non-finite {what} ({value.item()}) at stage {state.stage}, epoch {state.epoch}, step {state.global_step}"
        )


def _batches(n: int, batch_size: int, rng: torch.Generator):
    perm = torch.randperm(n, generator=rng)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _diffusion_term(model, x0, cond, schedule, rng):
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=rng)
    kappa = torch.randn(x0.shape, generator=rng)
    x_t = q_sample(x0, t, kappa, schedule)
    return diffusion_loss(kappa, model(x_t, cond, t))


def stage1_epoch(state: TrainState, data: TrainData, cfg: TmatConfig, schedule: NoiseSchedule | None = None) -> TrainState:
    if len(data.thermal) == 0:
        raise ValueError("empty dataset")
    if state.stage1_complete:
        raise RuntimeError("stage 1 already complete for this state")
    schedule = schedule or cfg.schedule()
    state.denoiser.train()
    for idx in _batches(len(data.thermal), cfg.batch_size, state.rng):
        loss = _diffusion_term(state.denoiser, data.thermal[idx], data.thermal_cond[idx], schedule, state.rng)
        _check_finite(loss, "diffusion loss", state)
        state.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        state.opt_g.step()
        state.global_step += 1
        state.g_updates += 1
        state.record({"step": state.global_step, "stage": 1, "l_diff": loss.item(), "l_style": None,
                      "l_mod": None, "l_edge": None, "l_d": None, "l_g": loss.item()})
    state.epoch += 1
    state.stage1_epochs += 1
    return state


def generate(model, cond: torch.Tensor, schedule: NoiseSchedule, cfg: FastSamplerConfig, kappa: torch.Tensor) -> torch.Tensor:
    """G(kappa, cond): differentiable fast-sampler rollout from start noise ``kappa``."""
    return fast_sample(model, cond, schedule, cfg, x_T=kappa, clamp=False)


def stage2_round(
    state: TrainState,
    thermal_batch: tuple[torch.Tensor, torch.Tensor],
    visible_batch: tuple[torch.Tensor, torch.Tensor],
    cfg: TmatConfig,
    schedule: NoiseSchedule | None = None,
) -> TrainState:
    """S_G generator updates then S_D discriminator updates on one thermal and one visible batch."""
    if not state.stage1_complete:
        raise RuntimeError("stage 2 requires a completed stage 1 (train it or load its checkpoint)")
    schedule = schedule or cfg.schedule()
    state.stage = 2
    for group in state.opt_g.param_groups:
        group["lr"] = cfg.stage2_g_lr
    x_tir, z_tir = thermal_batch
    x_vis, z_vis = visible_batch
    G, D = state.denoiser, state.discriminator
    G.train()
    x_hat_vis = None
    for _ in range(cfg.s_g):
        l_diff = _diffusion_term(G, x_tir, z_tir, schedule, state.rng)
        kappa_tir = torch.randn(x_tir.shape, generator=state.rng)
        kappa_vis = torch.randn((x_vis.shape[0], 1, *x_vis.shape[-2:]), generator=state.rng)
        x_hat_tir = generate(G, z_tir, schedule, cfg.fast_sampler, kappa_tir)
        x_hat_vis = generate(G, z_vis, schedule, cfg.fast_sampler, kappa_vis)
        parts = {
            "diff": l_diff,
            "style": style_loss(x_hat_tir, x_tir),
            "mod": modality_loss(D(x_hat_vis)),
            "edge": edge_loss(x_vis, x_hat_vis, cfg.highpass),
        }
        l_g = generator_objective(parts, cfg.weights)
        _check_finite(l_g, "generator objective", state)
        state.opt_g.zero_grad(set_to_none=True)
        l_g.backward()
        state.opt_g.step()
        state.global_step += 1
        state.g_updates += 1
        state.record({"step": state.global_step, "stage": 2, "l_diff": l_diff.item(), "l_style": parts["style"].item(),
                      "l_mod": parts["mod"].item(), "l_edge": parts["edge"].item(), "l_d": None, "l_g": l_g.item()})
    # the discriminator sees the latest generation, detached from the generator graph
    fake = x_hat_vis.detach()
    for _ in range(cfg.s_d):
        l_d = discriminator_loss(D(x_tir), D(fake), cfg.weights, form=cfg.discriminator_form)
        _check_finite(l_d, "discriminator loss", state)
        state.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        state.opt_d.step()
        state.global_step += 1
        state.d_updates += 1
        state.record({"step": state.global_step, "stage": 2, "l_diff": None, "l_style": None,
                      "l_mod": None, "l_edge": None, "l_d": l_d.item(), "l_g": None})
    # generator backward leaves stale grads on D; clear them so nothing leaks into the next round
    D.zero_grad(set_to_none=True)
    return state


def stage2_epoch(state: TrainState, data: TrainData, cfg: TmatConfig, schedule: NoiseSchedule | None = None) -> TrainState:
    if data.visible is None:
        raise ValueError("stage 2 needs visible images")
    schedule = schedule or cfg.schedule()
    bs = cfg.adv_batch_size
    vis_order = torch.randperm(len(data.visible), generator=state.rng)
    for r, idx in enumerate(_batches(len(data.thermal), bs, state.rng)):
        v = vis_order[torch.arange(r * bs, r * bs + len(idx)) % len(vis_order)]
        stage2_round(state, (data.thermal[idx], data.thermal_cond[idx]), (data.visible[v], data.visible_cond[v]), cfg, schedule)
    state.epoch += 1
    state.stage2_epochs += 1
    return state


# ---------------------------------------------------------------------------
# checkpoints and the full run


def state_payload(state: TrainState, cfg: TmatConfig) -> dict:
    return {
        "config": cfg.to_dict(),
        "config_hash": state.config_hash,
        "schedule": cfg.schedule().to_text(),
        "preprocessing": {"highpass": cfg.highpass.to_dict(), "edge_normalization": "unit_max_abs",
                          "pixel_range": [-1.0, 1.0]},
        "denoiser": state.denoiser.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": state.rng.get_state(),
        "counters": {k: getattr(state, k) for k in ("stage", "epoch", "stage1_epochs", "stage2_epochs",
                                                    "global_step", "g_updates", "d_updates", "stage1_complete")},
    }


def save_state(state: TrainState, cfg: TmatConfig, path) -> Path:
    return save_checkpoint(state_payload(state, cfg), path)


def restore_state(payload: dict, cfg: TmatConfig | None = None) -> tuple[TrainState, TmatConfig]:
    saved_cfg = TmatConfig.from_dict(payload["config"])
    if cfg is None:
        cfg = saved_cfg
    elif cfg.config_hash() != payload["config_hash"]:
        raise ValueError(f"config hash {cfg.config_hash()} does not match checkpoint {payload['config_hash']}")
    state = init_state(cfg)
    state.denoiser.load_state_dict(payload["denoiser"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.rng.set_state(payload["rng"])
    for k, v in payload["counters"].items():
        setattr(state, k, v)
    return state, cfg


def load_state(path, cfg: TmatConfig | None = None) -> tuple[TrainState, TmatConfig]:
    return restore_state(load_checkpoint(path), cfg)


def load_generator(path) -> tuple[Denoiser, TmatConfig, dict]:
    """Denoiser in eval mode, its config, and the raw checkpoint payload."""
    payload = load_checkpoint(path)
    cfg = TmatConfig.from_dict(payload["config"])
    model = Denoiser(cfg.denoiser)
    model.load_state_dict(payload["denoiser"])
    model.eval()
    return model, cfg, payload


def _read_trace(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            if entry["step"] <= upto:
                out.append(entry)
    return out


def run_tmat(
    data: TrainData,
    cfg: TmatConfig,
    out_dir,
    resume: str | os.PathLike | None = None,
    stop_after_epochs: int | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> Path:
    """Run stage 1 for ``s_diff`` epochs then stage 2 for ``s_adv`` epochs.

    Writes ``last.ckpt`` after every epoch, ``stage1.ckpt`` at the stage
    boundary, ``final.ckpt`` at the end, and ``losses.jsonl`` (one record per
    optimizer step).  ``stop_after_epochs`` interrupts the run early (for
    resume testing); the returned path is then ``last.ckpt``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    schedule = cfg.schedule()
    trace_path = out / "losses.jsonl"
    if resume is not None:
        state, cfg = load_state(resume, cfg)
        prior = _read_trace(trace_path, state.global_step)
    else:
        state = init_state(cfg)
        prior = []
    state.losses = list(prior)
    with open(trace_path, "w") as fh:
        for entry in prior:
            fh.write(json.dumps(entry) + "\n")
    fh = open(trace_path, "a")
    state.sink = lambda e: (fh.write(json.dumps(e) + "\n"), fh.flush())
    epochs_this_call = 0
    try:
        while state.stage1_epochs < cfg.s_diff:
            if stop_after_epochs is not None and epochs_this_call >= stop_after_epochs:
                return out / "last.ckpt"
            stage1_epoch(state, data, cfg, schedule)
            epochs_this_call += 1
            log.info("stage 1 epoch %d/%d done (step %d)", state.stage1_epochs, cfg.s_diff, state.global_step)
            if state.stage1_epochs == cfg.s_diff:
                state.stage1_complete = True
                save_state(state, cfg, out / "stage1.ckpt")
            save_state(state, cfg, out / "last.ckpt")
            if on_epoch:
                on_epoch(state)
        if not state.stage1_complete:
            state.stage1_complete = True
            save_state(state, cfg, out / "stage1.ckpt")
        while state.stage2_epochs < cfg.s_adv:
            if stop_after_epochs is not None and epochs_this_call >= stop_after_epochs:
                return out / "last.ckpt"
            stage2_epoch(state, data, cfg, schedule)
            epochs_this_call += 1
            log.info("stage 2 epoch %d/%d done (step %d)", state.stage2_epochs, cfg.s_adv, state.global_step)
            save_state(state, cfg, out / "last.ckpt")
            if on_epoch:
                on_epoch(state)
        save_state(state, cfg, out / "final.ckpt")
        return out / "final.ckpt"
    finally:
        state.sink = None
        fh.close()


def trace_digest(losses: list[dict]) -> str:
    return hashlib.sha256(json.dumps(losses, sort_keys=True).encode()).hexdigest()
