"""Noise schedule, forward noising, L2 objective, the two-stage trainer,
DDIM stepping, and classifier-free guidance."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .denoiser import (
    Denoiser,
    DenoiserConfig,
    drop_conditions,
    load_checkpoint,
    save_checkpoint,
)

DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

STAGE_GROUPS = {1: ("backbone", "guidance"), 2: ("condition",)}


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; index t runs 1..T (array index t-1)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [0, {self.T}], got {t}")
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(z_0: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Forward noising: sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps."""
    if z_0.shape != eps.shape:
        raise ValueError("z_0 and eps must share a shape")
    abar = schedule.alpha_bar(int(t))
    return math.sqrt(abar) * z_0 + math.sqrt(1.0 - abar) * eps


def ddim_timesteps(T: int, S: int) -> list[tuple[int, int]]:
    """S evenly spaced (t, t_prev) pairs descending from T to 0."""
    if not 1 <= S <= T:
        raise ValueError("need 1 <= S <= T")
    ts = [round(T * k / S) for k in range(S, 0, -1)]
    return list(zip(ts, ts[1:] + [0]))


def ddim_step(z_t: Tensor, eps_hat: Tensor, t: int, t_prev: int,
              schedule: NoiseSchedule, eta: float = 0.0,
              generator: torch.Generator | None = None) -> Tensor:
    """One deterministic (eta = 0) DDIM update via the predicted clean image."""
    if t_prev >= t:
        raise ValueError("t_prev must be < t")
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    x0_hat = (z_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    if eta == 0.0:
        return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_hat
    if generator is None:
        raise ValueError("eta != 0 requires a random generator")
    sigma = eta * math.sqrt((1 - abar_prev) / (1 - abar_t)) * math.sqrt(1 - abar_t / abar_prev)
    dir_coeff = math.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0))
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return math.sqrt(abar_prev) * x0_hat + dir_coeff * eps_hat + sigma * noise


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, w: float) -> Tensor:
    """Classifier-free guidance: uncond + w * (cond - uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("shapes must match")
    return eps_uncond + w * (eps_cond - eps_uncond)


@dataclass
class TrainConfig:
    stage: int = 1
    learning_rate: float = 5e-5      # peak rate after warmup
    warmup: int = 500                # linear warmup iterations
    dropout: float = 0.5             # null-condition probability
    batch_size: int = 16
    iterations: int = 1000
    seed: int = 0
    weight_decay: float = 0.01
    checkpoint_every: int = 0        # 0 = final checkpoint only
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        for name in ("learning_rate", "batch_size", "iterations"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup < 0 or not 0 <= self.dropout <= 1:
            raise ValueError("invalid warmup or dropout")


@dataclass
class SamplerConfig:
    steps: int = 20                  # DDIM steps S
    eta: float = 0.0
    guidance: float = 3.0            # CFG scale w
    alpha: float = 0.2               # instance-phase fraction of S
    beta: float = 0.2                # global weight in the fusion
    seed: int = 0
    fuse_mode: str = "literal"
    luma_lock: bool = False
    variant: str = "full"

    def __post_init__(self):
        if not 0 <= self.alpha <= 1 or not 0 <= self.beta <= 1:
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.fuse_mode not in ("literal", "convex"):
            raise ValueError("fuse_mode must be 'literal' or 'convex'")


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if target_type is tuple:
        parts = [p.strip() for p in value.split(",") if p.strip()]
        out = []
        for p in parts:
            try:
                out.append(int(p))
            except ValueError:
                out.append(float(p))
        return tuple(out)
    return target_type(value)


def parse_config(text: str, cls):
    """Parse `key = value` lines into a TrainConfig or SamplerConfig."""
    types = {f.name: type(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ValueError(f"line {lineno}: unknown {cls.__name__} field {key!r}")
        values[key] = _coerce(value.strip(), types[key])
    return cls(**values)


def format_config(cfg) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def training_loss(model: Denoiser, batch, schedule: NoiseSchedule,
                  dropout: float, generator: torch.Generator) -> Tensor:
    """Sample t and eps per item, apply condition dropout, return the mean
    squared noise-prediction error over the batch."""
    images, bundles = batch
    b = images.shape[0]
    ts = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    z = torch.stack([q_sample(images[i], int(ts[i]), eps[i], schedule) for i in range(b)])
    dropped = [drop_conditions(bundles[i], dropout, generator) for i in range(b)]
    eps_hat = model(z, ts, dropped)
    return ((eps_hat - eps) ** 2).mean()


@dataclass
class TrainResult:
    checkpoint_path: Path
    losses: list[float] = field(default_factory=list)


def warmup_lr(peak: float, warmup: int, iteration: int) -> float:
    if warmup <= 0:
        return peak
    return peak * min(1.0, (iteration + 1) / warmup)


def train_stage(stage: int, dataset, config: TrainConfig, out_path,
                schedule: NoiseSchedule | None = None,
                model_config: DenoiserConfig | None = None,
                resume_from=None, stage1_checkpoint=None) -> TrainResult:
    """Run one training stage and write a checkpoint.

    Stage 1 trains backbone + guidance from scratch (or ``resume_from``).
    Stage 2 requires ``stage1_checkpoint``, freezes everything it trained,
    and updates only the condition encoder + pixel cross-attention.
    """
    if stage not in STAGE_GROUPS:
        raise ValueError("stage must be 1 or 2")
    config = dataclasses.replace(config, stage=stage)
    schedule = schedule or make_schedule()
    torch.manual_seed(config.seed)

    if stage == 2:
        if stage1_checkpoint is None:
            raise FileNotFoundError(
                "stage 2 requires a stage-1 checkpoint (pass stage1_checkpoint)")
        model, meta = load_checkpoint(stage1_checkpoint)
        if meta.get("stage") not in (1, None):
            raise ValueError(f"expected a stage-1 checkpoint, got stage {meta.get('stage')}")
    elif resume_from is not None:
        model, _ = load_checkpoint(resume_from)
    else:
        model = Denoiser(model_config or DenoiserConfig())

    model.train()
    model.set_trainable_groups(STAGE_GROUPS[stage])
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=config.learning_rate,
                                  betas=(0.9, 0.999), weight_decay=config.weight_decay)

    generator = torch.Generator().manual_seed(config.seed)
    images, bundles = dataset
    n = images.shape[0]
    losses = []
    out_path = Path(out_path)
    for it in range(config.iterations):
        idx = torch.randint(0, n, (config.batch_size,), generator=generator)
        batch = (images[idx], [bundles[int(i)] for i in idx])
        for group in optimizer.param_groups:
            group["lr"] = warmup_lr(config.learning_rate, config.warmup, it)
        optimizer.zero_grad(set_to_none=True)
        loss = training_loss(model, batch, schedule, config.dropout, generator)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_path, model, meta={"stage": stage, "iteration": it + 1})
    save_checkpoint(out_path, model,
                    meta={"stage": stage, "iteration": config.iterations,
                          "seed": config.seed})
    return TrainResult(checkpoint_path=out_path, losses=losses)
