"""Deterministic DDIM sampler wired to the adaptable denoiser.

One trajectory is sequential: from seeded Gaussian noise, each step
evaluates the network (twice for standard guidance, three times when the
plan damps noise in reverted blocks: base-model unconditional plus the
adapted conditional/unconditional pair), combines the predictions, and
applies the deterministic update

    x <- sqrt(abar_next) * x0_hat + sqrt(1 - abar_next) * eps.

The per-step model evaluations are independent and are farmed out via
map_in_order, so the result is identical for any worker count.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, ParameterError
from .guidance import noise_damped_cfg, standard_cfg
from .images import channel_mean_frame, write_pgm
from .plans import AdaptationPlan, resolve_operators
from .runtime import map_in_order
from .tensorcore import check_tensor

__all__ = [
    "NoiseSchedule",
    "SampleResult",
    "SamplerConfig",
    "StepRecord",
    "inference_timesteps",
    "predicted_x0",
    "sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta forward process; alpha_bar(t) = prod_{s<=t} (1 - beta_s)."""

    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self) -> None:
        if self.train_steps < 1:
            raise ParameterError(f"train_steps must be >= 1, got {self.train_steps}")
        if not 0.0 < self.beta_start < 1.0:
            raise ParameterError(f"beta_start must lie in (0, 1), got {self.beta_start}")
        if not self.beta_start <= self.beta_end < 1.0:
            raise ParameterError(
                f"beta_end must lie in [beta_start, 1), got {self.beta_end}"
            )
        betas = np.linspace(self.beta_start, self.beta_end, self.train_steps, dtype=np.float64)
        object.__setattr__(self, "_bars", np.cumprod(1.0 - betas))

    def alpha_bar(self, t: int) -> float:
        t = int(t)
        if not 0 <= t < self.train_steps:
            raise ParameterError(f"timestep {t} outside 0..{self.train_steps - 1}")
        return float(self._bars[t])


def inference_timesteps(count: int, train_steps: int = 1000) -> tuple:
    """Uniformly strided training timesteps, noisiest first, ending at 0."""
    if count < 1:
        raise ConfigError(f"inference step count must be >= 1, got {count}")
    stride = train_steps // count
    if stride < 1:
        raise ConfigError(
            f"{count} inference steps cannot stride {train_steps} training steps"
        )
    return tuple((count - 1 - i) * stride for i in range(count))


def predicted_x0(x_t: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    """Closed-form original-sample estimate (x_t - sqrt(1-abar) eps) / sqrt(abar)."""
    x_t = check_tensor(x_t, "x_t")
    eps = check_tensor(eps, "eps")
    if x_t.shape != eps.shape:
        raise DimensionError(f"x_t shape {x_t.shape} != eps shape {eps.shape}")
    ab = float(alpha_bar)
    if not 0.0 < ab <= 1.0:
        raise NumericalError(f"alpha_bar must lie in (0, 1], got {ab}")
    return (x_t - np.float32(math.sqrt(1.0 - ab)) * eps) / np.float32(math.sqrt(ab))


@dataclass(frozen=True)
class SamplerConfig:
    """Run parameters; steps/tau/guidance default to the plan's values."""

    steps: Optional[int] = None
    tau: Optional[int] = None
    guidance: Optional[float] = None
    seed: int = 0
    latent_shape: tuple = (4, 64, 64)
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    deterministic: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "latent_shape", tuple(self.latent_shape))
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.tau is not None and self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.steps is not None and self.tau is not None and self.tau > self.steps:
            raise ConfigError(f"tau {self.tau} exceeds step count {self.steps}")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        shape = self.latent_shape
        if len(shape) != 3 or any(not isinstance(v, (int, np.integer)) or v < 1 for v in shape):
            raise ConfigError(f"latent_shape must be three positive ints (C,H,W), got {shape}")
        if self.train_steps < 1:
            raise ConfigError(f"train_steps must be >= 1, got {self.train_steps}")
        if not self.deterministic:
            raise ConfigError("only the deterministic (zero-stochasticity) update is provided")

    def replace(self, **changes) -> "SamplerConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class StepRecord:
    """Per-step diagnostics handed to the on_step callback."""

    index: int
    timestep: int
    alpha_bar: float
    eps: np.ndarray
    x0: np.ndarray
    residual: float


@dataclass(frozen=True)
class SampleResult:
    output: np.ndarray
    residuals: tuple
    timesteps: tuple


def _merge_plan(plan: AdaptationPlan, cfg: SamplerConfig) -> AdaptationPlan:
    changes = {}
    if cfg.steps is not None and cfg.steps != plan.steps:
        changes["steps"] = cfg.steps
    if cfg.tau is not None and cfg.tau != plan.tau:
        changes["tau"] = cfg.tau
    if cfg.guidance is not None and cfg.guidance != plan.guidance:
        changes["guidance"] = cfg.guidance
    return dataclasses.replace(plan, **changes) if changes else plan


def sample(
    model,
    plan: AdaptationPlan,
    cfg: SamplerConfig,
    cond: Optional[int] = None,
    base_model=None,
    on_step: Optional[Callable[[StepRecord], None]] = None,
    dump_dir: Optional[Union[str, Path]] = None,
) -> SampleResult:
    """Run the full reverse trajectory and return the final latent.

    When the plan names noise-damped blocks, guidance combines the base
    model's unconditional prediction (adaptations stripped in the damped
    blocks) with the adapted conditional/unconditional difference;
    otherwise plain classifier-free guidance runs on the adapted model.
    base_model defaults to the same network instance.
    """
    plan = _merge_plan(plan, cfg)
    schedule = NoiseSchedule(cfg.train_steps, cfg.beta_start, cfg.beta_end)
    timesteps = inference_timesteps(plan.steps, cfg.train_steps)
    operators = resolve_operators(plan) if plan.dispersed else {}
    damped = plan.is_noise_damped()
    base = model if base_model is None else base_model
    base_plan = plan.base_plan()

    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((1,) + cfg.latent_shape).astype(np.float32)

    dump = None
    if dump_dir is not None:
        dump = Path(dump_dir)
        dump.mkdir(parents=True, exist_ok=True)

    residuals = []
    for i, t in enumerate(timesteps):
        ab = schedule.alpha_bar(t)

        def evaluate(job):
            net, job_plan, job_cond = job
            return net.forward(
                x, i, cond=job_cond, plan=job_plan, operators=operators, timestep=t
            )

        if damped:
            outs = map_in_order(
                evaluate,
                [(base, base_plan, None), (model, plan, cond), (model, plan, None)],
            )
            eps = noise_damped_cfg(outs[0], outs[1], outs[2], plan.guidance)
            eps_cond, eps_uncond = outs[1], outs[2]
        else:
            outs = map_in_order(evaluate, [(model, plan, cond), (model, plan, None)])
            eps = standard_cfg(outs[0], outs[1], plan.guidance)
            eps_cond, eps_uncond = outs

        x0 = predicted_x0(x, eps, ab)
        residual = math.sqrt(1.0 - ab) * float(
            np.sqrt(np.mean(np.square(eps, dtype=np.float64)))
        )
        residuals.append(residual)

        if on_step is not None:
            on_step(
                StepRecord(
                    index=i, timestep=t, alpha_bar=ab, eps=eps, x0=x0, residual=residual
                )
            )
        if dump is not None:
            write_pgm(dump / f"step_{i:03d}_x0.pgm", channel_mean_frame(x0))
            write_pgm(dump / f"step_{i:03d}_cond.pgm", channel_mean_frame(eps_cond))
            write_pgm(dump / f"step_{i:03d}_uncond.pgm", channel_mean_frame(eps_uncond))
            write_pgm(dump / f"step_{i:03d}_diff.pgm", channel_mean_frame(eps_cond - eps_uncond))

        ab_next = 1.0 if i == len(timesteps) - 1 else schedule.alpha_bar(timesteps[i + 1])
        x = np.float32(math.sqrt(ab_next)) * x0 + np.float32(math.sqrt(1.0 - ab_next)) * eps

    return SampleResult(output=x, residuals=tuple(residuals), timesteps=timesteps)
