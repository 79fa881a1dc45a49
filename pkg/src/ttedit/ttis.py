"""Target-text inversion schedule.

Inverts an image latent with DDIM at guidance 1, then walks the guided
sampling process back down from Z_T, fine-tuning a fresh copy of the
target-text embedding at every timestep so the sampled latent lands on the
inversion trajectory. A null-text baseline optimizes the unconditional
embedding instead, with otherwise identical machinery.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from .backbone.base import TextEmbedding
from .diffusion import (
    SamplerConfig,
    Trajectory,
    ddim_sample_step,
    guided_noise,
    invert_trajectory,
    sample_trajectory,
    schedule_for,
)
from .errors import ConfigError, NumericError, ParameterError, ShapeError, UnsupportedError

log = logging.getLogger(__name__)


class InversionMode(str, enum.Enum):
    TARGET_TEXT = "target-text"
    NULL_TEXT = "null-text"


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    inner_iterations: int = 5
    total_budget: int = 250
    threshold_coefficient: float = 1e-5
    # "rising": counter = completed denoising steps (1 at t = T); "literal": counter = t index (T at t = T)
    threshold_index: str = "rising"
    enforce_budget: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ParameterError("learning_rate must be finite and >= 0")
        if self.inner_iterations < 0 or self.total_budget < 0:
            raise ParameterError("iteration counts must be >= 0")
        if self.threshold_index not in ("rising", "literal"):
            raise ParameterError("threshold_index is 'rising' or 'literal'")


@dataclass
class IterationRecord:
    mode: str
    step: int
    inner_iter: int
    loss: float
    threshold: float


@dataclass
class FineTunedSchedule:
    """Per-step optimized embeddings, ordered from the first denoising step (t = T).

    ``fixed`` is the embedding that was held constant: the null embedding in
    target-text mode, the target embedding in null-text mode.
    """

    embeddings: list
    per_step_loss: list
    iterations_used: list
    mode: InversionMode
    fixed: TextEmbedding

    def __post_init__(self):
        if not (len(self.embeddings) == len(self.per_step_loss) == len(self.iterations_used)):
            raise ShapeError("schedule fields must have one entry per step")

    def __len__(self):
        return len(self.embeddings)

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iterations_used))

    def cond(self):
        return self.embeddings if self.mode == InversionMode.TARGET_TEXT else self.fixed

    def uncond(self):
        return self.fixed if self.mode == InversionMode.TARGET_TEXT else self.embeddings


@dataclass
class StepResult:
    embedding: TextEmbedding
    z_star_prev: torch.Tensor
    iterations: int
    final_loss: float


@dataclass
class TTISResult:
    schedule: FineTunedSchedule
    inversion: Trajectory
    initial: Trajectory
    reconstruction: Trajectory
    records: list = field(default_factory=list)


def early_stop_threshold(step_counter: int, coefficient: float = 1e-5) -> float:
    if step_counter < 1:
        raise ParameterError("step counter starts at 1")
    return step_counter * coefficient


def _mse(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).square().mean()


def reconstruction_loss(z_pred, z_target) -> float:
    return float(_mse(z_pred, z_target))


def finetune_timestep(
    step: int,
    z_star_t: torch.Tensor,
    z_target_prev: torch.Tensor,
    init_embedding: TextEmbedding,
    fixed_embedding: TextEmbedding,
    backbone,
    sampler_cfg: SamplerConfig,
    opt_cfg: OptimizerConfig,
    mode: InversionMode,
    step_counter: int,
    max_iterations: Optional[int] = None,
    records: Optional[list] = None,
) -> StepResult:
    """Optimize one timestep's embedding so the guided DDIM step from
    ``z_star_t`` reproduces ``z_target_prev``.

    ``z_star_t`` may be a double-precision running latent; the network sees
    it rounded to the target's dtype, as in ``sample_trajectory``.

    Stops as soon as the loss is at or below the early-stop threshold, or
    after ``max_iterations`` (default ``opt_cfg.inner_iterations``) Adam
    updates. The returned latent is the DDIM step under the final embedding.
    """
    mode = InversionMode(mode)
    schedule = schedule_for(backbone, sampler_cfg.steps)
    t, abar_t, abar_prev = schedule.step(step)
    threshold = early_stop_threshold(step_counter, opt_cfg.threshold_coefficient)
    limit = opt_cfg.inner_iterations if max_iterations is None else min(max_iterations, opt_cfg.inner_iterations)

    variable = init_embedding.tokens.detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([variable], lr=opt_cfg.learning_rate)

    def guided_step():
        current = TextEmbedding(variable, is_null=False)
        if mode == InversionMode.TARGET_TEXT:
            cond, uncond = current, fixed_embedding
        else:
            cond, uncond = fixed_embedding, current
        eps, _ = guided_noise(backbone, z_star_t.to(z_target_prev.dtype), t, cond, uncond, sampler_cfg.guidance_scale)
        return ddim_sample_step(z_star_t.double(), eps.double(), abar_t, abar_prev)

    iterations = 0
    while True:
        with torch.enable_grad():
            z_pred = guided_step()
            loss = _mse(z_pred, z_target_prev)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite reconstruction loss at step {step}", step=step)
        if value <= threshold or iterations >= limit:
            break
        if records is not None:
            records.append(IterationRecord(mode.value, step, iterations + 1, value, threshold))
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        iterations += 1

    embedding = init_embedding if iterations == 0 else TextEmbedding(variable.detach().clone(), is_null=False)
    return StepResult(embedding, z_pred.detach(), iterations, value)


def run_ttis(
    z_0: torch.Tensor,
    target,
    backbone,
    sampler_cfg: Optional[SamplerConfig] = None,
    opt_cfg: Optional[OptimizerConfig] = None,
    mode: InversionMode = InversionMode.TARGET_TEXT,
    inversion_condition: str = "target",
    progress: Optional[Callable] = None,
) -> TTISResult:
    """Full target-text inversion of ``z_0`` for ``target`` (a prompt or an embedding).

    ``inversion_condition`` selects which embedding conditions the guidance-1
    inversion pass: ``"target"`` (default) or ``"null"``.
    """
    sampler_cfg = sampler_cfg or SamplerConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    mode = InversionMode(mode)
    if not backbone.supports_gradient_wrt_embedding:
        raise UnsupportedError("target-text inversion needs gradients w.r.t. the text embedding")
    if inversion_condition not in ("target", "null"):
        raise ConfigError("inversion_condition is 'target' or 'null'")

    phi_cond = target if isinstance(target, TextEmbedding) else backbone.encode_text(target)
    null = backbone.null_embedding
    T = sampler_cfg.steps

    inversion = invert_trajectory(
        z_0, phi_cond if inversion_condition == "target" else null, backbone, sampler_cfg.inversion(), uncond=null,
        embedding_id="inversion",
    )
    initial = sample_trajectory(inversion.z_T, phi_cond, backbone, sampler_cfg, uncond=null, embedding_id="initial")

    init, fixed = (phi_cond, null) if mode == InversionMode.TARGET_TEXT else (null, phi_cond)
    records = []
    embeddings, losses, used = [], [], []
    z_star = inversion.z_T.double()
    latents = [inversion.z_T]
    for s in range(1, T + 1):
        remaining = opt_cfg.total_budget - sum(used) if opt_cfg.enforce_budget else None
        counter = s if opt_cfg.threshold_index == "rising" else T - s + 1
        result = finetune_timestep(
            s, z_star, inversion.latents[s], init, fixed, backbone, sampler_cfg, opt_cfg, mode, counter,
            max_iterations=remaining, records=records,
        )
        embeddings.append(result.embedding)
        losses.append(result.final_loss)
        used.append(result.iterations)
        z_star = result.z_star_prev
        latents.append(z_star.to(z_0.dtype))
        if progress is not None:
            progress(s, result)
    log.info("TTIS %s: %d optimizer iterations over %d steps", mode.value, sum(used), T)

    schedule = FineTunedSchedule(embeddings, losses, used, mode, fixed)
    reconstruction = Trajectory(latents, sampler_cfg.guidance_scale, "reconstruction")
    return TTISResult(schedule, inversion, initial, reconstruction, records)


def reconstruct(schedule: FineTunedSchedule, z_T, backbone, sampler_cfg: Optional[SamplerConfig] = None):
    """Sample from ``z_T`` under the fine-tuned schedule; returns ``(trajectory, image)``."""
    sampler_cfg = sampler_cfg or SamplerConfig()
    if len(schedule) != sampler_cfg.steps:
        raise ConfigError(f"schedule has {len(schedule)} steps, sampler expects {sampler_cfg.steps}")
    traj = sample_trajectory(
        z_T, schedule.cond(), backbone, sampler_cfg, uncond=schedule.uncond(), embedding_id="reconstruction"
    )
    return traj, backbone.decode_image(traj.z_0)
