"""Deterministic DDIM sampling/inversion and classifier-free guidance.

Latents are ``torch.Tensor`` objects of shape ``(C, H, W)``; the step rules
are plain arithmetic and work for any float dtype, so gradient checks can
run the same code in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

from .errors import ParameterError, ShapeError

DEFAULT_TRAIN_STEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True)
class NoiseSchedule:
    train_steps: int
    alpha_bar: np.ndarray  # float64, length train_steps + 1, alpha_bar[0] == 1
    inference_steps: int
    timestep_map: tuple  # strictly decreasing train timesteps, one per inference step

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def step(self, s: int):
        """Return ``(t, abar_t, abar_prev)`` for 1-based denoising step ``s``."""
        t = self.timestep_map[s - 1]
        prev = self.timestep_map[s] if s < self.inference_steps else 0
        return t, self.abar(t), self.abar(prev)


def make_schedule(
    train_steps: int = DEFAULT_TRAIN_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    inference_steps: int = 50,
) -> NoiseSchedule:
    """Scaled-linear schedule (betas linear in sqrt space) with a uniform-stride
    inference grid whose last step lands on train timestep 1."""
    if not 0 < beta_start < beta_end < 1:
        raise ParameterError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if train_steps < 1:
        raise ParameterError("train_steps must be positive")
    if not 1 <= inference_steps <= train_steps:
        raise ParameterError(f"inference_steps must lie in [1, {train_steps}], got {inference_steps}")

    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), train_steps, dtype=np.float64) ** 2
    betas[0] = beta_start
    betas[-1] = beta_end
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    stride = train_steps // inference_steps
    timestep_map = tuple(1 + k * stride for k in reversed(range(inference_steps)))
    return NoiseSchedule(train_steps, alpha_bar, inference_steps, timestep_map)


@dataclass
class SamplerConfig:
    guidance_scale: float = 7.5
    steps: int = 50
    eta: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if not math.isfinite(self.guidance_scale) or self.guidance_scale < 0:
            raise ParameterError(f"guidance_scale must be finite and >= 0, got {self.guidance_scale}")
        if self.eta != 0:
            raise ParameterError("only deterministic DDIM (eta = 0) is supported")

    def inversion(self) -> "SamplerConfig":
        return SamplerConfig(guidance_scale=1.0, steps=self.steps)


@dataclass
class Trajectory:
    """Latents ordered from Z_T (index 0) to Z_0 (index T)."""

    latents: list
    guidance_scale: float
    embedding_id: str = ""

    def __post_init__(self):
        if len(self.latents) < 2:
            raise ShapeError("a trajectory holds at least Z_T and Z_0")
        shape = self.latents[0].shape
        if any(z.shape != shape for z in self.latents):
            raise ShapeError("all latents in a trajectory must share one shape")

    @property
    def steps(self) -> int:
        return len(self.latents) - 1

    @property
    def z_T(self) -> torch.Tensor:
        return self.latents[0]

    @property
    def z_0(self) -> torch.Tensor:
        return self.latents[-1]

    def stacked(self) -> torch.Tensor:
        return torch.stack(self.latents)


class BranchPair(NamedTuple):
    """Per-branch values of one guided prediction (captures or directives)."""

    uncond: Optional[object]
    cond: Optional[object]


def _check_abar(*values):
    for a in values:
        if not 0 < a <= 1:
            raise ParameterError(f"alpha_bar must lie in (0, 1], got {a}")


def cfg_combine(eps_uncond, eps_cond, guidance_scale: float):
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"branch shapes differ: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    # endpoints are returned as-is so scale 1 (inversion) is exactly the conditional branch
    if guidance_scale == 1:
        return eps_cond
    if guidance_scale == 0:
        return eps_uncond
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


def predict_x0(z_t, eps, abar_t: float):
    return (z_t - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)


def ddim_sample_step(z_t, eps, abar_t: float, abar_prev: float):
    _check_abar(abar_t, abar_prev)
    if z_t.shape != eps.shape:
        raise ShapeError("latent and noise shapes differ")
    if abar_prev == 1:
        return predict_x0(z_t, eps, abar_t)
    return _ddim_move(z_t, eps, abar_t, abar_prev)


def ddim_invert_step(z_t, eps, abar_t: float, abar_next: float):
    _check_abar(abar_t, abar_next)
    if abar_next > abar_t:
        raise ParameterError("inversion must move toward noise (abar_next <= abar_t)")
    if z_t.shape != eps.shape:
        raise ShapeError("latent and noise shapes differ")
    if abar_next == abar_t:
        return z_t
    return _ddim_move(z_t, eps, abar_t, abar_next)


def _ddim_move(z_t, eps, abar_t, abar_to):
    # Same map as x0-then-renoise, folded into two coefficients and evaluated in
    # double so sample and invert stay exact inverses in single precision.
    a = math.sqrt(abar_to / abar_t)
    b = math.sqrt(1.0 - abar_to) - a * math.sqrt(1.0 - abar_t)
    out = a * z_t.double() + b * eps.double()
    return out.to(z_t.dtype)


def carried_sample_step(work, eps, abar_t: float, abar_prev: float, dtype):
    """Sampling step on a double-precision running latent.

    Returns ``(work, z)`` where ``z`` is ``work`` rounded to ``dtype``; the
    network is always evaluated on the rounded copy, so every loop that uses
    this helper produces bit-identical trajectories.
    """
    work = ddim_sample_step(work.double(), eps.double(), abar_t, abar_prev)
    return work, work.to(dtype)


EmbeddingSource = Union[object, Sequence, Callable[[int], object]]


def as_provider(source) -> Callable[[int], object]:
    """Normalize an embedding source to ``provider(step) -> embedding``.

    Accepts a single embedding (constant), a sequence indexed by 1-based
    step, or a callable already taking the step.
    """
    if callable(source) and not hasattr(source, "tokens"):
        return source
    if isinstance(source, (list, tuple)):
        items = list(source)
        return lambda s: items[s - 1]
    return lambda s: source


def schedule_for(backbone, steps: int) -> NoiseSchedule:
    return make_schedule(backbone.train_steps, backbone.beta_start, backbone.beta_end, steps)


def guided_noise(backbone, z, t, cond, uncond, guidance_scale, capture=False, directive: Optional[BranchPair] = None):
    """Classifier-free-guided noise prediction.

    Returns ``(eps, BranchPair(uncond_capture, cond_capture))``. At guidance 1
    the unconditional branch is skipped entirely.
    """
    directive = directive or BranchPair(None, None)
    eps_c, cap_c = backbone.predict_noise(z, t, cond, capture=capture, directive=directive.cond)
    if guidance_scale == 1:
        return eps_c, BranchPair(None, cap_c)
    eps_u, cap_u = backbone.predict_noise(z, t, uncond, capture=capture, directive=directive.uncond)
    return cfg_combine(eps_u, eps_c, guidance_scale), BranchPair(cap_u, cap_c)


def sample_trajectory(
    z_T: torch.Tensor,
    embeddings: EmbeddingSource,
    backbone,
    cfg: SamplerConfig,
    directives=None,
    uncond: EmbeddingSource = None,
    embedding_id: str = "",
) -> Trajectory:
    """Run ``cfg.steps`` guided DDIM denoising steps from ``z_T``.

    ``directives``, when given, maps the 1-based step to a ``BranchPair`` of
    injection directives (or ``None`` for no injection at that step).
    """
    if tuple(z_T.shape) != tuple(backbone.latent_shape):
        raise ShapeError(f"latent shape {tuple(z_T.shape)} does not match backbone {backbone.latent_shape}")
    cond_at = as_provider(embeddings)
    uncond_at = as_provider(uncond if uncond is not None else backbone.null_embedding)
    directive_at = as_provider(directives) if directives is not None else (lambda s: None)
    schedule = schedule_for(backbone, cfg.steps)

    # the running latent is carried in double; only the recorded copies are
    # rounded to the input dtype, so rounding does not compound across steps
    latents = [z_T]
    z, work = z_T, z_T.double()
    with torch.no_grad():
        for s in range(1, cfg.steps + 1):
            t, abar_t, abar_prev = schedule.step(s)
            eps, _ = guided_noise(backbone, z, t, cond_at(s), uncond_at(s), cfg.guidance_scale, directive=directive_at(s))
            work, z = carried_sample_step(work, eps, abar_t, abar_prev, z_T.dtype)
            latents.append(z)
    return Trajectory(latents, cfg.guidance_scale, embedding_id)


def invert_trajectory(
    z_0: torch.Tensor,
    embedding,
    backbone,
    cfg: Optional[SamplerConfig] = None,
    uncond=None,
    embedding_id: str = "",
) -> Trajectory:
    """DDIM inversion of ``z_0``; the result is indexed like a sampling run
    (index 0 is Z_T). Noise is evaluated at the current latent with the
    label of the timestep being moved to."""
    cfg = cfg or SamplerConfig(guidance_scale=1.0)
    if tuple(z_0.shape) != tuple(backbone.latent_shape):
        raise ShapeError(f"latent shape {tuple(z_0.shape)} does not match backbone {backbone.latent_shape}")
    schedule = schedule_for(backbone, cfg.steps)
    uncond = uncond if uncond is not None else backbone.null_embedding

    latents = [z_0]
    z, work = z_0, z_0.double()
    with torch.no_grad():
        for s in range(cfg.steps, 0, -1):
            t, abar_t, abar_prev = schedule.step(s)
            eps, _ = guided_noise(backbone, z, t, embedding, uncond, cfg.guidance_scale)
            work = ddim_invert_step(work, eps.double(), abar_prev, abar_t)
            z = work.to(z_0.dtype)
            latents.append(z)
    latents.reverse()
    return Trajectory(latents, cfg.guidance_scale, embedding_id)
