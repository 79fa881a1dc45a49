"""Progressive transition embeddings and balanced attention injection.

Three guided DDIM processes run in lockstep from the same Z_T:

* reconstruction, under the fine-tuned per-step embeddings;
* transition, under embeddings interpolated between the fine-tuned ones and
  the target embedding with a weight that ramps from large to small;
* editing, under the target embedding, whose self-attention probabilities
  are taken from the reconstruction process and whose cross-attention
  probabilities are taken from the transition process during the early
  fraction of the denoising steps. Value projections always stay with the
  editing process.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone.base import CROSS, SELF, InjectionDirective, TextEmbedding
from .diffusion import BranchPair, SamplerConfig, Trajectory, carried_sample_step, guided_noise, sample_trajectory, schedule_for
from .errors import ConfigError, ParameterError, ShapeError, UnsupportedError
from .ttis import FineTunedSchedule, InversionMode


@dataclass
class InterpolationSchedule:
    omegas: list  # one weight per denoising step, first step first

    def __post_init__(self):
        if any(not 0.0 <= w <= 1.0 for w in self.omegas):
            raise ParameterError("interpolation weights must lie in [0, 1]")

    def __len__(self):
        return len(self.omegas)

    def __getitem__(self, s):
        return self.omegas[s]


@dataclass
class EditConfig:
    omega_start: float = 0.8
    omega_end: float = 0.1
    sa_fraction: float = 0.3
    ca_fraction: float = 0.6
    rigid_mode: bool = False
    guidance_scale: float = 7.5
    steps: int = 50
    omega_mode: str = "linear"  # or "uniform": sorted draws from U(omega_end, omega_start)
    omega_seed: int = 0
    window: str = "early"  # or "late": inject during the last fraction of steps
    layers: Optional[list] = None  # attention layer ids to inject into; None means all

    def __post_init__(self):
        for name in ("sa_fraction", "ca_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.omega_mode not in ("linear", "uniform"):
            raise ParameterError("omega_mode is 'linear' or 'uniform'")
        if self.window not in ("early", "late"):
            raise ParameterError("window is 'early' or 'late'")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(guidance_scale=self.guidance_scale, steps=self.steps)

    def interpolation(self) -> InterpolationSchedule:
        return omega_schedule(
            self.omega_start, self.omega_end, self.steps, self.rigid_mode, mode=self.omega_mode, seed=self.omega_seed
        )


@dataclass
class EditResult:
    edited: Trajectory
    transition: Trajectory
    reconstruction: Trajectory
    image_edit: np.ndarray
    image_transition: np.ndarray
    image_reconstruction: np.ndarray
    image_initial: Optional[np.ndarray] = None
    initial: Optional[Trajectory] = None
    injected_steps: dict = field(default_factory=dict)


def omega_schedule(omega_start=0.8, omega_end=0.1, T=50, rigid_mode=False, mode="linear", seed=0) -> InterpolationSchedule:
    if T < 1:
        raise ParameterError("T must be >= 1")
    if rigid_mode:
        return InterpolationSchedule([1.0] * T)
    if not 0.0 <= omega_end <= omega_start <= 1.0:
        raise ParameterError(f"need 0 <= omega_end <= omega_start <= 1, got {omega_start}, {omega_end}")
    if mode == "uniform":
        draws = np.random.default_rng(seed).uniform(omega_end, omega_start, T)
        return InterpolationSchedule(sorted(draws.tolist(), reverse=True))
    if T == 1:
        return InterpolationSchedule([float(omega_start)])
    return InterpolationSchedule(
        [omega_start + (s - 1) / (T - 1) * (omega_end - omega_start) for s in range(1, T + 1)]
    )


def interpolate_embedding(phi_opt: TextEmbedding, phi_cond: TextEmbedding, omega: float) -> TextEmbedding:
    if phi_opt.shape != phi_cond.shape:
        raise ShapeError(f"embedding shapes differ: {phi_opt.shape} vs {phi_cond.shape}")
    if not 0.0 <= omega <= 1.0:
        raise ParameterError("omega must lie in [0, 1]")
    if omega == 1:
        return phi_opt
    if omega == 0:
        return phi_cond
    a, b = phi_opt.tokens, phi_cond.tokens
    mixed = omega * a + (1 - omega) * b
    # keep every entry inside the hull despite rounding
    mixed = torch.minimum(torch.maximum(mixed, torch.minimum(a, b)), torch.maximum(a, b))
    return TextEmbedding(mixed, is_null=False)


def injection_window(step: int, fraction: float, T: int, anchor: str = "early") -> bool:
    """Whether 1-based denoising ``step`` falls in the injected fraction of ``T`` steps."""
    count = math.floor(fraction * T + 1e-9)
    if anchor == "late":
        return step > T - count
    return step <= count


def _dump_maps(dump_dir, step, process, capture, kind):
    from PIL import Image

    for layer_id, probs in capture.of_kind(kind).items():
        mean = probs.mean(dim=0).to(torch.float32)  # (queries, keys)
        if kind == SELF:
            planes = {"all": mean}
        else:
            side = int(round(math.sqrt(mean.shape[0])))
            planes = {f"tok{k}": mean[:, k].reshape(side, side) for k in range(mean.shape[1])}
        for tag, plane in planes.items():
            peak = float(plane.max()) or 1.0
            img = (plane / peak * 255).clamp(0, 255).round().to(torch.uint8).numpy()
            name = f"step{step:03d}_{process}_{layer_id}_{tag}.png"
            Image.fromarray(img, mode="L").save(os.path.join(dump_dir, name))


def _directive_for(step, cfg: EditConfig, rec_caps: BranchPair, inp_caps: BranchPair, layer_filter):
    use_self = injection_window(step, cfg.sa_fraction, cfg.steps, cfg.window)
    use_cross = injection_window(step, cfg.ca_fraction, cfg.steps, cfg.window)
    if not (use_self or use_cross):
        return None, use_self, use_cross
    branches = []
    for rec, inp in zip(rec_caps, inp_caps):
        if rec is None and inp is None:
            branches.append(None)
            continue
        d = InjectionDirective()
        if use_self:
            d = d.merge(InjectionDirective.from_capture(rec, SELF, "reconstruction", layer_filter))
        if use_cross:
            d = d.merge(InjectionDirective.from_capture(inp, CROSS, "transition", layer_filter))
        branches.append(d or None)
    return BranchPair(*branches), use_self, use_cross


def run_bam_edit(
    z_T: torch.Tensor,
    schedule: FineTunedSchedule,
    phi_cond: TextEmbedding,
    edit_cfg: EditConfig,
    backbone,
    include_initial: bool = True,
    dump_dir: Optional[str] = None,
) -> EditResult:
    """Run reconstruction, transition and editing processes in lockstep."""
    if schedule.mode != InversionMode.TARGET_TEXT:
        raise ConfigError("attention-balanced editing needs a target-text schedule")
    if len(schedule) != edit_cfg.steps:
        raise ConfigError(f"schedule has {len(schedule)} steps, edit config expects {edit_cfg.steps}")
    if not (backbone.supports_attention_capture and backbone.supports_attention_injection):
        raise UnsupportedError("backbone must support attention capture and injection")
    if tuple(z_T.shape) != tuple(backbone.latent_shape):
        raise ShapeError(f"latent shape {tuple(z_T.shape)} does not match backbone {backbone.latent_shape}")

    layer_filter = None
    if edit_cfg.layers is not None:
        known = set(backbone.layer_kinds())
        unknown = set(edit_cfg.layers) - known
        if unknown:
            raise ConfigError(f"unknown attention layers: {sorted(unknown)}")
        wanted = set(edit_cfg.layers)
        layer_filter = wanted.__contains__

    omegas = edit_cfg.interpolation()
    null = schedule.fixed
    w = edit_cfg.guidance_scale
    noise_schedule = schedule_for(backbone, edit_cfg.steps)
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)

    z_rec = z_inp = z_edt = z_T
    w_rec = w_inp = w_edt = z_T.double()
    rec, inp, edt = [z_T], [z_T], [z_T]
    injected = {"self": 0, "cross": 0}
    with torch.no_grad():
        for s in range(1, edit_cfg.steps + 1):
            t, abar_t, abar_prev = noise_schedule.step(s)
            phi_opt = schedule.embeddings[s - 1]
            phi_inp = interpolate_embedding(phi_opt, phi_cond, omegas[s - 1])
            need_self = injection_window(s, edit_cfg.sa_fraction, edit_cfg.steps, edit_cfg.window)
            need_cross = injection_window(s, edit_cfg.ca_fraction, edit_cfg.steps, edit_cfg.window)

            eps_rec, rec_caps = guided_noise(backbone, z_rec, t, phi_opt, null, w, capture=need_self or bool(dump_dir))
            eps_inp, inp_caps = guided_noise(backbone, z_inp, t, phi_inp, null, w, capture=need_cross or bool(dump_dir))
            directive, used_self, used_cross = _directive_for(s, edit_cfg, rec_caps, inp_caps, layer_filter)
            eps_edt, _ = guided_noise(backbone, z_edt, t, phi_cond, null, w, directive=directive)
            injected["self"] += used_self
            injected["cross"] += used_cross

            if dump_dir:
                _dump_maps(dump_dir, s, "reconstruction", rec_caps.cond, SELF)
                _dump_maps(dump_dir, s, "transition", inp_caps.cond, CROSS)
            # capture buffers are dropped here; nothing is kept across steps

            w_rec, z_rec = carried_sample_step(w_rec, eps_rec, abar_t, abar_prev, z_T.dtype)
            w_inp, z_inp = carried_sample_step(w_inp, eps_inp, abar_t, abar_prev, z_T.dtype)
            w_edt, z_edt = carried_sample_step(w_edt, eps_edt, abar_t, abar_prev, z_T.dtype)
            rec.append(z_rec)
            inp.append(z_inp)
            edt.append(z_edt)

    initial = None
    if include_initial:
        initial = sample_trajectory(z_T, phi_cond, backbone, edit_cfg.sampler(), uncond=null, embedding_id="initial")
    return EditResult(
        edited=Trajectory(edt, w, "edit"),
        transition=Trajectory(inp, w, "transition"),
        reconstruction=Trajectory(rec, w, "reconstruction"),
        image_edit=backbone.decode_image(z_edt),
        image_transition=backbone.decode_image(z_inp),
        image_reconstruction=backbone.decode_image(z_rec),
        image_initial=None if initial is None else backbone.decode_image(initial.z_0),
        initial=initial,
        injected_steps=injected,
    )


def transition_embeddings(schedule: FineTunedSchedule, phi_cond: TextEmbedding, interpolation: InterpolationSchedule):
    if len(interpolation) != len(schedule):
        raise ConfigError("interpolation and schedule lengths differ")
    return [interpolate_embedding(e, phi_cond, w) for e, w in zip(schedule.embeddings, interpolation.omegas)]


def run_transition_only(
    z_T, schedule: FineTunedSchedule, phi_cond: TextEmbedding, interpolation: InterpolationSchedule, backbone,
    sampler_cfg: Optional[SamplerConfig] = None,
):
    """Sample the transition process alone; returns ``(trajectory, image)``."""
    sampler_cfg = sampler_cfg or SamplerConfig(steps=len(schedule))
    embeddings = transition_embeddings(schedule, phi_cond, interpolation)
    traj = sample_trajectory(z_T, embeddings, backbone, sampler_cfg, uncond=schedule.fixed, embedding_id="transition")
    return traj, backbone.decode_image(traj.z_0)
