"""End-to-end jobs: invert, edit, reconstruct, bench and the interpolation sweep."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import cache as cachefmt
from .backbone import shapes
from .backbone.adapter import require_toy
from .backbone.toy import ToyBackbone, ToyBackboneConfig, from_state_arrays, state_arrays, train_toy_backbone
from .cache import CacheFile, read_cache, write_cache
from .diffusion import SamplerConfig
from .errors import ConfigError, EditError
from .metrics import build_report, latent_mse, psnr
from .transition import EditConfig, run_bam_edit
from .ttis import InversionMode, OptimizerConfig, early_stop_threshold, reconstruct, run_ttis

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = "toy_default.brtc"
SWEEP_OMEGAS = ((0.9, 0.1), (0.8, 0.1), (0.6, 0.1), (0.5, 0.1), (0.0, 0.0))


# ---------------------------------------------------------------- backbones


def save_toy(backbone: ToyBackbone, path) -> Path:
    meta = {
        "config": backbone.config.to_dict(),
        "loss_curve": [list(p) for p in backbone.loss_curve],
        "digest": backbone.weights_digest(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(cachefmt.pack(cachefmt.KIND_WEIGHTS, meta, state_arrays(backbone)))
    return path


def load_toy(path) -> ToyBackbone:
    _, meta, arrays = cachefmt.unpack(Path(path).read_bytes(), cachefmt.KIND_WEIGHTS)
    cfg = ToyBackboneConfig.from_dict(meta["config"])
    return from_state_arrays(cfg, arrays, [tuple(p) for p in meta.get("loss_curve", [])])


def bundled_weights() -> Path:
    return Path(str(resources.files("ttedit") / "data" / DEFAULT_WEIGHTS))


def default_toy(config: Optional[ToyBackboneConfig] = None, train_if_missing: bool = True) -> ToyBackbone:
    """Trained toy backbone for ``config`` (default config uses the bundled weights).

    Other configs are trained once and kept under the cache directory.
    """
    config = config or ToyBackboneConfig()
    if config == ToyBackboneConfig() and bundled_weights().exists():
        return load_toy(bundled_weights())
    path = cachefmt.cache_dir() / f"toy-{config.digest()}.brtc"
    if path.exists():
        return load_toy(path)
    if not train_if_missing:
        raise ConfigError(f"no trained toy weights at {path}; run `train-toy` first")
    log.info("training toy backbone (%d steps) into %s", config.train_steps, path)
    backbone = train_toy_backbone(config)
    save_toy(backbone, path)
    return backbone


def load_backbone(selector: str = "toy", weights: Optional[str] = None):
    if selector == "toy":
        return load_toy(weights) if weights else default_toy()
    if selector == "adapter":
        raise ConfigError(
            "the adapter backbone needs externally loaded networks; construct "
            "ttedit.backbone.adapter.AdapterBackbone in Python instead of using the CLI"
        )
    raise ConfigError(f"unknown backbone {selector!r}")


def backbone_info(backbone) -> dict:
    if isinstance(backbone, ToyBackbone):
        return {"kind": "toy", "config": backbone.config.to_dict(), "digest": backbone.weights_digest()}
    return {"kind": type(backbone).__name__}


# ---------------------------------------------------------------- toy suites


@dataclass
class ToyCase:
    index: int
    source: shapes.Scene
    target: shapes.Scene
    image: np.ndarray

    @property
    def prompt(self) -> str:
        return " ".join(self.target.prompt())


def mismatch_suite(n: int = 20, seed: int = 1234, size: int = 16) -> list:
    """``n`` deterministic cases whose target prompt differs from the image in one attribute."""
    cases = []
    for i in range(n):
        src, tgt = shapes.mismatch_case(i, seed)
        cases.append(ToyCase(i, src, tgt, shapes.render_uint8(src, size)))
    return cases


# ---------------------------------------------------------------- jobs


@dataclass
class JobConfig:
    image: Optional[str] = None
    prompt: str = ""
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    mode: InversionMode = InversionMode.TARGET_TEXT
    inversion_condition: str = "target"
    backbone: str = "toy"
    weights: Optional[str] = None
    seed: int = 0
    out: Optional[str] = None

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise ConfigError("the target prompt must be non-empty")

    def effective(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = InversionMode(self.mode).value
        return d


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(image: np.ndarray, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")
    return path


def invert_image(image: np.ndarray, job: JobConfig, backbone=None, progress=None) -> CacheFile:
    backbone = backbone or load_backbone(job.backbone, job.weights)
    torch.manual_seed(job.seed)
    z0 = backbone.encode_image(image)
    started = time.perf_counter()
    result = run_ttis(
        z0, job.prompt, backbone, job.sampler, job.optimizer, job.mode, job.inversion_condition, progress=progress
    )
    elapsed = time.perf_counter() - started
    log.info("inversion took %.1fs (%d iterations)", elapsed, result.schedule.total_iterations)
    return CacheFile(
        prompt=job.prompt,
        mode=InversionMode(job.mode),
        sampler=dataclasses.asdict(job.sampler),
        optimizer=dataclasses.asdict(job.optimizer),
        backbone=backbone_info(backbone),
        seed=job.seed,
        inversion=result.inversion,
        initial=result.initial,
        schedule=result.schedule,
        phi_cond=backbone.encode_text(job.prompt),
        image=np.asarray(image, dtype=np.uint8),
    )


def backbone_for_cache(cache: CacheFile, weights: Optional[str] = None):
    info = cache.backbone
    if info.get("kind") != "toy":
        raise ConfigError(f"cache was produced by a {info.get('kind')!r} backbone; only toy caches reload from the CLI")
    backbone = load_toy(weights) if weights else default_toy(ToyBackboneConfig.from_dict(info["config"]))
    if info.get("digest") and backbone.weights_digest() != info["digest"]:
        raise ConfigError("toy weights differ from the ones that produced this cache")
    return backbone


def sampler_of(cache: CacheFile) -> SamplerConfig:
    known = {f.name for f in dataclasses.fields(SamplerConfig)}
    return SamplerConfig(**{k: v for k, v in cache.sampler.items() if k in known})


def reconstruct_cache(cache: CacheFile, backbone=None) -> dict:
    backbone = backbone or backbone_for_cache(cache)
    sampler = sampler_of(cache)
    traj, image = reconstruct(cache.schedule, cache.inversion.z_T, backbone, sampler)
    original_latent = backbone.encode_image(cache.image)
    return {
        "image": image,
        "psnr": psnr(image, cache.image),
        "psnr_initial": psnr(backbone.decode_image(cache.initial.z_0), cache.image),
        "latent_mse": latent_mse(traj.z_0, original_latent),
        "trajectory": traj,
    }


def edit_cache(cache: CacheFile, edit_cfg: EditConfig, backbone=None, out_dir=None, dump_attention=False) -> dict:
    """Run one balanced-attention edit; optionally write images and ``metrics.json`` to ``out_dir``."""
    backbone = backbone or backbone_for_cache(cache)
    if edit_cfg.steps != cache.steps:
        edit_cfg = dataclasses.replace(edit_cfg, steps=cache.steps)
    dump_dir = str(Path(out_dir) / "attention") if (out_dir and dump_attention) else None
    result = run_bam_edit(
        cache.inversion.z_T, cache.schedule, cache.phi_cond, edit_cfg, backbone, include_initial=True, dump_dir=dump_dir
    )
    original_latent = backbone.encode_image(cache.image)
    edit_report = build_report(
        result.image_edit, cache.image, result.edited.z_0, original_latent, cache.prompt,
    )
    record = {
        "prompt": cache.prompt,
        "omega_start": edit_cfg.omega_start,
        "omega_end": edit_cfg.omega_end,
        "eta": edit_cfg.sa_fraction,
        "lambda": edit_cfg.ca_fraction,
        "rigid": edit_cfg.rigid_mode,
        "edit": edit_report.to_dict(),
        "psnr_reconstruction": psnr(result.image_reconstruction, cache.image),
        "psnr_transition": psnr(result.image_transition, cache.image),
        "psnr_initial": psnr(result.image_initial, cache.image),
        "latent_mse_edit_vs_reconstruction": latent_mse(result.edited.z_0, result.reconstruction.z_0),
        "injected_steps": result.injected_steps,
        "config": dataclasses.asdict(edit_cfg),
    }
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_image(result.image_edit, out / "edit.png")
        save_image(result.image_reconstruction, out / "reconstruction.png")
        save_image(result.image_transition, out / "transition.png")
        save_image(result.image_initial, out / "initial.png")
        (out / "metrics.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return {"record": record, "result": result}


def sweep_cache(cache: CacheFile, edit_cfg: EditConfig, backbone=None, omegas=SWEEP_OMEGAS) -> list:
    """One record per interpolation ramp (start, end)."""
    backbone = backbone or backbone_for_cache(cache)
    rows = []
    for start, end in omegas:
        cfg = dataclasses.replace(edit_cfg, omega_start=start, omega_end=end, rigid_mode=False)
        rows.append(edit_cache(cache, cfg, backbone)["record"])
    return rows


SWEEP_FIELDS = (
    "omega_start", "omega_end", "eta", "lambda", "latent_mse_edit_vs_reconstruction",
    "psnr_edit", "psnr_reconstruction", "psnr_transition",
)


def write_sweep_csv(rows: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([
                r["omega_start"], r["omega_end"], r["eta"], r["lambda"], r["latent_mse_edit_vs_reconstruction"],
                r["edit"]["psnr"], r["psnr_reconstruction"], r["psnr_transition"],
            ])
    return path


# ---------------------------------------------------------------- bench


BENCH_FIELDS = ("mode", "case", "step", "inner_iter", "loss", "threshold")


class BudgetViolation(EditError):
    exit_code = 1


def bench(
    backbone,
    n_cases: int = 10,
    sampler_cfg: Optional[SamplerConfig] = None,
    opt_cfg: Optional[OptimizerConfig] = None,
    seed: int = 1234,
    modes=(InversionMode.TARGET_TEXT, InversionMode.NULL_TEXT),
):
    """Run both inversion modes on the toy mismatch suite.

    Returns ``(rows, summary)``: one row per optimizer iteration and a summary
    with per-mode totals, per-step loss curves and the iteration ratio.
    Raises ``BudgetViolation`` if any run exceeds its iteration budget.
    """
    require_toy(backbone, "bench")
    sampler_cfg = sampler_cfg or SamplerConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    cases = mismatch_suite(n_cases, seed, backbone.config.latent_size)
    rows = []
    per_mode = {}
    for mode in modes:
        mode = InversionMode(mode)
        totals, curves, seconds, converged = [], [], 0.0, 0
        for case in cases:
            started = time.perf_counter()
            res = run_ttis(backbone.encode_image(case.image), case.prompt, backbone, sampler_cfg, opt_cfg, mode)
            seconds += time.perf_counter() - started
            sched = res.schedule
            if opt_cfg.enforce_budget and sched.total_iterations > opt_cfg.total_budget:
                raise BudgetViolation(f"{mode.value} case {case.index}: {sched.total_iterations} > {opt_cfg.total_budget}")
            if max(sched.iterations_used) > opt_cfg.inner_iterations:
                raise BudgetViolation(f"{mode.value} case {case.index}: more than {opt_cfg.inner_iterations} per step")
            for r in res.records:
                rows.append({"mode": r.mode, "case": case.index, "step": r.step, "inner_iter": r.inner_iter,
                             "loss": r.loss, "threshold": r.threshold})
            totals.append(sched.total_iterations)
            curves.append(sched.per_step_loss)
            T = len(sched)
            converged += sum(
                1 for s, (loss, used) in enumerate(zip(sched.per_step_loss, sched.iterations_used), 1)
                if used < opt_cfg.inner_iterations
                or loss <= early_stop_threshold(s if opt_cfg.threshold_index == "rising" else T - s + 1,
                                                opt_cfg.threshold_coefficient)
            )
        per_mode[mode.value] = {
            "total_iterations": int(sum(totals)),
            "per_case_iterations": totals,
            "mean_step_loss": np.mean(np.asarray(curves), axis=0).tolist(),
            "steps_within_threshold": converged,
            "seconds": seconds,
        }
    summary = {"cases": n_cases, "modes": per_mode, "budget_ok": True,
               "optimizer": dataclasses.asdict(opt_cfg), "sampler": dataclasses.asdict(sampler_cfg)}
    tt = per_mode.get(InversionMode.TARGET_TEXT.value)
    nt = per_mode.get(InversionMode.NULL_TEXT.value)
    if tt and nt:
        summary["iteration_ratio"] = tt["total_iterations"] / nt["total_iterations"] if nt["total_iterations"] else None
    return rows, summary


def write_bench_csv(rows: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return path
