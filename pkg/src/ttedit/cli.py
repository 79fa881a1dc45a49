"""Command-line interface.

Exit codes: 0 success, 1 numeric failure, 2 missing or corrupt input,
3 configuration error. Option precedence is flags > ``--config`` file >
built-in defaults, and the effective configuration is echoed into every
report.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .errors import CacheError, ConfigError, EditError

log = logging.getLogger("ttedit")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2, 3


def _load_config_file(path):
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p} must hold a mapping of option names to values")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _resolve(args, file_cfg, name, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return file_cfg.get(name, default)


def _sampler(args, fc):
    from .diffusion import SamplerConfig

    return SamplerConfig(guidance_scale=float(_resolve(args, fc, "guidance", 7.5)), steps=int(_resolve(args, fc, "steps", 50)))


def _optimizer(args, fc):
    from .ttis import OptimizerConfig

    return OptimizerConfig(
        learning_rate=float(_resolve(args, fc, "lr", 1e-3)),
        inner_iterations=int(_resolve(args, fc, "inner_iters", 5)),
        total_budget=int(_resolve(args, fc, "budget", 250)),
        threshold_coefficient=float(_resolve(args, fc, "threshold_coef", 1e-5)),
        threshold_index=_resolve(args, fc, "threshold_index", "rising"),
    )


def _edit_config(args, fc, steps=50):
    from .transition import EditConfig

    layers = _resolve(args, fc, "layers", None)
    return EditConfig(
        omega_start=float(_resolve(args, fc, "omega_start", 0.8)),
        omega_end=float(_resolve(args, fc, "omega_end", 0.1)),
        sa_fraction=float(_resolve(args, fc, "eta", 0.3)),
        ca_fraction=float(_resolve(args, fc, "lambda_", fc.get("lambda", 0.6))),
        rigid_mode=bool(_resolve(args, fc, "rigid", False)),
        guidance_scale=float(_resolve(args, fc, "guidance", 7.5)),
        steps=steps,
        omega_mode=_resolve(args, fc, "omega_mode", "linear"),
        window=_resolve(args, fc, "window", "early"),
        layers=list(layers) if layers else None,
    )


def cmd_invert(args) -> int:
    from .cache import write_cache
    from .pipeline import JobConfig, invert_image, load_image

    fc = _load_config_file(args.config)
    image_path = _resolve(args, fc, "image", None)
    out = _resolve(args, fc, "out", None)
    if not image_path or not out:
        raise ConfigError("invert needs --image and --out")
    if not Path(image_path).exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    job = JobConfig(
        image=image_path,
        prompt=_resolve(args, fc, "prompt", ""),
        sampler=_sampler(args, fc),
        optimizer=_optimizer(args, fc),
        mode=_resolve(args, fc, "mode", "target-text"),
        inversion_condition=_resolve(args, fc, "invert_with", "target"),
        backbone=_resolve(args, fc, "backbone", "toy"),
        weights=_resolve(args, fc, "weights", None),
        seed=int(_resolve(args, fc, "seed", 0)),
        out=out,
    )

    def progress(step, result):
        log.debug("step %d: %d iterations, loss %.3g", step, result.iterations, result.final_loss)

    cache = invert_image(load_image(image_path), job, progress=progress)
    write_cache(cache, out)
    sched = cache.schedule
    summary = {
        "cache": str(out),
        "steps": len(sched),
        "total_iterations": sched.total_iterations,
        "max_iterations_per_step": max(sched.iterations_used),
        "mean_step_loss": sum(sched.per_step_loss) / len(sched),
        "final_step_loss": sched.per_step_loss[-1],
        "config": job.effective(),
    }
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def _read_cache_arg(path):
    from .cache import read_cache

    if not path or not Path(path).exists():
        raise FileNotFoundError(f"cache not found: {path}")
    return read_cache(path)


def cmd_edit(args) -> int:
    from .pipeline import backbone_for_cache, edit_cache, sweep_cache, write_sweep_csv
    from .plotting import plot_sweep

    fc = _load_config_file(args.config)
    cache = _read_cache_arg(_resolve(args, fc, "cache", None))
    cfg = _edit_config(args, fc, steps=cache.steps)
    out = Path(_resolve(args, fc, "out", "edit-out"))
    backbone = backbone_for_cache(cache, _resolve(args, fc, "weights", None))
    if args.sweep:
        rows = sweep_cache(cache, cfg, backbone)
        csv_path = write_sweep_csv(rows, out / "sweep.csv")
        fig = plot_sweep(rows, out / "sweep.png")
        (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
        print(json.dumps({"csv": str(csv_path), "figure": str(fig), "rows": len(rows)}, indent=2))
        return EXIT_OK
    record = edit_cache(cache, cfg, backbone, out_dir=out, dump_attention=args.dump_attention)["record"]
    print(json.dumps(record, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .pipeline import reconstruct_cache, save_image

    cache = _read_cache_arg(args.cache)
    res = reconstruct_cache(cache)
    if args.out:
        save_image(res["image"], args.out)
    print(json.dumps({"psnr": res["psnr"], "psnr_initial": res["psnr_initial"], "latent_mse": res["latent_mse"]}, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .pipeline import bench, load_backbone, write_bench_csv
    from .plotting import plot_bench

    fc = _load_config_file(args.config)
    if args.suite != "toy":
        raise ConfigError(f"unknown suite {args.suite!r}")
    backbone = load_backbone(_resolve(args, fc, "backbone", "toy"), _resolve(args, fc, "weights", None))
    rows, summary = bench(backbone, int(_resolve(args, fc, "cases", 10)), _sampler(args, fc), _optimizer(args, fc))
    out = Path(args.out)
    write_bench_csv(rows, out)
    summary_path = out.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    fig = plot_bench(summary, out.with_suffix(".png"))
    brief = {m: s["total_iterations"] for m, s in summary["modes"].items()}
    print(json.dumps({"csv": str(out), "summary": str(summary_path), "figure": str(fig),
                      "total_iterations": brief, "iteration_ratio": summary.get("iteration_ratio")}, indent=2))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .backbone.toy import ToyBackbone, ToyBackboneConfig, train_toy_backbone, validation_loss
    from .cache import cache_dir
    from .pipeline import save_toy
    from .plotting import plot_training

    fc = _load_config_file(args.config)
    try:
        cfg = ToyBackboneConfig.from_dict(fc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, train_steps=args.steps)
    initial = validation_loss(ToyBackbone(cfg).model, cfg)
    backbone = train_toy_backbone(cfg)
    out = Path(args.out) if args.out else cache_dir() / f"toy-{cfg.digest()}.brtc"
    save_toy(backbone, out)
    plot_training(backbone.loss_curve, out.with_suffix(".png"))
    final = validation_loss(backbone.model, cfg)
    print(json.dumps({"weights": str(out), "digest": backbone.weights_digest(),
                      "validation_loss_initial": initial, "validation_loss_final": final}, indent=2))
    return EXIT_OK


def cmd_render(args) -> int:
    from .backbone.shapes import parse_scene, render_uint8
    from .pipeline import save_image

    scene = parse_scene(args.prompt, args.dx, args.dy, args.scale)
    save_image(render_uint8(scene, args.size), args.out)
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttedit", description="Text-driven real-image editing on a toy diffusion backbone.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="fine-tune the target-text schedule for an image and write a cache")
    p.add_argument("--image")
    p.add_argument("--prompt")
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--inner-iters", dest="inner_iters", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--threshold-coef", dest="threshold_coef", type=float)
    p.add_argument("--threshold-index", dest="threshold_index", choices=["rising", "literal"])
    p.add_argument("--mode", choices=["target-text", "null-text"])
    p.add_argument("--invert-with", dest="invert_with", choices=["target", "null"])
    p.add_argument("--backbone", choices=["toy", "adapter"])
    p.add_argument("--weights")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="run the balanced-attention edit from a cache")
    p.add_argument("--cache")
    p.add_argument("--omega-start", dest="omega_start", type=float)
    p.add_argument("--omega-end", dest="omega_end", type=float)
    p.add_argument("--omega-mode", dest="omega_mode", choices=["linear", "uniform"])
    p.add_argument("--eta", type=float, help="fraction of steps with self-attention injection")
    p.add_argument("--lambda", dest="lambda_", type=float, help="fraction of steps with cross-attention injection")
    p.add_argument("--window", choices=["early", "late"])
    p.add_argument("--layers", nargs="+")
    p.add_argument("--guidance", type=float)
    p.add_argument("--rigid", action="store_true", default=None)
    p.add_argument("--sweep", action="store_true", help="one edit per interpolation ramp; writes sweep.csv and sweep.png")
    p.add_argument("--dump-attention", dest="dump_attention", action="store_true")
    p.add_argument("--weights")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("reconstruct", help="resample the fine-tuned schedule and report PSNR")
    p.add_argument("--cache", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("bench", help="target-text vs null-text convergence on the toy suite")
    p.add_argument("--suite", default="toy")
    p.add_argument("--cases", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--inner-iters", dest="inner_iters", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--threshold-coef", dest="threshold_coef", type=float)
    p.add_argument("--threshold-index", dest="threshold_index", choices=["rising", "literal"])
    p.add_argument("--backbone", choices=["toy", "adapter"])
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy", help="train the toy backbone")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("render", help="render a synthetic scene from a full toy prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--dx", type=float, default=0.0)
    p.add_argument("--dy", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CacheError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EditError as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
