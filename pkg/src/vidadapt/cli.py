"""Command-line entry point.

Every ``RunConfig`` field is a flag; ``--config`` loads a ``key = value`` file
first and flags override it. The output root comes from ``VIDADAPT_OUTPUT_ROOT``
(default ``./runs``) unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import typing
from dataclasses import fields
from pathlib import Path

import torch

from vidadapt.config import MODES, ConfigError, RunConfig, load_config, parse_sweep, parse_value

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_HOOK = 0, 1, 2, 3
OUTPUT_ENV = "VIDADAPT_OUTPUT_ROOT"

log = logging.getLogger("vidadapt")


class HookFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which would collide with the runtime-failure code
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vidadapt", description="Toy video editing with filtered inversion and temporal adapters.")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", help="key = value file applied before flags")
    ap.add_argument("--preset", help="ablate: one of kernel, window, tokens, token-modes")
    ap.add_argument("-v", "--verbose", action="store_true")
    hints = typing.get_type_hints(RunConfig)
    for f in fields(RunConfig):
        if f.name == "mode":
            continue
        flag = "--" + f.name.replace("_", "-")
        if hints[f.name] is bool:
            ap.add_argument(flag, dest=f.name, nargs="?", const="true", default=None)
        else:
            ap.add_argument(flag, dest=f.name, default=None)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig(mode=args.mode)
    if args.config:
        base = load_config(args.config, base).replace(mode=args.mode)
    changes = {}
    for f in fields(RunConfig):
        raw = getattr(args, f.name, None)
        if f.name != "mode" and raw is not None:
            changes[f.name] = parse_value(f.name, raw)
    cfg = base.replace(**changes)
    if not cfg.out:
        root = Path(os.environ.get(OUTPUT_ENV, "runs"))
        cfg = cfg.replace(out=str(root / cfg.mode))
    return cfg


def _parts(cfg: RunConfig):
    from vidadapt.pipeline import ToyParts
    from vidadapt.train import load_checkpoint

    if cfg.denoiser == "oracle":
        return ToyParts.build(cfg)
    if not cfg.checkpoint:
        raise RuntimeError("trained denoiser requested but no --checkpoint given (or use --denoiser oracle)")
    return load_checkpoint(cfg.checkpoint, cfg)[0]


def _input_clips(cfg: RunConfig):
    """Frames directory from ``--input`` or the seeded synthetic clips."""
    from vidadapt.ablation import to_frame_clip
    from vidadapt.io import load_frames
    from vidadapt.pipeline import FrameClip
    from vidadapt.synthetic import moving_shape_clip

    if cfg.input:
        return [(FrameClip(load_frames(cfg.input), clip_id=Path(cfg.input).name), None)]
    out = []
    for s in cfg.seeds:
        c = moving_shape_clip(s, n_frames=cfg.frames, size=cfg.size, texture_noise=cfg.texture_noise)
        out.append((to_frame_clip(c), c))
    return out


def cmd_train(cfg: RunConfig) -> int:
    from vidadapt.train import temporal_drop, train_driver

    res = train_driver(cfg, cfg.out)
    msg = f"trained in {res.seconds:.1f}s -> {res.checkpoint}"
    if cfg.steps >= 200:
        early, late = temporal_drop(res.curve)
        msg += f"; temporal loss {early:.3g} -> {late:.3g}"
    print(msg)
    return EXIT_OK


def cmd_edit(cfg: RunConfig) -> int:
    from vidadapt.io import save_frames
    from vidadapt.pipeline import edit_clip

    parts = _parts(cfg)
    for fc, synth in _input_clips(cfg):
        d = Path(cfg.out) / fc.clip_id
        prompt = cfg.prompt or (synth.prompt if synth else "")
        res = edit_clip(fc, parts, cfg, prompt=prompt, out_dir=d)
        save_frames(d / "frames", res.frames)
        print(f"{fc.clip_id}: {fc.n_frames} frames -> {d}")
    return EXIT_OK


def cmd_invert(cfg: RunConfig) -> int:
    from vidadapt.io import save_latents, write_manifest
    from vidadapt.pipeline import clip_controls, encode_clip, invert_latents, make_denoiser

    parts = _parts(cfg)
    s = parts.schedule
    t_end = max(1, int(round(cfg.strength * s.T_total)))
    for fc, synth in _input_clips(cfg):
        z0 = encode_clip(fc, parts.codec)
        d = make_denoiser(parts, cfg, z0)
        ctrl = clip_controls(fc, cfg)
        with torch.no_grad():
            cond = parts.conditioning(fc.frames, cfg.prompt or (synth.prompt if synth else "")) if cfg.denoiser == "trained" else None
            bil = cfg.bilateral() if cfg.filter_direction == "roundtrip" else None
            x_T = invert_latents(z0, d, s, cfg.invert_steps, t_end, cond, ctrl, cfg.fixed_point_iters, bil)
        out = Path(cfg.out) / fc.clip_id
        save_latents(out / "inverted.f32", x_T)
        write_manifest(out / "manifest.json", cfg.to_text(), cfg.seeds, parts.state() if cfg.denoiser == "trained" else None)
        print(f"{fc.clip_id}: latents {tuple(x_T.shape)} at t={t_end} -> {out}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig) -> int:
    from vidadapt.io import load_latents, save_frames, write_manifest
    from vidadapt.pipeline import denoise_clip, make_denoiser

    if not cfg.input:
        raise ConfigError("sample needs --input pointing at a .f32 latent file")
    x = load_latents(cfg.input)
    parts = _parts(cfg)
    s = parts.schedule
    t_start = max(1, int(round(cfg.strength * s.T_total)))
    d = make_denoiser(parts, cfg, x)
    with torch.no_grad():
        if cfg.denoiser == "trained":
            # no source frames here: conditioning uses the decoded starting latents
            cond = parts.conditioning(parts.codec.decode(x), cfg.prompt)
        else:
            cond = None
        bil = cfg.bilateral() if cfg.filter_direction == "paper" else None
        z = denoise_clip(x, d, s, cfg.invert_steps, cond, None, t_start=t_start, bilateral=bil, guided_mode=cfg.guided_mode)
    out = Path(cfg.out)
    save_frames(out / "frames", parts.codec.decode(z))
    write_manifest(out / "manifest.json", cfg.to_text(), cfg.seeds)
    print(f"sampled {z.shape[0]} frames -> {out}")
    return EXIT_OK


def cmd_metrics(cfg: RunConfig) -> int:
    from vidadapt.io import load_frames
    from vidadapt.metrics import MetricReport, clip_psnr, clip_ssim, external_metric_hook, flicker_metric, similarity_curve

    if not cfg.input:
        raise ConfigError("metrics needs --input (frames directory)")
    x = load_frames(cfg.input)
    cols = ["flicker", "similarity"] + (["psnr", "ssim"] if cfg.reference else [])
    report = MetricReport(cols)
    vals = {"flicker": flicker_metric(x), "similarity": sum(similarity_curve(x)) / (x.shape[0] - 1)}
    if cfg.reference:
        ref = load_frames(cfg.reference)
        vals.update(psnr=clip_psnr(x, ref), ssim=clip_ssim(x, ref))
    report.add(Path(cfg.input).name, **vals)
    fails = 0
    if cfg.metric_hook:
        ext, fails = external_metric_hook("external", cfg.metric_hook, [cfg.input], cfg.hook_timeout)
        report.add_column("external", ext)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    print(report.render())
    if fails:
        raise HookFailure(f"{fails} external metric value(s) missing")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, preset: str | None) -> int:
    from vidadapt.ablation import TrainingCache, preset_points, run_sweep
    from vidadapt.config import expand_grid

    if cfg.sweep:
        points = expand_grid(parse_sweep(Path(cfg.sweep).read_text()))
    elif preset:
        points = preset_points(preset)
    else:
        raise ConfigError("ablate needs --sweep FILE or --preset NAME")
    cache = TrainingCache(directory=Path(cfg.out) / "cache")
    res = run_sweep(cfg, points, cfg.out, cache)
    print(res.summary_csv, end="")
    if res.hook_failures:
        raise HookFailure(f"{res.hook_failures} external metric value(s) missing")
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except ConfigError as e:
        ap.print_usage(sys.stderr)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "resolved_config.txt").write_text(cfg.to_text())
        torch.manual_seed(cfg.seed)
        if cfg.mode == "train-adapter":
            return cmd_train(cfg)
        if cfg.mode == "edit":
            return cmd_edit(cfg)
        if cfg.mode == "invert":
            return cmd_invert(cfg)
        if cfg.mode == "sample":
            return cmd_sample(cfg)
        if cfg.mode == "metrics":
            return cmd_metrics(cfg)
        return cmd_ablate(cfg, args.preset)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except HookFailure as e:
        print(f"external metric failure: {e}", file=sys.stderr)
        return EXIT_HOOK
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
