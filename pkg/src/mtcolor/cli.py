"""Command-line entry points."""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import data as dataxn
from .data import (
    SynthConfig,
    generate_synthetic,
    get_captioner,
    get_detector,
    load_dataset,
    load_png,
    luminance,
    read_annotations,
    save_dataset,
    save_png,
    write_annotations,
)
from .denoiser import load_checkpoint
from .diffusion import SamplerConfig, TrainConfig, make_schedule, parse_config, train_stage
from .metrics import (
    UndefinedMetric,
    build_report,
    instance_color_fidelity,
    leakage_probe,
    evaluate_images,
)
from .sampling import ColorizeRequest, colorize, colorize_batch

KNOWN_METRICS = ("colorfulness", "psnr", "ssim", "fidelity")
VARIANT_ALIASES = {"full": ("full", None), "no-mask": ("no_mask", None),
                   "no-instance": ("no_instance", None), "ddim": ("full", 0.0)}


def fail_cleanly(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
def main():
    """Instance-aware diffusion colorization toolkit."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--count", type=int, default=None, help="override record count")
@click.option("--seed", type=int, default=None, help="override RNG seed")
@fail_cleanly
def gen_data(config_path, out_dir, count, seed):
    """Generate the synthetic shape dataset (images + annotations)."""
    cfg = (parse_config(Path(config_path).read_text(), SynthConfig)
           if config_path else SynthConfig())
    overrides = {}
    if count is not None:
        overrides["count"] = count
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    samples = generate_synthetic(cfg)
    save_dataset(samples, out_dir)
    click.echo(f"wrote {len(samples)} samples to {out_dir}")


@main.command("annotate")
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True))
@click.option("--detector", "detector_name", default="synthetic")
@click.option("--primary", "primary_name", default="mean-color")
@click.option("--fallback", "fallback_name", default="mean-color")
@click.option("--out", "out_file", required=True, type=click.Path())
@fail_cleanly
def annotate(images_dir, detector_name, primary_name, fallback_name, out_file):
    """Run the detector + captioner pipeline over a directory of PNGs."""
    detector = get_detector(detector_name)
    primary = get_captioner(primary_name)
    fallback = get_captioner(fallback_name)
    records = []
    paths = sorted(Path(images_dir).glob("*.png"))
    if not paths:
        raise click.ClickException(f"no .png images under {images_dir}")
    for path in paths:
        image = load_png(path)
        records.append(dataxn.annotate_image(image, path.stem, detector,
                                             primary, fallback))
    write_annotations(records, out_file)
    sources = [i.source for r in records for i in r.instances]
    click.echo(f"annotated {len(records)} images, {len(sources)} instances "
               f"(primary {sources.count('primary')}, "
               f"fallback {sources.count('fallback')}, "
               f"none {sources.count('none')}) -> {out_file}")


@main.command("train")
@click.option("--stage", type=click.IntRange(1, 2), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None,
              help="stage 1: checkpoint to continue; stage 2: the stage-1 checkpoint")
@fail_cleanly
def train(stage, config_path, data_dir, out_path, resume_path):
    """Train one stage and write a checkpoint."""
    cfg = (parse_config(Path(config_path).read_text(), TrainConfig)
           if config_path else TrainConfig())
    if stage == 2 and resume_path is None:
        raise click.ClickException(
            "stage 2 requires the stage-1 checkpoint via --resume")
    samples = load_dataset(data_dir)
    dataset = dataxn.to_training_tensors(samples)
    kwargs = {}
    if stage == 2:
        kwargs["stage1_checkpoint"] = resume_path
    else:
        kwargs["resume_from"] = resume_path
    result = train_stage(stage, dataset, cfg, out_path, **kwargs)
    click.echo(f"stage {stage} done: {len(result.losses)} iterations, "
               f"final loss {result.losses[-1]:.4f} -> {result.checkpoint_path}")


def _read_gray(path) -> np.ndarray:
    return luminance(load_png(path))


def _instances_from_annotation(ann) -> list:
    return [(inst.mask, inst.text) for inst in ann.instances]


@main.command("sample")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--gray", "gray_path", required=True, type=click.Path(exists=True))
@click.option("--ann", "ann_path", type=click.Path(exists=True), default=None)
@click.option("--alpha", type=float, default=SamplerConfig.alpha, show_default=True)
@click.option("--beta", type=float, default=SamplerConfig.beta, show_default=True)
@click.option("--steps", type=int, default=SamplerConfig.steps, show_default=True)
@click.option("--guidance", type=float, default=SamplerConfig.guidance, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--luma-lock", is_flag=True, default=False)
@fail_cleanly
def sample(ckpt_path, gray_path, ann_path, alpha, beta, steps, guidance, seed,
           out_path, luma_lock):
    """Colorize one grayscale PNG, optionally with instance annotations."""
    model, _meta = load_checkpoint(ckpt_path)
    model.eval()
    gray = _read_gray(gray_path)
    instances = []
    global_text = ""
    if ann_path:
        records = read_annotations(ann_path)
        if not records:
            raise click.ClickException(f"{ann_path} holds no records")
        ann = records[0]
        if (ann.height, ann.width) != gray.shape:
            raise click.ClickException(
                f"annotation is {ann.height}x{ann.width}, image is "
                f"{gray.shape[0]}x{gray.shape[1]}")
        instances = _instances_from_annotation(ann)
        global_text = ann.global_text
    sampler = SamplerConfig(steps=steps, guidance=guidance, alpha=alpha,
                            beta=beta, seed=seed, luma_lock=luma_lock)
    req = ColorizeRequest(gray=gray, global_text=global_text,
                          instances=instances, sampler=sampler)
    result = colorize(req, model)
    save_png(result.rgb, out_path)
    prov_path = Path(out_path).with_suffix(".provenance.json")
    prov_path.write_text(json.dumps(result.provenance, indent=2))
    click.echo(f"wrote {out_path} (alpha={result.provenance['sampler']['alpha']}, "
               f"beta={result.provenance['sampler']['beta']}, seed={seed}); "
               f"provenance -> {prov_path}")


def _colorize_dataset(model, samples, sampler, base_seed=0, variant="full",
                      alpha_override=None):
    requests = []
    for i, s in enumerate(samples):
        cfg = dataclasses.replace(
            sampler, seed=base_seed + i, variant=variant,
            alpha=sampler.alpha if alpha_override is None else alpha_override)
        requests.append(ColorizeRequest(
            gray=luminance(s.image), global_text=s.annotation.global_text,
            instances=_instances_from_annotation(s.annotation), sampler=cfg))
    return colorize_batch(requests, model)


@main.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), default=None,
              help="required unless --ground-truth is given")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--metrics", "metrics_csv", default="colorfulness,psnr,ssim,fidelity",
              show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int, default=SamplerConfig.steps)
@click.option("--guidance", type=float, default=SamplerConfig.guidance)
@click.option("--seed", type=int, default=0)
@click.option("--limit", type=int, default=None, help="evaluate at most N images")
@click.option("--ground-truth", is_flag=True, default=False,
              help="score the dataset's own images instead of model outputs")
@fail_cleanly
def eval_cmd(ckpt_path, data_dir, metrics_csv, out_dir, steps, guidance, seed,
             limit, ground_truth):
    """Colorize a dataset and report metrics (CSV + JSON + figures)."""
    metrics = [m.strip() for m in metrics_csv.split(",") if m.strip()]
    unknown = set(metrics) - set(KNOWN_METRICS)
    if unknown:
        raise click.ClickException(f"unknown metrics: {sorted(unknown)} "
                                   f"(have {KNOWN_METRICS})")
    samples = load_dataset(data_dir)
    if limit:
        samples = samples[:limit]
    meta = None
    if ground_truth:
        pairs = [(s.annotation.image_id, s.image, s.image) for s in samples]
    else:
        if ckpt_path is None:
            raise click.ClickException("--ckpt is required without --ground-truth")
        model, meta = load_checkpoint(ckpt_path)
        model.eval()
        sampler = SamplerConfig(steps=steps, guidance=guidance)
        results = _colorize_dataset(model, samples, sampler, base_seed=seed)
        pairs = [(s.annotation.image_id, r.rgb, s.image)
                 for s, r in zip(samples, results)]
    ann_by_id = {s.annotation.image_id: s.annotation for s in samples}
    rows = evaluate_images(pairs, metrics, ann_by_id)
    report = build_report(rows, metrics, config={
        "checkpoint": str(ckpt_path), "checkpoint_meta": meta,
        "ground_truth": ground_truth,
        "steps": steps, "guidance": guidance, "seed": seed,
        "images": len(samples)})
    from .report import write_metric_report
    paths = write_metric_report(report, out_dir)
    click.echo(f"{'metric':>14} | {'mean':>10} | {'std':>10} | {'n':>4}")
    for metric in metrics:
        s = report.summary[metric]
        mean = "undefined" if s["mean"] is None else f"{s['mean']:.4f}"
        std = "" if s["std"] is None else f"{s['std']:.4f}"
        click.echo(f"{metric:>14} | {mean:>10} | {std:>10} | {s['count']:>4}")
    click.echo(f"report -> {paths['csv']}")


@main.command("ablate")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--variants", "variants_csv", default="full,no-mask,no-instance,ddim",
              show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int, default=SamplerConfig.steps)
@click.option("--guidance", type=float, default=SamplerConfig.guidance)
@click.option("--seed", type=int, default=0)
@click.option("--limit", type=int, default=None)
@click.option("--leakage-probes", type=int, default=2, show_default=True)
@fail_cleanly
def ablate(ckpt_path, data_dir, variants_csv, out_dir, steps, guidance, seed,
           limit, leakage_probes):
    """Compare sampling variants: full model, masks disabled, guidance
    bypassed, and plain single-pass DDIM."""
    variants = [v.strip() for v in variants_csv.split(",") if v.strip()]
    unknown = set(variants) - set(VARIANT_ALIASES)
    if unknown:
        raise click.ClickException(f"unknown variants: {sorted(unknown)} "
                                   f"(have {sorted(VARIANT_ALIASES)})")
    model, meta = load_checkpoint(ckpt_path)
    model.eval()
    samples = load_dataset(data_dir)
    if limit:
        samples = samples[:limit]
    sampler = SamplerConfig(steps=steps, guidance=guidance)
    schedule = make_schedule()
    summaries: dict[str, dict] = {}
    for name in variants:
        variant, alpha_override = VARIANT_ALIASES[name]
        results = _colorize_dataset(model, samples, sampler, base_seed=seed,
                                    variant=variant, alpha_override=alpha_override)
        scores = []
        for s, r in zip(samples, results):
            try:
                scores.append(instance_color_fidelity(r.rgb, s.annotation))
            except UndefinedMetric:
                pass
        summary = {"fidelity": float(np.mean(scores)) if scores else None}
        ratios = []
        probed = 0
        for s in samples:
            if probed >= leakage_probes:
                break
            if not s.annotation.instances:
                continue
            cfg = dataclasses.replace(
                sampler, seed=seed + 9000 + probed, variant=variant,
                alpha=sampler.alpha if alpha_override is None else alpha_override)
            req = ColorizeRequest(gray=luminance(s.image),
                                  global_text=s.annotation.global_text,
                                  instances=_instances_from_annotation(s.annotation),
                                  sampler=cfg)
            rep = leakage_probe(model, req, target_instance=0, schedule=schedule)
            if np.isfinite(rep.ratio):
                ratios.append(rep.ratio)
            probed += 1
        summary["leakage"] = float(np.mean(ratios)) if ratios else None
        summaries[name] = summary
        click.echo(f"{name:>12}: fidelity={summary['fidelity']} "
                   f"leakage={summary['leakage']}")
    from .report import write_ablation_report
    paths = write_ablation_report(summaries, out_dir, config={
        "checkpoint": str(ckpt_path), "steps": steps, "guidance": guidance,
        "seed": seed, "images": len(samples)})
    click.echo(f"ablation -> {paths['csv']}")


@main.command("serve")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--addr", default="127.0.0.1:8000", show_default=True,
              help="overridden by MTCOLOR_ADDR when set")
@click.option("--static", "static_dir", type=click.Path(exists=True), default=None)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--queue-size", type=int, default=8, show_default=True)
@fail_cleanly
def serve(ckpt_path, addr, static_dir, workers, queue_size):
    """Serve the colorization API (and optionally the studio assets)."""
    import uvicorn
    from .server import create_app
    addr = os.environ.get("MTCOLOR_ADDR", addr)
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise click.ClickException(f"bad --addr {addr!r}, expected HOST:PORT")
    model, _meta = load_checkpoint(ckpt_path)
    model.eval()
    ckpt_hash = hashlib.sha256(Path(ckpt_path).read_bytes()).hexdigest()[:16]
    app = create_app(model, checkpoint_hash=ckpt_hash, worker_count=workers,
                     queue_size=queue_size, static_dir=static_dir)
    click.echo(f"serving on http://{host}:{port} (checkpoint {ckpt_hash})")
    uvicorn.run(app, host=host, port=int(port), log_level="warning")


if __name__ == "__main__":
    main()
