"""Command-line entry point: inspect, train, eval, predict, ablate.

Thread-count control must happen before numpy first configures its BLAS
backend, so this module inspects --threads / ROIE_NET_THREADS at import
time, ahead of the numeric imports.
"""

from __future__ import annotations

import os
import sys


def _thread_request(argv) -> str | None:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return os.environ.get("ROIE_NET_THREADS")


def _setup_threads() -> None:
    n = _thread_request(sys.argv)
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


_setup_threads()

import json
import time
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import composer, metrics as metrics_mod, train as train_mod
from .data import AugmentConfig, DataConfig, SplitSpec, resize
from .errors import ConfigError, IngestionError, RoieNetError
from .tensor_core import Tensor

# Reduced widths, input size, and epoch budget for a sweep that finishes on a
# desk CPU. Reproducible but not comparable to full-scale metric numbers.
DESK_PROFILE = {
    "filter_widths": (8, 16, 32, 64),
    "image_size": 64,
    "epochs": 5,
    "batch_size": 8,
    "learning_rate": 1e-3,
}

FULL_PROFILE = {
    "filter_widths": composer.DEFAULT_FILTER_WIDTHS,
    "image_size": 256,
    "epochs": 100,
    "batch_size": 16,
    "learning_rate": 1e-5,
}


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _model_config_from(cfg: dict, preset, widths=None, threshold=None) -> composer.ModelConfig:
    if preset is None:
        preset = cfg.get("preset")
    if "model" in cfg and preset is None:
        return composer.ModelConfig.from_dict(cfg["model"])
    if preset is None:
        preset = "triple"
    return composer.preset_config(
        preset,
        filter_widths=widths or cfg.get("filter_widths", composer.DEFAULT_FILTER_WIDTHS),
        binarize_threshold=threshold if threshold is not None else cfg.get("binarize_threshold", 0.5),
    )


def _parse_widths(text) -> tuple | None:
    if not text:
        return None
    try:
        widths = tuple(int(part) for part in text.split(","))
    except ValueError as e:
        raise ConfigError(f"invalid --widths value {text!r}: {e}") from e
    return widths


@click.group()
def cli():
    """Multi-UNet lesion segmentation: train, evaluate, predict, inspect."""


_preset_option = click.option(
    "--preset",
    type=str,
    default=None,
    help=f"model preset, one of: {', '.join(composer.PRESET_ORDER)}",
)


def _resolve_preset(preset) -> None:
    if preset is not None and preset not in composer.PRESETS:
        raise ConfigError(
            f"unknown preset {preset!r}; known presets: {', '.join(composer.PRESET_ORDER)}"
        )


# ---------------------------------------------------------------------------
# inspect


@cli.command()
@_preset_option
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON config file")
@click.option("--widths", type=str, default=None, help="comma-separated filter widths")
@click.option("--input-size", type=int, default=256, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="write breakdown CSV and notes here")
@click.option("--bench", is_flag=True, help="also run the FPS benchmark")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None, help="BLAS thread count (1 = deterministic mode)")
def inspect(preset, config_path, widths, input_size, out_dir, bench, seed, threads):
    """Print parameter count and analytic FLOPs for a model configuration."""
    _resolve_preset(preset)
    cfg = _load_config_file(config_path)
    model_config = _model_config_from(cfg, preset, widths=_parse_widths(widths))
    model = composer.build_model(model_config, seed=seed)
    shape = (1, model_config.input_channels, input_size, input_size)
    rows = composer.complexity_breakdown(model, shape)
    params = composer.param_count(model)
    flops = sum(r.flops for r in rows)
    label = model_config.method_label()
    click.echo(f"method: {label}")
    click.echo(f"connection structure: {model_config.structure_label()}")
    click.echo(f"filter widths: {list(model_config.filter_widths)}")
    click.echo(f"input: {shape[2]}x{shape[3]}")
    click.echo(f"params: {params:,}")
    click.echo(f"flops: {flops:,}")
    fps = None
    if bench:
        result = metrics_mod.fps_benchmark(model, shape, warmup=1, iters=5, seed=seed)
        fps = result.fps
        click.echo(f"fps: {fps:.3f} ({result.hardware})")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = model_config.preset or label.replace("*", "-star")
        composer.write_breakdown_csv(rows, out / f"breakdown_{stem}.csv")
        measured = {model_config.preset or label: (params, flops)}
        (out / "convention_notes.md").write_text(composer.convention_notes(measured), encoding="utf-8")
        click.echo(f"wrote breakdown and notes under {out}")


# ---------------------------------------------------------------------------
# train


def _data_config_from(cfg: dict, data_root, image_size, split_seed) -> DataConfig:
    base = cfg.get("data", {})
    root = data_root or base.get("root")
    if root is None:
        raise ConfigError("no dataset root given (use --data or a config file)")
    split_cfg = dict(base.get("split", {}))
    if split_seed is not None:
        split_cfg["seed"] = split_seed
    try:
        return DataConfig(
            root=str(root),
            image_size=image_size if image_size is not None else base.get("image_size", 256),
            split=SplitSpec(**split_cfg),
            augment=AugmentConfig.from_dict(base.get("augment", {})),
        )
    except TypeError as e:
        raise ConfigError(f"malformed data config: {e}") from e


@cli.command()
@_preset_option
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON config file")
@click.option("--data", "data_root", type=click.Path(), default=None, help="dataset root with images/ and masks/")
@click.option("--widths", type=str, default=None)
@click.option("--image-size", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--out", "out_dir", type=click.Path(), default="runs/run", show_default=True)
@click.option("--seed", type=int, default=None, help="master seed [default: 0, or the config file's]")
@click.option("--resume", type=click.Path(), default=None, help="checkpoint manifest (.json) to resume from")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--threads", type=int, default=None, help="BLAS thread count (1 = deterministic mode)")
def train(preset, config_path, data_root, widths, image_size, epochs, batch_size, lr, out_dir, seed, resume, threshold, threads):
    """Train a model and write checkpoints, logs, and the run manifest."""
    _resolve_preset(preset)
    cfg = _load_config_file(config_path)
    if seed is None:
        seed = int(cfg.get("seed", 0))
    model_config = _model_config_from(cfg, preset, widths=_parse_widths(widths), threshold=threshold)
    data_config = _data_config_from(cfg, data_root, image_size, split_seed=None)
    optim_kwargs = dict(cfg.get("optim", {}))
    if epochs is not None:
        optim_kwargs["epochs"] = epochs
    if batch_size is not None:
        optim_kwargs["batch_size"] = batch_size
    if lr is not None:
        optim_kwargs["learning_rate"] = lr
    try:
        optim_config = train_mod.OptimConfig(**optim_kwargs)
    except TypeError as e:
        raise ConfigError(f"malformed optimizer config: {e}") from e

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_config = {
        "schema": "run-config v1",
        "model": model_config.to_dict(),
        "data": data_config.to_dict(),
        "optim": optim_config.to_dict(),
        "seed": seed,
        "threads": threads or os.environ.get("ROIE_NET_THREADS"),
    }
    with open(out / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(run_config, fh, indent=1, sort_keys=True)
        fh.write("\n")

    manifest = train_mod.train_run(
        model_config,
        data_config,
        optim_config,
        out,
        seed=seed,
        resume=resume,
        eval_threshold=threshold,
    )
    click.echo(f"run complete: {len(manifest.history)} epochs, manifest at {out / 'run_manifest.json'}")


# ---------------------------------------------------------------------------
# eval


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True, help="checkpoint manifest (.json)")
@click.option("--data", "data_root", type=click.Path(), required=True)
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test", "all"]), default="test", show_default=True)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--image-size", type=int, default=None, help="defaults to 256")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default="eval_out", show_default=True)
@click.option("--panels", is_flag=True, help="write side-by-side PNG panels")
@click.option("--threads", type=int, default=None, help="BLAS thread count (1 = deterministic mode)")
def eval_cmd(checkpoint, data_root, split_name, split_seed, image_size, threshold, out_dir, panels, threads):
    """Evaluate a checkpoint on a dataset split and write a metrics report."""
    model, info = composer.load_checkpoint(checkpoint)
    data_config = DataConfig(
        root=str(data_root),
        image_size=image_size or 256,
        split=SplitSpec(seed=split_seed),
    )
    train_pairs, val_pairs, test_pairs = train_mod.load_split_pairs(data_config)
    selected = {
        "train": train_pairs,
        "val": val_pairs,
        "test": test_pairs,
        "all": train_pairs + val_pairs + test_pairs,
    }[split_name]
    if not selected:
        raise IngestionError(f"split {split_name!r} is empty for this dataset")
    report, preds = train_mod.evaluate(model, selected, threshold, keep_predictions=True)
    report.param_count = composer.param_count(model)
    size = data_config.image_size
    report.flops = composer.flops_count(model, (1, info["config"].input_channels, size, size))
    report.config = info["config"].to_dict()
    panel_iter = None
    if panels:
        panel_iter = [(p.id, p.image, p.mask, preds[i]) for i, p in enumerate(selected)]
    paths = metrics_mod.emit_report(report, out_dir, panels=panel_iter)
    click.echo(
        f"{split_name}: {len(selected)} images, mean dice {report.mean_dice:.4f}, "
        f"mean miou {report.mean_miou:.4f}, mean accuracy {report.mean_accuracy:.4f}"
    )
    click.echo(f"report written to {paths['csv']}")


# ---------------------------------------------------------------------------
# predict


@cli.command()
@click.option("--checkpoint", type=click.Path(), required=True, help="checkpoint manifest (.json)")
@click.option("--images", "images_dir", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), default="predictions", show_default=True)
@click.option("--image-size", type=int, default=None, help="model input size, defaults to 256")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--panels", is_flag=True, help="also write input|mask panels")
@click.option("--threads", type=int, default=None, help="BLAS thread count (1 = deterministic mode)")
def predict(checkpoint, images_dir, out_dir, image_size, threshold, panels, threads):
    """Write one binary mask PNG (0/255) per input image, at original size."""
    from .data import IMAGE_EXTENSIONS, SamplePair, decode_image

    model, _ = composer.load_checkpoint(checkpoint)
    size = image_size or 256
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise IngestionError(f"images directory not found: {images_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_lines = []
    written = 0
    for path in sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS):
        try:
            image = decode_image(path)
        except IngestionError as e:
            click.echo(f"warning: skipping {path.name}: {e}", err=True)
            log_lines.append(f"skipped {path.name}: {e}")
            continue
        orig_h, orig_w = image.shape[1:]
        resized = resize(SamplePair(image=image, mask=np.zeros((1, orig_h, orig_w), np.float32), id=path.stem), size)
        mask = composer.predict_mask(model, Tensor(resized.image[None]), threshold)[0, 0]
        mask_img = Image.fromarray((mask * 255).astype(np.uint8), mode="L")
        if (orig_w, orig_h) != mask_img.size:
            mask_img = mask_img.resize((orig_w, orig_h), Image.NEAREST)
        mask_path = out / f"{path.stem}_mask.png"
        mask_img.save(mask_path)
        if panels:
            full_mask = (np.asarray(mask_img, dtype=np.float32) / 255.0)[None]
            panel = metrics_mod.render_panel(image, full_mask, full_mask)
            Image.fromarray(panel).save(out / f"{path.stem}_panel.png")
        log_lines.append(f"wrote {mask_path.name}")
        written += 1
    (out / "predictions.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    click.echo(f"wrote {written} masks to {out}")


# ---------------------------------------------------------------------------
# ablate


def run_ablation(data_root, out_dir, scale: str = "desk", seed: int = 0) -> Path:
    """Train and evaluate every preset at the requested scale; emit one CSV
    row per preset. Per-preset failures are recorded and the sweep continues."""
    profile = DESK_PROFILE if scale == "desk" else FULL_PROFILE
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in composer.PRESET_ORDER:
        try:
            model_config = composer.preset_config(name, filter_widths=profile["filter_widths"])
            data_config = DataConfig(
                root=str(data_root),
                image_size=profile["image_size"],
                split=SplitSpec(seed=seed),
                augment=AugmentConfig.disabled(),
            )
            optim_config = train_mod.OptimConfig(
                learning_rate=profile["learning_rate"],
                epochs=profile["epochs"],
                batch_size=profile["batch_size"],
            )
            run_dir = out / name
            train_mod.train_run(model_config, data_config, optim_config, run_dir, seed=seed)
            model, _ = composer.load_checkpoint(sorted(run_dir.glob("epoch_*.json"))[-1])
            _, _, test_pairs = train_mod.load_split_pairs(data_config)
            eval_pairs = test_pairs if test_pairs else train_mod.load_split_pairs(data_config)[0]
            report = train_mod.evaluate(model, eval_pairs, model_config.binarize_threshold)
            shape = (1, 3, profile["image_size"], profile["image_size"])
            fps = metrics_mod.fps_benchmark(model, shape, warmup=1, iters=3, seed=seed).fps
            rows.append(
                {
                    "method": model_config.method_label(),
                    "connection_structure": model_config.structure_label(),
                    "dice": f"{report.mean_dice:.6f}",
                    "miou": f"{report.mean_miou:.6f}",
                    "accuracy": f"{report.mean_accuracy:.6f}",
                    "params": composer.param_count(model),
                    "flops": composer.flops_count(model, shape),
                    "fps": f"{fps:.3f}",
                    "error": "",
                }
            )
        except RoieNetError as e:
            rows.append(
                {
                    "method": composer.PRESETS[name][0],
                    "connection_structure": composer.PRESETS[name][1],
                    "dice": "",
                    "miou": "",
                    "accuracy": "",
                    "params": "",
                    "flops": "",
                    "fps": "",
                    "error": str(e).replace(",", ";"),
                }
            )
    csv_path = out / "ablation.csv"
    cols = ["method", "connection_structure", "dice", "miou", "accuracy", "params", "flops", "fps", "error"]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    return csv_path


@cli.command()
@click.option("--data", "data_root", type=click.Path(), required=True)
@click.option("--scale", type=click.Choice(["desk", "full"]), default="desk", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default="ablation_out", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None, help="BLAS thread count (1 = deterministic mode)")
def ablate(data_root, scale, out_dir, seed, threads):
    """Run every preset at the requested scale and emit a comparison CSV."""
    t0 = time.perf_counter()
    csv_path = run_ablation(data_root, out_dir, scale, seed)
    click.echo(f"ablation table written to {csv_path} ({time.perf_counter() - t0:.1f}s)")


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    """Run the CLI; on a domain error, the last stderr line is a single
    machine-parsable `error: <kind>: <message>` record."""
    try:
        cli(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code or 2)
    except RoieNetError as e:
        kind = type(e).__name__.removesuffix("Error").lower() or "error"
        message = " ".join(str(e).split())
        print(f"error: {kind}: {message}", file=sys.stderr)
        sys.exit(1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
