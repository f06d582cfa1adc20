"""Command-line entry points: train, fuse, eval, ablate, dump-features.

Exit codes: 0 success, 2 usage/config problems, 3 numeric failures during
training, 4 I/O problems.
"""

import sys
from pathlib import Path

import click
import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import system as system_mod
from .errors import ConfigError, DataError, NumericsError, ShapeError, WeightLoadError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _run(fn):
    try:
        return fn() or EXIT_OK
    except (ConfigError, ShapeError, WeightLoadError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_CONFIG
    except NumericsError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        click.echo(f"i/o error: {exc}", err=True)
        return EXIT_IO


def _load_config(config_path, overrides, seed=None, data_root=None, out_dir=None):
    cfg = config_mod.load_config(config_path, overrides)
    payload = config_mod.to_dict(cfg)
    if seed is not None:
        payload["seed"] = seed
    if data_root is not None:
        payload["data"]["root"] = data_root
    if out_dir is not None:
        payload["out_dir"] = out_dir
    return config_mod.from_dict(payload).validate()


@click.group()
def main():
    """Multi-modal image fusion: bilevel training, inference, evaluation."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True, help="Dotted-key override, e.g. bilevel.eta_L=1e-3")
@click.option("--seed", type=int, default=None)
@click.option("--data", "data_root", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--resume/--no-resume", default=True, show_default=True)
@click.option("--log-every", type=int, default=0)
def train(config_path, overrides, seed, data_root, out_dir, resume, log_every):
    """Run the training loop for the configured iteration budget."""

    def body():
        cfg = _load_config(config_path, overrides, seed, data_root, out_dir)
        summary = system_mod.run_training(cfg, resume=resume, log_every=log_every)
        click.echo(
            f"trained to iteration {summary['iterations']}; "
            f"checkpoint at {summary['checkpoint']}"
        )

    sys.exit(_run(body))


@main.command()
@click.argument("variant", type=click.Choice(config_mod.ABLATION_VARIANTS))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--data", "data_root", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--resume/--no-resume", default=True, show_default=True)
def ablate(variant, config_path, overrides, seed, data_root, out_dir, resume):
    """Train one ablation variant (a config transform of the full model)."""

    def body():
        cfg = _load_config(config_path, overrides, seed, data_root, out_dir)
        cfg = config_mod.apply_ablation(cfg, variant)
        summary = system_mod.run_training(cfg, resume=resume)
        click.echo(
            f"ablation '{variant}' trained to iteration {summary['iterations']}; "
            f"checkpoint at {summary['checkpoint']}"
        )

    sys.exit(_run(body))


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("input_a", type=click.Path(exists=True))
@click.argument("input_b", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--use-ema/--no-ema", default=True, show_default=True)
def fuse(checkpoint, input_a, input_b, out_path, use_ema):
    """Fuse one image pair with a trained checkpoint."""

    def body():
        system, _ = system_mod.load_system_for_eval(checkpoint, use_ema=use_ema)
        image_a = data_mod.read_image(input_a)
        image_b = data_mod.read_image(input_b)
        fused = system.fuse_file_pair(image_a, image_b)
        data_mod.write_image(out_path, fused)
        click.echo(f"wrote {out_path}")

    sys.exit(_run(body))


@main.command("eval")
@click.argument("fused_dir", type=click.Path(exists=True))
@click.argument("source_a_dir", type=click.Path(exists=True))
@click.argument("source_b_dir", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--plots", "plot_dir", type=click.Path(), default=None)
@click.option(
    "--metrics",
    "metric_list",
    default=",".join(metrics_mod.METRIC_NAMES),
    show_default=True,
)
def eval_cmd(fused_dir, source_a_dir, source_b_dir, out_path, plot_dir, metric_list):
    """Score a directory of fused images against the two source directories."""

    def body():
        names = tuple(m.strip() for m in metric_list.split(",") if m.strip())
        unknown = [m for m in names if m not in metrics_mod.METRIC_NAMES]
        if unknown:
            raise ConfigError(f"unknown metric(s): {unknown}")
        report = metrics_mod.evaluate_dataset(fused_dir, source_a_dir, source_b_dir, names)
        report.save(out_path)
        if plot_dir:
            report.plot(plot_dir)
        click.echo(f"wrote {out_path} ({len(report.per_sample)} samples)")
        if report.skipped:
            click.echo(f"skipped unmatched: {report.skipped}", err=True)
            return EXIT_IO

    sys.exit(_run(body))


@main.command("dump-features")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("input_a", type=click.Path(exists=True))
@click.argument("input_b", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--use-ema/--no-ema", default=True, show_default=True)
def dump_features(checkpoint, input_a, input_b, out_dir, use_ema):
    """Write channel-mean heatmaps of the latents and fused feature stream."""

    def body():
        system, _ = system_mod.load_system_for_eval(checkpoint, use_ema=use_ema)
        image_a = data_mod.read_image(input_a)
        image_b = data_mod.read_image(input_b)
        maps = system.feature_heatmaps(image_a, image_b)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, arr in maps.items():
            lo, hi = float(arr.min()), float(arr.max())
            scaled = (arr - lo) / (hi - lo) if hi > lo else np.full_like(arr, 0.5)
            data_mod.write_image(out / f"{name}.png", scaled)
        click.echo(f"wrote {len(maps)} heatmaps to {out}")

    sys.exit(_run(body))


@main.command("make-data")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--pairs", type=int, default=16, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--task", default="ivif", show_default=True)
def make_data(out_dir, pairs, size, seed, task):
    """Generate a small synthetic paired dataset for smoke runs."""

    def body():
        data_mod.make_synthetic_pairs(out_dir, n_pairs=pairs, size=size, seed=seed, task=task)
        click.echo(f"wrote {pairs} pairs under {out_dir}")

    sys.exit(_run(body))


@main.command("write-config")
@click.argument("out_path", type=click.Path())
@click.option("--set", "overrides", multiple=True)
def write_config(out_path, overrides):
    """Write the fully resolved default configuration to a YAML file."""

    def body():
        cfg = config_mod.load_config(None, overrides)
        config_mod.save_config(cfg, out_path)
        click.echo(f"wrote {out_path}")

    sys.exit(_run(body))


if __name__ == "__main__":
    main()
