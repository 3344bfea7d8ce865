"""
Common command helpers - shared options and domain error handling
"""

import functools

import click

from config import OUTPUT_DIR_ENV, RunConfig, load_config
from errors import Wav2DFError, exit_code_for

config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML run configuration."
)
seed_option = click.option("--seed", type=int, default=None, help="Override the run seed.")
out_option = click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), default=None,
    help=f"Output directory (default: config output_dir, or ${OUTPUT_DIR_ENV}).",
)


def ckpt_option(required: bool = True):
    return click.option("--ckpt", "ckpt_path", type=click.Path(dir_okay=False), required=required, default=None,
                        help="Checkpoint file.")


def run_options(func):
    """--config, --seed and --out."""
    return config_option(seed_option(out_option(func)))


def resolve_config(config_path, seed, out_dir) -> RunConfig:
    # the env var is read by load_config only when --out is absent
    return load_config(config_path, seed=seed, output_dir=out_dir)


def handle_errors(func):
    """Turn domain errors into 'error[category]: message' on stderr and a per-category exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Wav2DFError as e:
            click.echo(f"error[{e.category}]: {e}", err=True)
            raise SystemExit(exit_code_for(e))

    return wrapper
