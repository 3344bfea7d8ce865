"""
Evaluation Commands - scoring, metrics and embedding export
"""

import click

from commands.common import ckpt_option, handle_errors, resolve_config, run_options
from services.pipeline_service import run_evaluate, run_export_embeddings
from storage import format_value


@click.command("evaluate")
@run_options
@ckpt_option()
@click.option("--split", "splits", multiple=True, default=("eval",), show_default=True,
              help="Split to score; repeat for several.")
@handle_errors
def evaluate_cmd(config_path, seed, out_dir, ckpt_path, splits):
    """Write score files and a metric report (EER, min t-DCF) per split."""
    cfg = resolve_config(config_path, seed, out_dir)
    report = run_evaluate(cfg, ckpt_path, splits)
    for key, value in report.items():
        click.echo(f"{key}={format_value(value)}")


@click.command("export-embeddings")
@run_options
@ckpt_option()
@click.option("--split", default="eval", show_default=True, help="Split to export.")
@handle_errors
def export_embeddings_cmd(config_path, seed, out_dir, ckpt_path, split):
    """Write pooled per-utterance embeddings as a table."""
    cfg = resolve_config(config_path, seed, out_dir)
    click.echo(f"embeddings={run_export_embeddings(cfg, ckpt_path, split)}")
