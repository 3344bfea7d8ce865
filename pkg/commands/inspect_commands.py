"""
Inspect Commands - parameter accounting of a checkpoint
"""

import click

from commands.common import ckpt_option, handle_errors, resolve_config, run_options
from services.pipeline_service import run_inspect


@click.command("inspect")
@run_options
@ckpt_option()
@click.option("--split", default=None, help="Also tabulate expert selection over this split.")
@handle_errors
def inspect_cmd(config_path, seed, out_dir, ckpt_path, split):
    """Print total/trainable parameter counts per module."""
    cfg = resolve_config(config_path, seed, out_dir)
    result = run_inspect(ckpt_path, cfg, split)
    click.echo("module\ttotal\ttrainable\tfraction")
    for module, total, trainable, fraction in result.params:
        click.echo(f"{module}\t{total}\t{trainable}\t{fraction:.6f}")
    if result.gate_usage is not None:
        click.echo("")
        click.echo("expert\tselected\tfrequency")
        for expert, selected, frequency in result.gate_usage:
            click.echo(f"{expert}\t{selected}\t{frequency:.6f}")
