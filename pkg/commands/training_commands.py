"""
Training Commands - Stage 1 pretraining and Stage 2 fine-tuning
"""

import click

from commands.common import ckpt_option, handle_errors, resolve_config, run_options
from services.pipeline_service import run_finetune, run_pretrain


@click.command("pretrain")
@run_options
@handle_errors
def pretrain_cmd(config_path, seed, out_dir):
    """Continue self-supervised pretraining with PEFT-only trainables."""
    cfg = resolve_config(config_path, seed, out_dir)
    click.echo(f"checkpoint={run_pretrain(cfg)}")


@click.command("finetune")
@run_options
@ckpt_option(required=False)
@handle_errors
def finetune_cmd(config_path, seed, out_dir, ckpt_path):
    """Fine-tune the detector; without --ckpt the encoder starts from the seed."""
    cfg = resolve_config(config_path, seed, out_dir)
    click.echo(f"checkpoint={run_finetune(cfg, ckpt_path)}")
