"""
Corpus Commands - synthetic corpus generation
"""

import click

from commands.common import handle_errors, resolve_config, run_options
from services.pipeline_service import run_gen_corpus


@click.command("gen-corpus")
@run_options
@handle_errors
def gen_corpus_cmd(config_path, seed, out_dir):
    """Generate the synthetic corpus: manifest plus waveform files."""
    cfg = resolve_config(config_path, seed, out_dir)
    manifest = run_gen_corpus(cfg)
    click.echo(f"manifest={manifest}")
