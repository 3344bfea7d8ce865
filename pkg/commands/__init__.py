"""
Commands Package - Register every CLI command
"""

from .corpus_commands import gen_corpus_cmd
from .training_commands import finetune_cmd, pretrain_cmd
from .evaluation_commands import evaluate_cmd, export_embeddings_cmd
from .inspect_commands import inspect_cmd


def register_commands(cli):
    """Attach all commands to the click group."""
    cli.add_command(gen_corpus_cmd)
    cli.add_command(pretrain_cmd)
    cli.add_command(finetune_cmd)
    cli.add_command(evaluate_cmd)
    cli.add_command(inspect_cmd)
    cli.add_command(export_embeddings_cmd)
