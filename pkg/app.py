"""
Main entry point for the Wav2DF toolkit.

This module provides the application factory for the command-line interface.
Commands are organized in separate modules in the commands package.
"""

import logging

import click

from commands import register_commands

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def create_app() -> click.Group:
    """
    Application factory function to create and configure the CLI group.

    Returns:
        click.Group: Configured command group with every command registered
    """

    @click.group()
    @click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
    @click.option("-q", "--quiet", is_flag=True, help="Warnings and errors only; hides progress bars.")
    def cli(verbose, quiet):
        """Wav2DF: desk-scale audio deepfake detection."""
        configure_logging(verbose, quiet)

    # Register all commands
    register_commands(cli)

    return cli


if __name__ == "__main__":
    create_app()()
