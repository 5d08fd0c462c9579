"""
Handlers package initialization.
Import and register all CLI commands here.
"""
import argparse

from .commands import register_command_handlers
from .experiments import register_experiment_handlers


def register_handlers(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    """
    Register all handlers.

    Args:
        subparsers: Subparser collection to register commands to
        common: Parent parser with the shared options
    """
    register_command_handlers(subparsers, common)
    register_experiment_handlers(subparsers, common)
