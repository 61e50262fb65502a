"""Shared rich console and logging setup."""

import logging

from rich.console import Console
from rich.logging import RichHandler

console = Console(stderr=True)

_configured = False


def configure_logging(verbose: bool = False) -> None:
    """Install a RichHandler on the package logger (idempotent)."""
    global _configured

    logger = logging.getLogger("dusty_desk")
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    if _configured:
        return

    handler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    logger.addHandler(handler)
    _configured = True
