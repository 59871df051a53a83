"""Shared rich console for progress and diagnostics."""

from rich.console import Console

from cpudse.config import QUIET

# stderr keeps stdout free for dumps (dump-space, stats) that get piped
console = Console(stderr=True, quiet=QUIET, highlight=False)


def warn(message: str) -> None:
    """Print a warning line."""
    console.print(f"[yellow]Warning: {message}[/yellow]")
