"""
Autodiscovers command modules inside this package.
We keep actual command modules under `src/commands/commands/` so that
markdown docs can live alongside code.
"""

from .commands import *  # noqa: F401,F403 - re-export discovered commands
from src.core import CommandRegistry  # noqa: E402

__all__ = ["CommandRegistry"]
