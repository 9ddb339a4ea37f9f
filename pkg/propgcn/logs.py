import logging

from rich.console import Console
from rich.logging import RichHandler

# Human-facing output goes to stdout, logs go to stderr
console = Console()
err_console = Console(stderr=True)


def setup_logging(level: str = "INFO") -> logging.Logger:
    """Configure the root logger with a rich handler on stderr."""
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        numeric = logging.INFO

    logging.basicConfig(
        level=numeric,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, rich_tracebacks=True)],
        force=True,
    )

    return logging.getLogger("propgcn")
