import logging
from logging.handlers import RotatingFileHandler
import os

from config.settings import LOG_DIR, LOG_LEVEL

os.makedirs(LOG_DIR, exist_ok=True)

formatter = logging.Formatter("%(asctime)s | %(levelname)s | %(message)s")

handler = RotatingFileHandler(
    os.path.join(LOG_DIR, "delayld.log"), maxBytes=5_000_000, backupCount=2
)
handler.setFormatter(formatter)

logger = logging.getLogger("DelayLD")
logger.setLevel(LOG_LEVEL)
if not logger.handlers:
    logger.addHandler(handler)


def enable_console(level: str | None = None) -> None:
    """Mirror the package log on stderr (CLI runs only)."""
    if any(getattr(h, "_delayld_console", False) for h in logger.handlers):
        return
    console = logging.StreamHandler()
    console.setFormatter(formatter)
    console._delayld_console = True
    logger.addHandler(console)
    if level:
        logger.setLevel(level.upper())
