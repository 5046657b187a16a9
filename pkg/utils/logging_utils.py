# utils/logging_utils.py
import logging
import os

ENV_VAR = "MIXLAB_LOG"
DEFAULT_LEVEL = "WARNING"
LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"

_CONFIGURED = False


def configure_logging(level: str = None) -> None:
    """Configure the root handler once; level comes from MIXLAB_LOG unless given."""
    global _CONFIGURED
    name = (level or os.environ.get(ENV_VAR) or DEFAULT_LEVEL).upper()
    numeric = getattr(logging, name, None)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    if not _CONFIGURED:
        logging.basicConfig(level=numeric, format=LOG_FORMAT)
        _CONFIGURED = True
    logging.getLogger().setLevel(numeric)


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


__all__ = ["configure_logging", "get_logger", "ENV_VAR"]
