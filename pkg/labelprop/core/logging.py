import logging

from labelprop.core.exceptions import ConfigError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
HANDLER_NAME = "labelprop"


def configure_logging(level: str = "INFO") -> None:
    """Install (or replace) the stderr handler on the root logger."""
    name = level.upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"unknown log level '{level}'")
    root = logging.getLogger()
    for handler in list(root.handlers):
        if handler.get_name() == HANDLER_NAME:
            root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.set_name(HANDLER_NAME)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(name)
