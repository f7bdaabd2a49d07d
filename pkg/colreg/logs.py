"""
Logging helpers - one log file per component under <output_root>/logs
"""
import logging
import os
from pathlib import Path

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(name: str, log_dir: str | Path = "runs/logs") -> logging.Logger:
    """Return the named logger with a file handler at <log_dir>/<name>.log"""
    logger = logging.getLogger(name)
    logger.setLevel(logging.INFO)

    Path(log_dir).mkdir(parents=True, exist_ok=True)
    log_file = str(Path(log_dir) / f"{name.lower()}.log")

    # re-creating a worker must not duplicate lines
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == os.path.abspath(log_file):
            return logger

    handler = logging.FileHandler(log_file)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)

    return logger
