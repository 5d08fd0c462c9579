"""
Logging module for the molecular map pipeline.
"""
import logging
import os
import sys
from pathlib import Path

# Create logs directory if it doesn't exist
logs_dir = Path(os.getenv("MOLMAP_LOG_DIR", "logs"))


def setup_logger() -> logging.Logger:
    """
    Setup and configure the application logger.

    Returns:
        Configured logger named "molmap"
    """
    logger = logging.getLogger("molmap")
    level = getattr(logging, os.getenv("MOLMAP_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logger.setLevel(level)

    if logger.handlers:
        return logger

    # Create formatters
    file_formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    console_formatter = logging.Formatter(
        "%(asctime)s - %(levelname)s - %(message)s"
    )

    # Console goes to stderr, stdout stays free for command output
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(console_formatter)
    logger.addHandler(console_handler)

    try:
        logs_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(logs_dir / "molmap.log")
        file_handler.setLevel(level)
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)
    except OSError as e:
        logger.warning(f"File logging disabled, cannot use {logs_dir}: {e}")

    return logger


# Create the logger instance
logger = setup_logger()
