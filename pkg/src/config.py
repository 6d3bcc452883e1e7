import os
import logging

KALGRAD_VERSION = "0.1.0"

# Run environment
OUT_DIR = os.getenv("KALGRAD_OUT_DIR", "runs")
WORKERS = int(os.getenv("KALGRAD_WORKERS", "1"))
LOG_LEVEL = os.getenv("KALGRAD_LOG_LEVEL", "INFO").upper()

# Numerics
GRID_POINTS = int(os.getenv("KALGRAD_GRID_POINTS", "512"))
TARGET_RHO = float(os.getenv("KALGRAD_TARGET_RHO", "0.995"))

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level=None):
    """
    Installs one stream handler on the root logger.
    Safe to call more than once (the CLI calls it per invocation).
    """
    level = (level or LOG_LEVEL)
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)

    root = logging.getLogger()
    root.setLevel(level)
    if not any(getattr(h, "_kalgrad", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._kalgrad = True
        root.addHandler(handler)
    return root
