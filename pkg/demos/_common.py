"""Shared setup for the demo scripts: one cached toy run under ``runs/demo``."""
import logging
import sys
from pathlib import Path

from diffusion_di import experiments as ex

ROOT = Path(__file__).resolve().parent.parent


def workspace(*overrides):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = [a for a in sys.argv[1:] if "=" in a]
    cfg = ex.load_config(None, [f"workdir={ROOT / 'runs' / 'demo'}", *overrides, *args])
    return cfg, ex.Workspace(cfg)
