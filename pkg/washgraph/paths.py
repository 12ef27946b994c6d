"""Helper paths for accessing repository assets."""
from __future__ import annotations

from pathlib import Path


PACKAGE_ROOT = Path(__file__).resolve().parent
REPO_ROOT = PACKAGE_ROOT.parent
CONFIG_DIR = REPO_ROOT / "config"
SCENARIO_DIR = CONFIG_DIR / "scenarios"

DEFAULT_DETECTION_PATH = CONFIG_DIR / "detection.json"
DEFAULT_REWARDS_PATH = CONFIG_DIR / "rewards.json"
DEFAULT_SCENARIO_PATH = SCENARIO_DIR / "standard.json"
