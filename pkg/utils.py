import os
import sys
import json
import logging
import hashlib
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional
import yaml
from dotenv import load_dotenv
import colorlog

load_dotenv()

LOGGER_ROOT = "lenient_marl"
CODE_VERSION = "1.0.0"


class ConfigError(ValueError):
    """Raised when a configuration field is missing or out of range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def setup_logging(log_dir: str, level: str = "INFO", console_enabled: bool = True) -> logging.Logger:
    """Setup logging with a dated log file and colored console output."""
    Path(log_dir).mkdir(parents=True, exist_ok=True)

    level = os.getenv("LMARL_LOG_LEVEL", level)
    today = datetime.now().strftime("%Y-%m-%d")
    log_file = os.path.join(log_dir, f"lenient_marl_{today}.log")

    logger = logging.getLogger(LOGGER_ROOT)
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    logger.handlers.clear()

    formatter = logging.Formatter(
        "[%(asctime)s] [%(levelname)s] [%(name)s] - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    )

    file_handler = logging.FileHandler(log_file)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    if console_enabled:
        console_handler = logging.StreamHandler(sys.stdout)
        color_formatter = colorlog.ColoredFormatter(
            "%(log_color)s[%(asctime)s]%(reset)s [%(levelname)s] [%(name)s] - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
            log_colors={
                'DEBUG': 'blue',
                'INFO': 'green',
                'WARNING': 'yellow',
                'ERROR': 'red',
                'CRITICAL': 'red,bg_white',
            }
        )
        console_handler.setFormatter(color_formatter)
        logger.addHandler(console_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    """Get logger instance for a module."""
    return logging.getLogger(f"{LOGGER_ROOT}.{name}")


def merge_dicts(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively overlay `override` onto a copy of `base`."""
    merged = dict(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_dicts(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(config_path: str, defaults_path: Optional[str] = None) -> Dict[str, Any]:
    """Load a YAML configuration file, layered over defaults, with environment overrides."""
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path, 'r') as f:
        config = yaml.safe_load(f) or {}

    if defaults_path and os.path.abspath(defaults_path) != os.path.abspath(config_path):
        if not os.path.exists(defaults_path):
            raise FileNotFoundError(f"Config file not found: {defaults_path}")
        with open(defaults_path, 'r') as f:
            defaults = yaml.safe_load(f) or {}
        config = merge_dicts(defaults, config)

    config.setdefault('run', {})
    config.setdefault('logging', {})
    config['run']['output_dir'] = os.getenv('LMARL_OUTPUT_DIR', config['run'].get('output_dir', 'runs'))
    config['logging']['level'] = os.getenv('LMARL_LOG_LEVEL', config['logging'].get('level', 'INFO'))

    validate_config(config)
    return config


def validate_config(config: Dict[str, Any]) -> None:
    """Validate the top-level shape of a configuration dictionary."""
    required_fields = ['env', 'agent', 'run']

    for field in required_fields:
        if field not in config:
            raise ConfigError(field, "missing required configuration section")

    if not config['env'].get('layout'):
        raise ConfigError('env.layout', "a layout file is required")

    episodes = config['run'].get('episodes', 0)
    if not isinstance(episodes, int) or episodes < 0:
        raise ConfigError('run.episodes', "must be a non-negative integer")


def stable_digest(payload: Any, length: int = 10) -> str:
    """Short hex digest of a JSON-serializable payload, stable across processes."""
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.blake2b(text.encode("utf-8"), digest_size=16).hexdigest()[:length]


def save_state_to_json(data: Any, filepath: str) -> None:
    """Save state data to JSON file."""
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w') as f:
        json.dump(data, f, indent=2, default=str)


def load_state_from_json(filepath: str) -> Optional[Any]:
    """Load state data from JSON file."""
    if not os.path.exists(filepath):
        return None

    with open(filepath, 'r') as f:
        return json.load(f)


def calculate_percentage(part: float, whole: float) -> Optional[float]:
    """Percentage of `part` in `whole`, or None when `whole` is zero."""
    if whole == 0:
        return None
    return (part / whole) * 100
