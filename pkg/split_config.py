#!/usr/bin/env python3
"""
Configuration loading for slimsplit
Defaults live in config/defaults.json; user files and CLI flags override them
"""

import copy
import json
import os
from contextlib import contextmanager
from typing import Dict, Iterator, Optional

from split_errors import ConfigError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config")
DEFAULTS_PATH = os.path.join(CONFIG_DIR, "defaults.json")

_defaults_cache = None
_active_config: Optional[Dict] = None


def load_defaults(path: Optional[str] = None) -> Dict:
    """Load the defaults file (cached for the default path)"""
    global _defaults_cache
    if path is None and _defaults_cache is not None:
        return copy.deepcopy(_defaults_cache)

    target = path or DEFAULTS_PATH
    try:
        with open(target, 'r') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {target}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"configuration file {target} is not valid JSON: {e}")

    if path is None:
        _defaults_cache = data
    return copy.deepcopy(data)


def merge_config(base: Dict, override: Dict, _where: str = "") -> Dict:
    """Recursively merge override onto base; unknown keys are an error"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{_where}.{key}" if _where else key
        if key not in merged:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = merge_config(merged[key], value, where)
        else:
            merged[key] = value
    return merged


def load_config(user_path: Optional[str] = None) -> Dict:
    """Defaults merged with an optional user JSON file"""
    config = load_defaults()
    if user_path:
        try:
            with open(user_path, 'r') as f:
                override = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"configuration file not found: {user_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"configuration file {user_path} is not valid JSON: {e}")
        config = merge_config(config, override)
    return config


def current_config() -> Dict:
    """The configuration installed by using_config, else the defaults"""
    if _active_config is None:
        return load_defaults()
    return copy.deepcopy(_active_config)


@contextmanager
def using_config(config: Dict) -> Iterator[Dict]:
    """Make config the one section() and current_config() read until the block exits"""
    global _active_config
    previous, _active_config = _active_config, copy.deepcopy(config)
    try:
        yield config
    finally:
        _active_config = previous


def section(name: str) -> Dict:
    """One section of the active configuration, e.g. section('training')"""
    config = current_config()
    if name not in config:
        raise ConfigError(f"unknown configuration section: {name}")
    return config[name]


def check_keys(data: Dict, allowed, where: str):
    """Reject keys a dataclass does not know about"""
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {', '.join(unknown)}")


def repo_path(path: str) -> str:
    """Resolve a relative data path against the repository root"""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    return os.path.join(os.path.dirname(CONFIG_DIR), path)
