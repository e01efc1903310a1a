#!/usr/bin/env python3
"""
Configuration Loader for the Demonstration Engine
Loads settings from config.yaml and environment variables
"""

from dotenv import load_dotenv
load_dotenv()

import copy
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Any, Optional

import yaml
from pythonjsonlogger import jsonlogger

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

DEFAULT_CONFIG_FILE = Path(__file__).with_name("config.yaml")


class Config:
    """Configuration manager for the application"""

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = Path(config_file or os.getenv('DEMO_CONFIG_FILE') or DEFAULT_CONFIG_FILE)
        self.config = self._load_config()
        self._apply_env_overrides()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file, merged over the defaults"""
        defaults = self._get_default_config()
        if not self.config_file.exists():
            logging.getLogger(__name__).warning(f"{self.config_file} not found, using defaults")
            return defaults

        try:
            with open(self.config_file, 'r') as f:
                loaded = yaml.safe_load(f) or {}
        except Exception as e:
            logging.getLogger(__name__).error(f"Error loading config: {e}, using defaults")
            return defaults
        return _merge(defaults, loaded)

    def _get_default_config(self) -> Dict[str, Any]:
        """Get default configuration"""
        return {
            'logging': {
                'level': 'INFO',
                'format': 'text'
            },
            'tracking': {
                'gate_radius_m': 0.005,
                'pair_gate_m': 0.005,
                'prior_weight': 1.0,
                'ambiguity_margin': 1e-9,
                'nonrigid_rms_m': 0.002,
                'min_model_frames': 10,
                'stats_interval': 1000
            },
            'transfer': {
                'rate_hz': 30.0,
                'flange_offset': {
                    'pos': [0.0, 0.0, 0.0],
                    'rot': [1.0, 0.0, 0.0, 0.0]
                }
            },
            'feasibility': {
                'chain_file': 'configs/test_chain.yaml',
                'limits_file': 'configs/limits.yaml',
                'ik': {
                    'damping': 1e-3,
                    'step_clamp': 0.2,
                    'max_iterations': 200,
                    'position_tolerance': 1e-3,
                    'orientation_tolerance': 1e-3,
                    'convergence_tolerance': 1e-14
                }
            },
            'pyramid': {
                'schema_version': 1
            },
            'harness': {
                'tracking': {
                    'markers': 6,
                    'frames': 120,
                    'rate_hz': 240.0,
                    'sigma_m': 0.0003,
                    'dropout_prob': 0.02,
                    'burst_length': 5,
                    'max_simultaneous': 2,
                    'spurious_rate': 0.0,
                    'trials': 100
                },
                'validity': {
                    'n_clean': 50,
                    'n_corrupted': 50,
                    'rate_hz': 30.0,
                    'duration_s': 2.0
                }
            }
        }

    def _apply_env_overrides(self):
        """Override config with environment variables"""
        if os.getenv('DEMO_LOG_LEVEL'):
            self.config['logging']['level'] = os.getenv('DEMO_LOG_LEVEL')
        if os.getenv('DEMO_LOG_FORMAT'):
            self.config['logging']['format'] = os.getenv('DEMO_LOG_FORMAT')

        if os.getenv('DEMO_CHAIN_FILE'):
            self.config['feasibility']['chain_file'] = os.getenv('DEMO_CHAIN_FILE')
        if os.getenv('DEMO_LIMITS_FILE'):
            self.config['feasibility']['limits_file'] = os.getenv('DEMO_LIMITS_FILE')

        if os.getenv('DEMO_TRANSFER_RATE'):
            self.config['transfer']['rate_hz'] = float(os.getenv('DEMO_TRANSFER_RATE'))

    def get(self, path: str, default: Any = None) -> Any:
        """Get config value by dot-notation path"""
        keys = path.split('.')
        value = self.config

        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default

        return value

    def resolve_path(self, path: str) -> Path:
        """Resolve a config-relative file path"""
        candidate = Path(path)
        if candidate.is_absolute() or candidate.exists():
            return candidate
        return self.config_file.parent / candidate

    def snapshot(self) -> Dict[str, Any]:
        """Deep copy of the resolved configuration, for report provenance"""
        return copy.deepcopy(self.config)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


# ==================== LOGGING SETUP ====================

def setup_logging(level: Optional[str] = None, fmt: Optional[str] = None) -> None:
    """Configure root logging to stderr; stdout stays free for summaries"""
    level = (level or config.get('logging.level', 'INFO')).upper()
    fmt = fmt or config.get('logging.format', 'text')

    handler = logging.StreamHandler(sys.stderr)
    if fmt == 'json':
        handler.setFormatter(jsonlogger.JsonFormatter(LOG_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))

    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        handlers=[handler],
        force=True
    )


# Singleton instance
config = Config()

if __name__ == "__main__":
    setup_logging()
    print("\n" + "="*60)
    print("DEMO ENGINE - CONFIGURATION")
    print("="*60)
    print(f"  Config file:  {config.config_file}")
    print(f"  Log level:    {config.get('logging.level')}")
    print(f"  Chain file:   {config.get('feasibility.chain_file')}")
    print(f"  Limits file:  {config.get('feasibility.limits_file')}")
    print(f"  Output rate:  {config.get('transfer.rate_hz')} Hz")
    print(f"  IK damping:   {config.get('feasibility.ik.damping')}")
    print("="*60)
