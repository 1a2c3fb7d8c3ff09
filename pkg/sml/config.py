import hashlib
import io
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Union

from dotenv import dotenv_values, find_dotenv, load_dotenv
from pydantic import ValidationError

from sml.exceptions import ConfigError
from sml.models import ExperimentConfig


class Settings:
    """Process-level settings that never change the artifacts of a run"""

    def __init__(self):
        self.WORKERS = int(os.getenv('SML_WORKERS', '1'))
        self.OUTPUT_DIR = os.getenv('SML_OUTPUT_DIR', 'runs/latest')
        self.LOG_LEVEL = os.getenv('SML_LOG_LEVEL', 'INFO')
        self.CONFIG_PATH = os.getenv('SML_CONFIG', 'experiment.env')

    def to_dict(self) -> Dict[str, Any]:
        return {key: value for key, value in self.__dict__.items() if not key.startswith('_')}


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance, reading .env from the working directory first"""
    load_dotenv(find_dotenv(usecwd=True))
    return Settings()


def _format_value(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return '-'.join(_format_value(item) for item in value)
    if isinstance(value, list):
        return ','.join(_format_value(item) for item in value)
    return str(value)


def dump_experiment_config(cfg: ExperimentConfig) -> str:
    """
    Canonical text form: one '# [section]' header per section followed by
    SECTION_FIELD=value lines, every field written, in declaration order.
    """
    lines = []
    for section_name in ExperimentConfig.model_fields:
        section = getattr(cfg, section_name)
        lines.append(f'# [{section_name}]')
        for field_name in type(section).model_fields:
            key = f'{section_name}_{field_name}'.upper()
            lines.append(f'{key}={_format_value(getattr(section, field_name))}')
        lines.append('')
    return '\n'.join(lines)


def parse_experiment_config(text: str) -> ExperimentConfig:
    """Parse the KEY=VALUE form produced by dump_experiment_config (missing keys take defaults)"""
    values = dotenv_values(stream=io.StringIO(text))
    prefixes = {f'{name.upper()}_': name for name in ExperimentConfig.model_fields}
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in ExperimentConfig.model_fields}
    for key, value in values.items():
        prefix = next((p for p in prefixes if key.startswith(p)), None)
        if prefix is None:
            raise ConfigError(f"Unknown config key '{key}'")
        sections[prefixes[prefix]][key[len(prefix):].lower()] = '' if value is None else value
    try:
        return ExperimentConfig(**sections)
    except ValidationError as exc:
        raise ConfigError(f"Invalid experiment config: {exc}") from exc


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    return parse_experiment_config(path.read_text(encoding='utf-8'))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_experiment_config(cfg).encode('utf-8')).hexdigest()


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Copy of cfg with the master seed replaced"""
    try:
        return ExperimentConfig(**{**cfg.model_dump(), 'run': {'seed': seed}})
    except ValidationError as exc:
        raise ConfigError(f"Invalid seed {seed}: {exc}") from exc
