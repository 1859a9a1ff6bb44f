"""
Settings for the SeeCo worker.

Three pydantic models (backbone, adaptation, suite) loaded from one
`key = value` file. Process-level switches (log level, Celery, port) come
from the environment, with a `.env` file honoured through python-dotenv.
"""

import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Literal, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError, FormatError
from mini_vlm import ModelConfig, validate_model_config

logger = logging.getLogger(__name__)

MODES = ('static', 'consensus', 'gcl', 'scl', 'seeco')


class AdaptationConfig(BaseModel):
    """Hyper-parameters of the consensus adaptation and window traversal."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    views: int = 4
    delta: float = Field(0.5, ge=0.0, le=1.0)
    tau: float = Field(0.01, gt=0.0)
    blocks: int = Field(2, ge=1)
    rank: int = Field(8, ge=1)
    beta: float = Field(16.0, gt=0.0)
    lr: float = Field(3e-4, ge=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    iterations: int = Field(1, ge=1)
    aggregation: Literal['mean', 'max'] = 'mean'
    synonym_count: int = Field(5, ge=1)
    context_mode: Literal['per_dimension', 'per_synonym'] = 'per_dimension'
    view_softmax: bool = False
    score_temperature: float = Field(0.01, gt=0.0)
    window: int = Field(224, ge=1)
    stride: int = Field(112, ge=1)
    session_mode: Literal['per_window', 'per_image'] = 'per_window'
    mode: Literal['static', 'consensus', 'gcl', 'scl', 'seeco'] = 'seeco'
    adapter_seed: int = 0

    @field_validator('views')
    @classmethod
    def _views_supported(cls, value: int) -> int:
        if value not in (1, 2, 4):
            raise ValueError("views (K) must be 1, 2 or 4")
        return value


def _split_list(value):
    if isinstance(value, str):
        return tuple(item.strip() for item in value.split(',') if item.strip())
    return value


class SuiteConfig(BaseModel):
    """Synthetic benchmark run."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    seed: int = 0
    scenes: int = Field(32, ge=0)
    classes: int = Field(4, ge=2)
    size: Tuple[int, int] = (224, 224)
    texture_noise: float = Field(0.05, ge=0.0)
    modes: Tuple[Literal['static', 'consensus', 'gcl', 'scl', 'seeco'], ...] = ('static', 'consensus', 'seeco')
    sweep_views: Tuple[int, ...] = ()
    sweep_blocks: Tuple[int, ...] = ()
    view_robustness: bool = False
    record_timings: bool = False
    threads: int = Field(1, ge=1)

    @field_validator('size', 'modes', 'sweep_views', 'sweep_blocks', mode='before')
    @classmethod
    def _comma_lists(cls, value):
        return _split_list(value)


class Settings(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    model: ModelConfig = ModelConfig()
    adaptation: AdaptationConfig = AdaptationConfig()
    suite: SuiteConfig = SuiteConfig()


# file key -> (section, field)
FILE_KEYS: Dict[str, Tuple[str, str]] = {
    **{name: ('adaptation', name) for name in AdaptationConfig.model_fields},
    **{name: ('suite', name) for name in SuiteConfig.model_fields},
    'image_size': ('model', 'image_size'),
    'patch_size': ('model', 'patch_size'),
    'embed_dim': ('model', 'embed_dim'),
    'num_blocks': ('model', 'num_blocks'),
    'num_heads': ('model', 'num_heads'),
    'vocab_size': ('model', 'vocab_size'),
    'positional_embeddings': ('model', 'positional_embeddings'),
    'model_seed': ('model', 'seed'),
}

ALIASES = {
    'K': 'views',
    'P': 'blocks',
    'r': 'rank',
    'Z': 'synonym_count',
    'δ': 'delta',
    'τ': 'tau',
    'β': 'beta',
}


def replace(cfg: BaseModel, **changes) -> BaseModel:
    """Validated copy of a frozen settings model with some fields changed."""
    try:
        return type(cfg)(**{**cfg.model_dump(), **changes})
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = '.'.join(str(p) for p in item.get('loc', ()))
        parts.append(f"{where}: {item.get('msg')}")
    return '; '.join(parts)


def parse_settings(text: str) -> Settings:
    """
    Parse `key = value` lines (UTF-8, `#` comments, blank lines ignored).

    Raises:
        ConfigError: malformed line, unknown or repeated key, invalid value
    """
    sections: Dict[str, Dict[str, str]] = {'model': {}, 'adaptation': {}, 'suite': {}}
    seen = set()
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"line {number}: expected 'key = value'")
        key, _, value = line.partition('=')
        key = ALIASES.get(key.strip(), key.strip())
        if key not in FILE_KEYS:
            raise ConfigError(f"line {number}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"line {number}: key '{key}' given twice")
        seen.add(key)
        section, field = FILE_KEYS[key]
        sections[section][field] = value.strip()

    try:
        settings = Settings(
            model=ModelConfig(**sections['model']),
            adaptation=AdaptationConfig(**sections['adaptation']),
            suite=SuiteConfig(**sections['suite']),
        )
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e
    validate_model_config(settings.model)
    return settings


def read_utf8(path: Union[str, Path]) -> str:
    """
    Whole text file as UTF-8.

    Raises:
        FormatError: invalid UTF-8, with the line of the first bad byte
    """
    raw = Path(path).read_bytes()
    try:
        return raw.decode('utf-8')
    except UnicodeDecodeError as e:
        raise FormatError(f"{path} is not valid UTF-8", raw[:e.start].count(b'\n') + 1) from e


def load_settings(path: Union[str, Path, None]) -> Settings:
    if path is None:
        return Settings()
    try:
        text = read_utf8(path)
    except (OSError, FormatError) as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    settings = parse_settings(text)
    logger.info(f"Loaded settings from {path}")
    return settings


def _format(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ','.join(_format(v) for v in value)
    return str(value)


def settings_echo(settings: Settings) -> List[Tuple[str, str]]:
    """Every file key with its effective value, in FILE_KEYS order."""
    echo = []
    for key, (section, field) in FILE_KEYS.items():
        echo.append((key, _format(getattr(getattr(settings, section), field))))
    return echo


def configure_logging():
    """Process-wide logging to stdout; level from SEECO_LOG_LEVEL."""
    load_dotenv()
    level = os.getenv('SEECO_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout)
        ]
    )
