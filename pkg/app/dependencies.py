"""Shared providers for CLI handlers: logging, run configuration, seeding,
oracle resolution and the run directory layout."""

import logging
import os
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import numpy as np
import structlog
import torch
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from app.errors import ConfigError, MissingFileError
from app.schemas import Dataset, RunConfig, Split
from app.services.corpus import load_references, load_unpaired, reference_paths, shared_source_path, unpaired_path
from app.services.metrics import DeskOracle, ExternalCommandOracle

CONFIG_ENV = "STYLEHELPER_CONFIG"
LOG_LEVEL_ENV = "STYLEHELPER_LOG_LEVEL"

logger = structlog.get_logger(__name__)

KEY_ALIASES = {
    "lambda.sc": "reward.lambda_sc",
    "lambda.bleu": "reward.lambda_bleu",
    "lambda.learned": "reward.lambda_learned",
    "lambda.bleurt": "reward.lambda_learned",
}

# echoing ibt.rewards would duplicate reward.*
_ECHO_EXCLUDE = {"ibt": {"rewards"}}


def configure_logging(level: Optional[str] = None, json_logs: bool = False) -> None:
    load_dotenv()
    level_name = (level or os.getenv(LOG_LEVEL_ENV, "INFO")).upper()
    level_value = logging.getLevelName(level_name)
    if not isinstance(level_value, int):
        raise ConfigError(f"unknown log level: {level_name}")

    renderer = structlog.processors.JSONRenderer() if json_logs else structlog.dev.ConsoleRenderer(colors=False)
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level_value),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; return a torch generator seeded the same way."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# Flat `key = value` configuration
def parse_flat_config(text: str, source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{line_no}: empty key")
        values[canonical_key(key)] = parse_value(raw, source=f"{source}:{line_no}")
    return values


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    return KEY_ALIASES.get(key, key)


def parse_value(raw: str, source: str = "<value>") -> Any:
    if raw == "":
        return None
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: cannot parse value {raw!r}: {e}") from e


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key {key!r} conflicts with scalar {part!r}")
            node = child
        node[parts[-1]] = value
    return nested


def _flatten(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, prefix=f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def format_value(value: Any) -> str:
    if value is None:
        return "null"
    text = yaml.safe_dump(value, default_flow_style=True, width=1_000_000)
    lines = [line for line in text.splitlines() if line.strip() != "..."]
    return " ".join(lines).strip()


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """Parse repeated `--set key=value` arguments."""
    overrides: Dict[str, Any] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        overrides[canonical_key(key)] = parse_value(raw.strip(), source="--set")
    return overrides


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Defaults < config file < overrides."""
    load_dotenv()
    if path is None and os.getenv(CONFIG_ENV):
        path = os.getenv(CONFIG_ENV)

    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFileError(path, what="config file")
        flat.update(parse_flat_config(path.read_text(encoding="utf-8"), source=str(path)))
    for key, value in (overrides or {}).items():
        flat[canonical_key(key)] = value

    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid config: {problems}") from e


def dump_flat(config: RunConfig) -> str:
    data = config.model_dump(mode="json", exclude=_ECHO_EXCLUDE)
    lines = [f"{key} = {format_value(value)}" for key, value in _flatten(data).items()]
    return "\n".join(lines) + "\n"


# Run directory
@dataclass(frozen=True)
class RunDirectory:
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def pairs(self) -> Path:
        return self.root / "pairs"

    @property
    def logs_tsv(self) -> Path:
        return self.root / "logs.tsv"

    @property
    def report_tsv(self) -> Path:
        return self.root / "report.tsv"

    @property
    def config_echo(self) -> Path:
        return self.root / "config.echo"

    def prepare(self) -> "RunDirectory":
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        self.pairs.mkdir(parents=True, exist_ok=True)
        return self

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.pt"

    def stage_log(self, stage: str) -> Path:
        return self.root / f"logs.{stage}.tsv"

    def echo(self, config: RunConfig) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_echo.write_text(dump_flat(config), encoding="utf-8")
        return self.config_echo


def require_paths(*paths: Union[str, Path, None], what: str = "file") -> None:
    """Referenced paths must resolve before a stage starts."""
    for p in paths:
        if p is None:
            continue
        if not Path(p).exists():
            raise MissingFileError(p, what=what)


def get_oracle(spec: str, lowercase: bool = False):
    """Resolve `metric.oracle`: `desk` or `external:<command>`."""
    if spec == "desk":
        return DeskOracle(lowercase=lowercase)
    if spec.startswith("external:"):
        return ExternalCommandOracle(spec[len("external:"):].strip())
    raise ConfigError(f"unknown oracle {spec!r}")


# Task data
def style_of(path: Union[str, Path]) -> str:
    """`train.informal` -> `informal`."""
    parts = Path(path).name.split(".")
    if len(parts) < 2 or not parts[1]:
        raise ConfigError(f"cannot read a style from {path}; expected {{split}}.{{style}}")
    return parts[1]


def get_unpaired(config: RunConfig, split: Split, style: str, required: bool = True) -> Dataset:
    path = unpaired_path(config.data.dir, split, style)
    if not path.is_file():
        if required:
            raise MissingFileError(path, what=f"{split.value} corpus")
        logger.warning("corpus_missing", path=str(path))
        return Dataset(items=(), split=split)
    return load_unpaired(path, style, split, lowercase=config.data.lowercase, max_len=config.data.max_len)


def get_references(config: RunConfig, split: Split, style: str, required: bool = True) -> Optional[Dataset]:
    """`{split}.{style}` sources with their `.ref0..refK` rewrites, when present.
    For `style.source`, a shared `{split}.src` with `{split}.ref0..refK` also works."""
    source = unpaired_path(config.data.dir, split, style)
    refs = reference_paths(config.data.dir, split, style)
    if not refs and style == config.style.source:
        shared = reference_paths(config.data.dir, split)
        if shared:
            source, refs = shared_source_path(config.data.dir, split), shared
            require_paths(source, what="reference source file")
            logger.info("shared_references", source=str(source), refs=len(refs))
    if not refs:
        if required:
            raise MissingFileError(f"{source}.ref0", what="reference file")
        return None
    return load_references(
        source,
        refs,
        split,
        lowercase=config.data.lowercase,
        max_len=config.data.max_len,
    )
