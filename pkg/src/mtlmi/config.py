"""Flat key=value run configuration with command-line overrides.

The config file holds one ``key = value`` pair per line (``#`` comments and
blank lines allowed); any key can also be passed as ``--key value`` on the
command line, which wins over the file. Unknown keys are rejected outright.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from .data import GeneratorConfig
from .errors import ContractError
from .objective import TrainConfig


@dataclass
class RunConfig:
    generator: GeneratorConfig
    train: TrainConfig
    dataset_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    report_path: Optional[str] = None
    log_path: Optional[str] = None
    embeddings_path: Optional[str] = None
    resume: bool = False


_PATH_KEYS = ("dataset_path", "checkpoint_path", "report_path", "log_path",
              "embeddings_path")
_STR_KEYS = {"estimator", "pareto_weighting", "mi_sign"}
_BOOL_KEYS = {"resume"}

# generator seed lives under its own key so one file can carry both seeds
_GEN_ALIASES = {"gen_seed": "seed"}


def _field_types():
    types = {}
    for f in dataclasses.fields(GeneratorConfig):
        key = "gen_seed" if f.name == "seed" else f.name
        types[key] = ("generator", f.name, f.type)
    for f in dataclasses.fields(TrainConfig):
        types[f.name] = ("train", f.name, f.type)
    return types


def _coerce(key: str, raw: str):
    if key in _BOOL_KEYS:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ContractError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if key in _PATH_KEYS or key in _STR_KEYS:
        return raw
    ftypes = _field_types()
    section, name, ftype = ftypes[key]
    try:
        if "int" in str(ftype):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r}") from exc


def parse_config(file_path: Optional[str],
                 overrides: Optional[dict[str, str]] = None) -> RunConfig:
    pairs: dict[str, str] = {}
    if file_path is not None:
        with open(file_path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ContractError(
                        f"{file_path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                pairs[key.strip()] = value.strip()
    if overrides:
        pairs.update(overrides)

    cfg = RunConfig(GeneratorConfig(), TrainConfig())
    known = _field_types()
    for key, raw in pairs.items():
        if key in _PATH_KEYS:
            setattr(cfg, key, raw)
        elif key in _BOOL_KEYS:
            setattr(cfg, key, _coerce(key, raw))
        elif key in known:
            section, name, _ = known[key]
            target = cfg.generator if section == "generator" else cfg.train
            value = raw if key in _STR_KEYS else _coerce(key, raw)
            setattr(target, name, value)
        else:
            raise ContractError(f"unknown config key {key!r}")
    cfg.generator.validate()
    cfg.train.validate()
    return cfg
