"""INI-style run configuration: schema, validation and normalized echo.

Every key has a default, so an empty file is a valid config. All randomness
derives from ``[run] seed`` through :func:`varlab.space.derive_seed`.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass
from os import PathLike
from typing import Any, Callable

from .trainer import INIT_KINDS, LOSS_KINDS, OPTIMIZERS, SAMPLING_MODES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], str | None] | None = None


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int(s: str) -> int:
    return int(s.strip(), 10)


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none") else float(s)


def _enum(*choices: str):
    def parse(s: str) -> str:
        v = s.strip()
        if v not in choices:
            raise ValueError(f"must be one of {', '.join(choices)}; got {v!r}")
        return v

    return parse


def _list(item: Callable[[str], Any]):
    def parse(s: str) -> list:
        parts = [p for p in (q.strip() for q in s.split(",")) if p]
        if not parts:
            raise ValueError("empty list")
        return [item(p) for p in parts]

    return parse


def _min(lo, strict=False):
    def check(v):
        if v is None:
            return None
        if (v <= lo) if strict else (v < lo):
            return f"must be {'>' if strict else '>='} {lo}"
        return None

    return check


def _all_min(lo):
    def check(vs):
        bad = [v for v in vs if v < lo]
        return f"every entry must be >= {lo}" if bad else None

    return check


def _existing_file(v):
    return None if not v or os.path.isfile(v) else "file not found"


def _open_unit(v):
    return None if 0 < v < 1 else "must lie in (0, 1)"


_TRAIN_DEFAULTS = TrainConfig()

SCHEMA: dict[str, dict[str, Field]] = {
    "run": {
        "seed": Field(_int, 0, _min(0)),
    },
    "instance": {
        "n_prompts": Field(_int, 3, _min(1)),
        "n_responses": Field(_int, 8, _min(2)),
        "ref_kind": Field(_enum("uniform", "random-dirichlet"), "random-dirichlet"),
        "concentration": Field(float, 1.0, _min(0, strict=True)),
        "reward_kind": Field(_enum("iid-gaussian", "planted-best", "constant"), "iid-gaussian"),
        "sigma": Field(float, 1.0, _min(0, strict=True)),
        "gap": Field(float, 1.0, _min(0)),
        "constant": Field(float, 0.0),
        "temperature": Field(float, 1.0, _min(0, strict=True)),
        "rewards_file": Field(str, "", _existing_file),
        "dataset": Field(str, "", _existing_file),
        "n_preferences": Field(_int, 512, _min(1)),
    },
    "train": {
        "loss_kind": Field(_enum(*LOSS_KINDS), _TRAIN_DEFAULTS.loss_kind),
        "optimizer": Field(_enum(*OPTIMIZERS), _TRAIN_DEFAULTS.optimizer),
        "lr": Field(float, _TRAIN_DEFAULTS.lr, _min(0, strict=True)),
        "steps": Field(_int, _TRAIN_DEFAULTS.steps, _min(1)),
        "batch_size": Field(_int, _TRAIN_DEFAULTS.batch_size, _min(1)),
        "adam_beta1": Field(float, _TRAIN_DEFAULTS.adam_beta1, _min(0)),
        "adam_beta2": Field(float, _TRAIN_DEFAULTS.adam_beta2, _min(0)),
        "adam_eps": Field(float, _TRAIN_DEFAULTS.adam_eps, _min(0, strict=True)),
        "adam_grad_floor": Field(float, _TRAIN_DEFAULTS.adam_grad_floor, _min(0)),
        "dpo_beta": Field(float, _TRAIN_DEFAULTS.dpo_beta, _min(0, strict=True)),
        "clip_epsilon": Field(float, _TRAIN_DEFAULTS.clip_epsilon, _open_unit),
        "rlol_beta": Field(float, _TRAIN_DEFAULTS.rlol_beta, _min(0)),
        "rlol_baseline": Field(_bool, _TRAIN_DEFAULTS.rlol_baseline),
        "sampling": Field(_enum(*SAMPLING_MODES), _TRAIN_DEFAULTS.sampling),
        "init": Field(_enum(*INIT_KINDS), _TRAIN_DEFAULTS.init),
        "eval_every": Field(_int, _TRAIN_DEFAULTS.eval_every, _min(1)),
        "converge_kl": Field(_opt_float, None, _min(0, strict=True)),
        "allow_divergence": Field(_bool, False),
    },
    "experiment": {
        "seeds": Field(_int, 20, _min(1)),
        "batch_sizes": Field(_list(_int), [2, 4, 8, 16], _all_min(1)),
        "sampling_modes": Field(_list(_enum("uniform", "reference")), ["uniform", "reference"]),
        "workers": Field(_int, 1, _min(1)),
        "plots": Field(_bool, False),
    },
    "estimator": {
        "n_prompts": Field(_int, 4, _min(1)),
        "n_responses": Field(_int, 16, _min(2)),
        "seeds": Field(_int, 200, _min(1)),
        "n_instances": Field(_int, 1, _min(1)),
    },
    "clip": {
        "rewards": Field(_list(float), [100.0, 99.0], lambda vs: None if min(vs) > 0 else "rewards must be > 0"),
        "temperature": Field(float, 1.0, _min(0, strict=True)),
        "epsilon": Field(float, 1e-3, _open_unit),
        "beta": Field(float, 1e-6, _min(0)),
        "lr": Field(float, 0.01, _min(0, strict=True)),
        "steps": Field(_int, 3000, _min(1)),
        "tol": Field(float, 1e-3, _min(0, strict=True)),
    },
    "negweight": {
        "n_responses": Field(_int, 4, _min(2)),
        "lr": Field(float, 100.0, _min(0, strict=True)),
        "steps": Field(_int, 5000, _min(1)),
    },
    "gradcheck": {
        "seeds": Field(_int, 5, _min(1)),
        "n_prompts": Field(_int, 6, _min(1)),
        "n_responses": Field(_int, 8, _min(2)),
        "batch_size": Field(_int, 32, _min(1)),
        "step": Field(float, 1e-5, _min(0, strict=True)),
        "tolerance": Field(float, 1e-6, _min(0, strict=True)),
    },
}


def defaults() -> dict[str, dict[str, Any]]:
    return {sec: {k: f.default for k, f in fields.items()} for sec, fields in SCHEMA.items()}


def parse_config(text: str, source: str = "<config>") -> dict[str, dict[str, Any]]:
    """Parse and validate config text; raise ConfigError listing every problem."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError([f"{source}: {e}"]) from None
    config = defaults()
    errors = []
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"{section}: unknown section")
            continue
        for key, raw in parser.items(section):
            path = f"{section}.{key}"
            fld = SCHEMA[section].get(key)
            if fld is None:
                errors.append(f"{path}: unknown field")
                continue
            try:
                value = fld.parse(raw)
            except ValueError as e:
                errors.append(f"{path}: {e}")
                continue
            problem = fld.check(value) if fld.check else None
            if problem:
                errors.append(f"{path}: {problem} (got {raw.strip()!r})")
                continue
            config[section][key] = value
    if errors:
        raise ConfigError(errors)
    return config


def validate_config(path: str | PathLike | None) -> dict[str, dict[str, Any]]:
    """Load ``path`` (None means all defaults) into a normalized config."""
    if path is None:
        return defaults()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError([f"{path}: cannot read config ({e.strerror})"]) from None
    return parse_config(text, str(path))


def _render(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(config: dict[str, dict[str, Any]]) -> str:
    """Normalized INI text; parse_config(dump_config(c)) == c."""
    out = io.StringIO()
    for section, fields in SCHEMA.items():
        out.write(f"[{section}]\n")
        for key in fields:
            out.write(f"{key} = {_render(config[section][key])}\n")
        out.write("\n")
    return out.getvalue()


def train_config(config: dict[str, dict[str, Any]], seed: int) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    kwargs = {k: v for k, v in config["train"].items() if k in names}
    return TrainConfig(seed=seed, **kwargs)
