"""Run configuration: a sectioned key=value text format.

Example::

    [data]
    variable = precipitation_like
    n_train = 256
    fine_size = 64x64

    [train]
    epochs = 60
    seed = 0

    [experiment]
    loss = L2
    preproc = learnable

    [matrix]
    seeds = 0,1,2

Every key must belong to a known section; typos are rejected rather than
ignored. ``--set section.key=value`` overrides use the same parser.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .data import DatasetSpec
from .training import ExperimentSpec, TrainConfig


class ConfigError(ValueError):
    """Malformed config text, unknown key or invalid value (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: str = "L2"
    preproc: str = "none"
    seeds: tuple[int, ...] = (0, 1, 2)

    def experiment(self, seed: int | None = None) -> ExperimentSpec:
        train = self.train if seed is None else dataclasses.replace(self.train, seed=seed)
        return ExperimentSpec(self.loss, self.preproc, self.data.variable, train)

    def sections(self) -> dict[str, dict[str, object]]:
        return {
            "data": dataclasses.asdict(self.data),
            "train": dataclasses.asdict(self.train),
            "experiment": {"loss": self.loss, "preproc": self.preproc},
            "matrix": {"seeds": self.seeds},
        }

    def to_text(self) -> str:
        """Canonical text; parsing it back yields an equal RunConfig."""
        out = []
        for name, values in self.sections().items():
            out.append(f"[{name}]")
            out += [f"{k} = {_format(v)}" for k, v in values.items()]
            out.append("")
        return "\n".join(out)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_DATA_TYPES = typing.get_type_hints(DatasetSpec)
_TRAIN_TYPES = typing.get_type_hints(TrainConfig)
SCHEMA: dict[str, dict[str, object]] = {
    "data": _DATA_TYPES,
    "train": _TRAIN_TYPES,
    "experiment": {"loss": str, "preproc": str},
    "matrix": {"seeds": tuple[int, ...]},
}


def _coerce(raw: str, tp, where: str):
    raw = raw.strip()
    args = typing.get_args(tp)
    try:
        if type(None) in args:
            if raw.lower() in ("none", ""):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _coerce(raw, inner, where)
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
            return tuple(_coerce(p, args[0], where) for p in parts)
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None
    raise ConfigError(f"{where}: unsupported value type {tp}")


def _apply(values: dict[str, dict[str, object]], section: str, key: str, raw: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SCHEMA)}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key '{section}.{key}'; valid keys: {', '.join(SCHEMA[section])}")
    values.setdefault(section, {})[key] = _coerce(raw, SCHEMA[section][key], f"{section}.{key}")


def parse_text(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True, delimiters=("=",))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse config: {err}".replace("\n", " ")) from None
    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(values, section, key, raw)
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        _apply(values, section, name, raw)
    return build(values)


def build(values: dict[str, dict[str, object]]) -> RunConfig:
    exp = values.get("experiment", {})
    try:
        cfg = RunConfig(
            data=DatasetSpec(**values.get("data", {})),
            train=TrainConfig(**values.get("train", {})),
            loss=exp.get("loss", "L2"),
            preproc=exp.get("preproc", "none"),
            seeds=values.get("matrix", {}).get("seeds", (0, 1, 2)),
        )
        cfg.experiment()  # validates loss and preproc
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    if not cfg.seeds:
        raise ConfigError("matrix.seeds must list at least one seed")
    return cfg


def load(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_text(text, overrides)
