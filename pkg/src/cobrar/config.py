"""Experiment configuration files.

INI-style sections whose values are JSON literals, so types survive a
round trip::

    [dataset]
    format = "movielens"
    path = "ml-1m/ratings.dat"
    k_core = 5

    [model]
    kind = "cobrar"

    [train]
    learning_rate = 0.001
    architecture = [2048]

A ``[grid]`` section replaces ``[train]`` for hyperparameter search; each of
its values is a list of candidates.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from cobrar.training import TRAIN_FIELDS, TrainConfig

OUTPUT_ROOT_ENV = "COBRAR_OUTPUT_ROOT"
FORMATS = ("movielens", "amazon", "synthetic")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    format: str = "movielens"
    path: str = ""
    k_core: int = 5
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    cache_dir: str = ""
    # synthetic generator only
    n_users: int = 200
    n_items: int = 100
    n_blocks: int = 4
    p_in: float = 0.5
    p_out: float = 0.02
    generator_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        if self.format not in FORMATS:
            raise ConfigError(f"dataset.format must be one of {FORMATS}, got {self.format!r}")
        if self.format != "synthetic" and not self.path:
            raise ConfigError("dataset.path is required for file-based formats")
        if self.k_core < 1:
            raise ConfigError("dataset.k_core must be >= 1")
        if len(self.split_ratios) != 3:
            raise ConfigError("dataset.split_ratios needs three values")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    model_kind: str = "cobrar"
    train: TrainConfig | None = None
    grid: dict | None = None
    eval_k: int = 5
    output_dir: str = "runs"
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.model_kind not in ("cobrar", "deepmf"):
            raise ConfigError(f"model.kind must be 'cobrar' or 'deepmf', got {self.model_kind!r}")
        if (self.train is None) == (self.grid is None):
            raise ConfigError("exactly one of [train] or [grid] must be present")
        if self.eval_k < 1:
            raise ConfigError("eval.k must be >= 1")

    # -- path resolution -----------------------------------------------------

    def _resolve(self, p: str) -> Path:
        path = Path(os.path.expanduser(p))
        if not path.is_absolute() and self.source:
            path = Path(self.source).parent / path
        return path

    @property
    def output_root(self) -> Path:
        env = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(env) if env else self._resolve(self.output_dir)

    @property
    def raw_path(self) -> Path:
        return self._resolve(self.dataset.path)

    @property
    def cache_path(self) -> Path:
        if self.dataset.cache_dir:
            return self._resolve(self.dataset.cache_dir)
        return self.output_root / "prepared" / digest(dataset_section(self.dataset))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        if self.train is not None:
            return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))
        return dataclasses.replace(self, grid={**self.grid, "seed": [seed]})


def dataset_section(spec: DatasetSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["split_ratios"] = list(spec.split_ratios)
    return d


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def _section(parser, name) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"[{name}] {key}: value is not a JSON literal: {raw!r}") from exc
    return out


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    known = {"dataset", "model", "train", "grid", "eval", "output"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    ds_fields = {f.name for f in dataclasses.fields(DatasetSpec)}
    ds = _section(parser, "dataset")
    bad = set(ds) - ds_fields
    if bad:
        raise ConfigError(f"unknown [dataset] keys: {sorted(bad)}")
    train = grid = None
    if parser.has_section("train"):
        values = _section(parser, "train")
        bad = set(values) - set(TRAIN_FIELDS)
        if bad:
            raise ConfigError(f"unknown [train] keys: {sorted(bad)}")
        try:
            train = TrainConfig(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    if parser.has_section("grid"):
        grid = _section(parser, "grid")
        bad = set(grid) - set(TRAIN_FIELDS)
        if bad:
            raise ConfigError(f"unknown [grid] keys: {sorted(bad)}")
        for k, v in grid.items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"[grid] {k} must be a non-empty list of candidates")
    model = _section(parser, "model")
    ev = _section(parser, "eval")
    out = _section(parser, "output")
    try:
        return ExperimentConfig(
            dataset=DatasetSpec(**ds),
            model_kind=model.get("kind", "cobrar"),
            train=train,
            grid=grid,
            eval_k=int(ev.get("k", 5)),
            output_dir=out.get("dir", "runs"),
            source=source,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = ["[dataset]"]
    lines += [f"{k} = {json.dumps(v)}" for k, v in dataset_section(cfg.dataset).items()]
    lines += ["", "[model]", f"kind = {json.dumps(cfg.model_kind)}", ""]
    if cfg.train is not None:
        lines.append("[train]")
        lines += [f"{k} = {json.dumps(v)}" for k, v in cfg.train.to_dict().items()]
    else:
        lines.append("[grid]")
        lines += [f"{k} = {json.dumps(cfg.grid[k])}" for k in TRAIN_FIELDS if k in cfg.grid]
    lines += ["", "[eval]", f"k = {cfg.eval_k}", "", "[output]", f"dir = {json.dumps(cfg.output_dir)}", ""]
    return "\n".join(lines)
