"""Experiment configuration loaded from YAML.

A config looks like::

    algorithm: sfvi            # or sfvi_avg
    seed: 3
    out: runs/conjugate
    model: {id: conjugate, kwargs: {tau: 1.0, lam: 1.0, s: 1.0}}
    data:
      generator: conjugate     # conjugate | glmm | classification
      params: {N: 200, J: 5}
    optim: {n_iter: 5000, lr: 0.01}
    avg: {R: 20, m: 200, mode: diagonal}   # sfvi_avg only
    eval: {n_samples: 100}

Instead of ``generator`` the data section may name CSV files with ``path``
(and ``test_path``) plus ``format: classification | glmm``. Relative paths
resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .averaging import AvgConfig
from .federation import RunConfig
from .models import MODEL_IDS, make_model

ALGORITHMS = ("sfvi", "sfvi_avg")
GENERATORS = ("conjugate", "glmm", "classification")
FORMATS = ("classification", "glmm")
_TOP_KEYS = {"algorithm", "seed", "out", "model", "data", "optim", "avg", "eval"}


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


@dataclass
class DataSpec:
    generator: str | None = None
    params: dict = field(default_factory=dict)
    path: Path | None = None
    test_path: Path | None = None
    format: str | None = None
    seed: int | None = None


@dataclass
class ExperimentConfig:
    algorithm: str
    model_id: str
    model_kwargs: dict
    data: DataSpec
    run: RunConfig
    out: Path | None = None
    n_samples: int = 100
    source: Path | None = None

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_dict(self) -> dict:
        run = {k: v for k, v in dataclasses.asdict(self.run).items()}
        data = dataclasses.asdict(self.data)
        for k in ("path", "test_path"):
            data[k] = None if data[k] is None else str(data[k])
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "out": None if self.out is None else str(self.out),
            "model": {"id": self.model_id, "kwargs": dict(self.model_kwargs)},
            "data": data,
            "run": run,
            "eval": {"n_samples": self.n_samples},
        }


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    return sec


def _known(cls, values: dict, where: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {where} option(s): {', '.join(unknown)}")
    return values


def _path(value, base: Path) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def parse_config(raw: dict, base: Path = Path("."), seed: int | None = None, out=None) -> ExperimentConfig:
    """Validate a parsed YAML mapping; ``seed`` and ``out`` override the file."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    algorithm = raw.get("algorithm", "sfvi")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")

    model = _section(raw, "model")
    model_id = model.get("id")
    if model_id not in MODEL_IDS:
        raise ConfigError(f"unknown model id {model_id!r}; expected one of {MODEL_IDS}")
    kwargs = model.get("kwargs") or {}
    try:
        make_model(model_id, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model kwargs: {exc}") from exc

    d = _section(raw, "data")
    spec = DataSpec(**_known(DataSpec, dict(d), "data"))
    if (spec.generator is None) == (spec.path is None):
        raise ConfigError("data needs exactly one of 'generator' or 'path'")
    if spec.generator is not None and spec.generator not in GENERATORS:
        raise ConfigError(f"data.generator must be one of {GENERATORS}")
    if spec.path is not None:
        if spec.format not in FORMATS:
            raise ConfigError(f"data.format must be one of {FORMATS}")
        spec.path = _path(spec.path, base)
        spec.test_path = _path(spec.test_path, base)
        for p in (spec.path, spec.test_path):
            if p is not None and not p.is_file():
                raise ConfigError(f"data file not found: {p}")
    if not isinstance(spec.params, dict):
        raise ConfigError("data.params must be a mapping")

    run_seed = seed if seed is not None else raw.get("seed", 0)
    if not isinstance(run_seed, int) or not 0 <= run_seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    opts = dict(_section(raw, "optim"))
    avg = _section(raw, "avg")
    if algorithm == "sfvi" and avg:
        raise ConfigError("'avg' section only applies to algorithm sfvi_avg")
    try:
        if algorithm == "sfvi":
            run = RunConfig(**_known(RunConfig, {**opts, "seed": run_seed}, "optim"))
        else:
            opts.pop("n_iter", None)
            opts.pop("diagonal", None)
            merged = _known(AvgConfig, {**opts, **avg, "seed": run_seed}, "optim/avg")
            run = AvgConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if algorithm == "sfvi" and run.n_iter < 1:
        raise ConfigError("optim.n_iter must be >= 1")

    ev = _section(raw, "eval")
    n_samples = ev.get("n_samples", 100)
    if not isinstance(n_samples, int) or n_samples < 1:
        raise ConfigError("eval.n_samples must be a positive integer")

    out_dir = out if out is not None else raw.get("out")
    return ExperimentConfig(
        algorithm, model_id, dict(kwargs), spec, run, _path(out_dir, base), n_samples
    )


def load_config(path, seed: int | None = None, out=None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    # CLI --out is relative to the working directory, not the config
    out = None if out is None else Path(out).resolve()
    cfg = parse_config(raw, path.parent, seed, out)
    cfg.source = path
    return cfg
