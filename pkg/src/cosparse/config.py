"""Run configuration files: flat ``[section]`` / ``key = value`` text.

Sections are ``[model]``, ``[train]``, ``[sparsify]`` and ``[theory]``.
Unknown sections and keys are rejected with the offending line number.
Blank lines and lines starting with ``#`` or ``;`` are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

from .model import ModelConfig
from .sparsifier import SparsifySchedule
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt(conv):
    return lambda s: None if s.lower() in ("none", "") else conv(s)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _words(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


SCHEMA = {
    "model": {
        "vocab": _opt(int), "d_model": int, "layers": int, "heads": int, "groups": _opt(int),
        "d_head": _opt(int), "d_ffn": _opt(int), "activation": str, "rope": _bool,
        "max_seq_len": int, "init_std": float, "seed": int,
    },
    "train": {
        "epochs": int, "batch_size": int, "seq_len": int, "lr": float, "seed": int,
        "eval_fraction": float, "steps_per_epoch": _opt(int), "eval_batches": int,
        "calib_size": int, "clip_norm": _opt(float), "weight_decay": float, "lr_schedule": str,
        "corpus": _opt(str),
    },
    "sparsify": {
        "target_fraction": _opt(float), "target_params": _opt(int), "top_k_fraction": float,
        "theta": float, "min_inner_dim": int, "cadence": _opt(int), "scoring": str, "kinds": _words,
        "recovery_steps": int, "recovery_lr": float,
    },
    "theory": {
        "sizes": _ints, "trials": int, "seed": int, "bound_d_model": int, "bound_d_ffn": int,
        "bound_length": int, "bound_trials": int, "sparsity_levels": _floats,
    },
}

_TRAIN_ONLY = {"corpus"}
_SPARSIFY_EXTRA = {"target_fraction", "target_params", "recovery_steps", "recovery_lr"}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sparsify: dict = field(default_factory=dict)
    theory: dict = field(default_factory=dict)

    def model_config(self, vocab: int) -> ModelConfig:
        kw = {k: v for k, v in self.model.items() if k != "seed"}
        if kw.get("vocab") is None:
            kw["vocab"] = vocab
        for key in ("d_model", "layers", "heads"):
            if key not in kw:
                raise ConfigError(f"[model] is missing required key {key!r}")
        return ModelConfig(**kw)

    @property
    def model_seed(self) -> int:
        return self.model.get("seed", self.train.get("seed", 0))

    @property
    def has_budget(self) -> bool:
        return self.sparsify.get("target_fraction") is not None or self.sparsify.get("target_params") is not None

    def schedule(self, initial_params: int) -> SparsifySchedule | None:
        if not self.has_budget:
            return None
        frac, absolute = self.sparsify.get("target_fraction"), self.sparsify.get("target_params")
        if frac is not None and absolute is not None:
            raise ConfigError("[sparsify] sets both target_fraction and target_params")
        if absolute is None:
            if not 0.0 < frac <= 1.0:
                raise ConfigError(f"[sparsify] target_fraction must lie in (0, 1], got {frac}")
            absolute = int(math.floor(frac * initial_params + 1e-9))
        kw = {k: v for k, v in self.sparsify.items() if k not in _SPARSIFY_EXTRA}
        return SparsifySchedule(target_params=absolute, **kw)

    def train_config(self, initial_params: int | None = None, dense: bool = False) -> TrainConfig:
        kw = {k: v for k, v in self.train.items() if k not in _TRAIN_ONLY}
        sched = None if dense or initial_params is None else self.schedule(initial_params)
        return TrainConfig(schedule=sched, **kw)

    @property
    def corpus_path(self) -> str | None:
        return self.train.get("corpus")


def parse(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        store = getattr(cfg, section)
        if key in store:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{section}]")
        try:
            store[key] = SCHEMA[section][key](value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc
    return cfg


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text, str(path))


def bundled_toy() -> RunConfig:
    text = resources.files("cosparse").joinpath("data/toy.cfg").read_text(encoding="utf-8")
    return parse(text, "toy.cfg")
