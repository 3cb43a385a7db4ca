"""Run specifications and their flat ``key = value`` text form.

Example::

    # ICEWS14 desk-scale run
    data = prepared/icews14
    n = 64
    k = 2
    lambda1 = 0.01
    epochs = 30

Blank lines and ``#`` comments are ignored. Keys left out take the defaults
below; a key set to an empty value means "unset" for the optional fields.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .params import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class RunSpec:
    data: str | None = None  # directory written by ``chronor prepare``
    train: str | None = None  # raw files, used when ``data`` is unset
    valid: str | None = None
    test: str | None = None
    format: str = "icews"
    n: int = 64
    k: int = 2
    ratio: float = 0.5  # n_r / n_tau
    n_r: int | None = None  # overrides ratio
    init_std: float = 0.01
    lambda1: float = 0.01
    lambda2: float = 0.01
    learning_rate: float = 0.1
    batch_size: int = 1000
    epochs: int = 200
    adagrad_eps: float = 1e-10
    reg_p: int = 4
    valid_every: int = 5
    patience: int = 5
    out: str = "runs/default"
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(lambda1=self.lambda1, lambda2=self.lambda2,
                           learning_rate=self.learning_rate, batch_size=self.batch_size,
                           epochs=self.epochs, adagrad_eps=self.adagrad_eps, reg_p=self.reg_p,
                           seed=self.seed, valid_every=self.valid_every, patience=self.patience)

    def model_config(self, num_entities: int, num_relations: int, num_timestamps: int,
                     num_dated_timestamps: int | None = None) -> ModelConfig:
        kw = dict(num_entities=num_entities, num_relations=num_relations,
                  num_timestamps=num_timestamps, init_std=self.init_std, seed=self.seed,
                  num_dated_timestamps=num_dated_timestamps)
        if self.n_r is not None:
            return ModelConfig(n=self.n, k=self.k, n_r=self.n_r, n_tau=self.n - self.n_r, **kw)
        return ModelConfig.from_ratio(self.n, self.k, self.ratio, **kw)

    def updated(self, **changes) -> "RunSpec":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                value = ""
            elif not isinstance(value, str):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunSpec":
        return cls(**parse_key_values(text, _FIELD_TYPES))

    @classmethod
    def load(cls, path) -> "RunSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


_FIELD_TYPES = {
    "data": str, "train": str, "valid": str, "test": str, "format": str, "out": str,
    "n": int, "k": int, "n_r": int, "batch_size": int, "epochs": int, "reg_p": int,
    "valid_every": int, "patience": int, "seed": int,
    "ratio": float, "init_std": float, "lambda1": float, "lambda2": float,
    "learning_rate": float, "adagrad_eps": float,
}
_OPTIONAL = {"data", "train", "valid", "test", "n_r"}


def _convert(key: str, raw: str, typ):
    if raw == "":
        if key in _OPTIONAL:
            return None
        raise ConfigError(f"{key}: empty value")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def parse_key_values(text: str, types: dict, multi: bool = False) -> dict:
    """Parse ``key = value`` lines; with ``multi`` each value is a comma list."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if multi:
            out[key] = [_convert(key, v.strip(), types[key]) for v in value.split(",") if v.strip()]
        else:
            out[key] = _convert(key, value, types[key])
    return out


GRID_KEYS = ("lambda1", "lambda2", "ratio")


def load_grid(text: str) -> dict[str, list[float]]:
    grid = parse_key_values(text, {k: float for k in GRID_KEYS}, multi=True)
    for key, values in grid.items():
        if not values:
            raise ConfigError(f"grid key {key!r} has no values")
    return grid
