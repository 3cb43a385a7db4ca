"""Embedding tables, initialization and the ``CHRN`` checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic        4 bytes   b"CHRN"
    version      u32       1
    config_len   u32
    config       config_len bytes of UTF-8 JSON (ModelConfig fields)
    tables       entity, relation, time, static as little-endian f64, row-major
    crc32        u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

TABLES = ("entity", "relation", "time", "static")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n: int
    k: int
    n_r: int
    n_tau: int
    num_entities: int
    num_relations: int  # post-reciprocal
    num_timestamps: int
    init_std: float = 0.01
    seed: int = 0
    # leading timestamps that form the chronological chain; None means all
    num_dated_timestamps: int | None = None

    def __post_init__(self):
        if self.k not in (2, 3):
            raise ConfigError(f"k must be 2 or 3, got {self.k}")
        if self.n_r < 1 or self.n_tau < 1 or self.n_r + self.n_tau != self.n:
            raise ConfigError(f"need n_r >= 1, n_tau >= 1 and n_r + n_tau = n; "
                              f"got n_r={self.n_r}, n_tau={self.n_tau}, n={self.n}")
        for name in ("num_entities", "num_relations", "num_timestamps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.init_std < 0:
            raise ConfigError("init_std must be >= 0")
        chain = self.num_dated_timestamps
        if chain is not None and not 0 <= chain <= self.num_timestamps:
            raise ConfigError(f"num_dated_timestamps={chain} outside [0, {self.num_timestamps}]")

    @property
    def time_chain(self) -> int:
        return self.num_timestamps if self.num_dated_timestamps is None else self.num_dated_timestamps

    def shapes(self) -> dict[str, tuple[int, int, int]]:
        return {
            "entity": (self.num_entities, self.n, self.k),
            "relation": (self.num_relations, self.n_r, self.k),
            "time": (self.num_timestamps, self.n_tau, self.k),
            "static": (self.num_relations, self.n, self.k),
        }

    @property
    def num_parameters(self) -> int:
        return ((self.num_entities * self.n + self.num_relations * self.n_r
                 + self.num_timestamps * self.n_tau + self.num_relations * self.n) * self.k)

    @classmethod
    def from_ratio(cls, n: int, k: int, ratio: float, **kw) -> "ModelConfig":
        """Split ``n`` rows so that ``n_r / n_tau`` is as close to ``ratio`` as allowed."""
        if n < 2:
            raise ConfigError("n must be >= 2 to hold relation and time rows")
        if not ratio > 0:
            raise ConfigError(f"ratio must be > 0, got {ratio}")
        n_r = int(round(n * ratio / (1.0 + ratio)))
        n_r = min(max(n_r, 1), n - 1)
        return cls(n=n, k=k, n_r=n_r, n_tau=n - n_r, **kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class ModelParams:
    entity: np.ndarray
    relation: np.ndarray
    time: np.ndarray
    static: np.ndarray

    def tables(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TABLES}

    def copy(self) -> "ModelParams":
        return ModelParams(*(getattr(self, name).copy() for name in TABLES))

    def check_shapes(self, config: ModelConfig) -> None:
        for name, shape in config.shapes().items():
            got = getattr(self, name).shape
            if got != shape:
                raise ConfigError(f"{name} table has shape {got}, config expects {shape}")

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tables().values())


def init_model(config: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    return ModelParams(*(rng.normal(0.0, config.init_std, size=shape) if config.init_std > 0
                         else np.zeros(shape) for shape in config.shapes().values()))


_MAGIC = b"CHRN"
_VERSION = 1


def checkpoint_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    params.check_shapes(config)
    cfg = json.dumps(config.to_json(), sort_keys=True).encode("utf-8")
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(cfg)), cfg]
    parts += [np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tables().values()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: magic is {blob[:4]!r}, expected {_MAGIC!r}")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: version {version} not supported (expected {_VERSION})")
    if len(blob) < 12 + cfg_len + 4:
        raise CheckpointError(f"{path}: truncated config block")
    try:
        config = ModelConfig.from_json(json.loads(blob[12:12 + cfg_len].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from None

    shapes = config.shapes()
    expected = 12 + cfg_len + 8 * sum(int(np.prod(s)) for s in shapes.values()) + 4
    if len(blob) != expected:
        raise CheckpointError(f"{path}: tables: expected {expected} bytes for the configured "
                              f"shapes, file has {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError(f"{path}: crc32 mismatch")

    offset = 12 + cfg_len
    tables = []
    for shape in shapes.values():
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        tables.append(arr.astype(np.float64).reshape(shape))
        offset += 8 * count
    return ModelParams(*tables), config
