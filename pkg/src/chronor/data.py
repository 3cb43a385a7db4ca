"""Quadruple datasets: parsing, vocabularies, integer encoding and filter indexes.

Two text formats are understood, both UTF-8 and tab separated:

* ``icews``: ``head  relation  tail  YYYY-MM-DD``
* ``yago15k``: ``head  relation  tail`` (no time), or
  ``head  relation  tail  occursSince|occursUntil  "YYYY-##-##"``.
  Timed YAGO facts get their relation renamed ``<relation>@<modifier>``.

Encoded splits can be persisted in a small binary container (``TKGD``)::

    magic       4 bytes  b"TKGD"
    version     u32      1
    split       u32      0=train 1=valid 2=test 3=filter
    entities    u32
    relations   u32      post-reciprocal count
    timestamps  u32
    quads       u32      number of rows
    payload     quads x 4 little-endian u32 (head, relation, tail, timestamp)
"""
from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

NO_TIME = "NO_TIME"
FORMATS = ("icews", "yago15k")
YAGO_MODIFIERS = ("occursSince", "occursUntil")
RECIPROCAL_SUFFIX = "^-1"
SPLITS = ("train", "valid", "test")

_DATE = re.compile(r"^(-?\d{1,4})(?:-(\d{2}|##))?(?:-(\d{2}|##))?$")


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        if source is not None and line is not None:
            where = f"{source}:{line}: "
        elif source is not None:
            where = f"{source}: "
        else:
            where = "" if line is None else f"line {line}: "
        super().__init__(where + message)
        self.line = line
        self.source = source


class EncodingError(DataError):
    pass


@dataclass(frozen=True)
class RawQuadruple:
    head: str
    relation: str
    tail: str
    time_literal: str = NO_TIME

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            if not getattr(self, name):
                raise DataError(f"empty {name} in {self!r}")
        if self.time_literal != NO_TIME and _DATE.match(self.time_literal) is None:
            raise DataError(f"bad time literal {self.time_literal!r}")


def time_sort_key(literal: str) -> tuple:
    """Chronological key; ``##`` wildcards count as 0 and NO_TIME sorts last."""
    if literal == NO_TIME:
        return (1, 0, 0, 0)
    m = _DATE.match(literal)
    if m is None:
        raise DataError(f"bad time literal {literal!r}")
    parts = [0 if (g is None or g == "##") else int(g) for g in m.groups()]
    return (0, *parts)


def source_relation(name: str) -> str:
    """Relation name with any YAGO time-modifier suffix removed."""
    for mod in YAGO_MODIFIERS:
        if name.endswith("@" + mod):
            return name[:-len(mod) - 1]
    return name


def _clean_literal(token: str) -> str:
    token = token.strip()
    # YAGO dumps sometimes carry an xsd datatype suffix after the quoted literal.
    if "^^" in token:
        token = token.split("^^", 1)[0]
    return token.strip().strip('"')


def parse_quadruple_file(source: BinaryIO | bytes | str | Path, format: str,
                         name: str | None = None) -> list[RawQuadruple]:
    """Parse a tab separated fact file into raw quadruples."""
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if isinstance(source, (str, Path)):
        name = name or str(source)
        with open(source, "rb") as fh:
            return parse_quadruple_file(fh, format, name=name)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)

    out: list[RawQuadruple] = []
    for lineno, raw in enumerate(source, start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8 ({exc.reason})", lineno, name) from None
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split("\t")]
        try:
            out.append(_parse_fields(fields, format))
        except DataError as exc:
            raise ParseError(str(exc), lineno, name) from None
    return out


def _parse_fields(fields: list[str], format: str) -> RawQuadruple:
    if format == "icews":
        if len(fields) != 4:
            raise DataError(f"expected 4 fields, got {len(fields)}")
        head, rel, tail, when = fields
        if _DATE.match(when) is None or when.count("-") != 2:
            raise DataError(f"bad ICEWS date {when!r}")
        return RawQuadruple(head, rel, tail, when)

    if len(fields) == 3:
        return RawQuadruple(*fields, NO_TIME)
    if len(fields) == 5:
        head, rel, tail, modifier, literal = fields
        if modifier not in YAGO_MODIFIERS:
            raise DataError(f"unknown time modifier {modifier!r}")
        return RawQuadruple(head, f"{rel}@{modifier}", tail, _clean_literal(literal))
    raise DataError(f"expected 3 or 5 fields, got {len(fields)}")


@dataclass
class Vocab:
    entities: list[str]
    relations: list[str]  # originals, then reciprocals in the same order
    timestamps: list[str]
    entity_index: dict[str, int] = field(init=False, repr=False)
    relation_index: dict[str, int] = field(init=False, repr=False)
    timestamp_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.relations) % 2:
            raise DataError("relation list must hold originals and reciprocals")
        self.entity_index = {s: i for i, s in enumerate(self.entities)}
        self.relation_index = {s: i for i, s in enumerate(self.relations)}
        self.timestamp_index = {s: i for i, s in enumerate(self.timestamps)}
        for what, names, index in (("entity", self.entities, self.entity_index),
                                   ("relation", self.relations, self.relation_index),
                                   ("timestamp", self.timestamps, self.timestamp_index)):
            if len(index) != len(names):
                raise DataError(f"duplicate {what} names in vocabulary")

    @property
    def num_base_relations(self) -> int:
        return len(self.relations) // 2

    @property
    def num_source_relations(self) -> int:
        """Distinct relations before time-modifier grouping."""
        return len({source_relation(r) for r in self.relations[:self.num_base_relations]})

    @property
    def has_no_time(self) -> bool:
        return bool(self.timestamps) and self.timestamps[-1] == NO_TIME

    @property
    def num_dated_timestamps(self) -> int:
        return len(self.timestamps) - int(self.has_no_time)

    def encode(self, q: RawQuadruple) -> tuple[int, int, int, int]:
        try:
            h = self.entity_index[q.head]
        except KeyError:
            raise EncodingError(f"unknown entity {q.head!r}") from None
        try:
            t = self.entity_index[q.tail]
        except KeyError:
            raise EncodingError(f"unknown entity {q.tail!r}") from None
        try:
            r = self.relation_index[q.relation]
        except KeyError:
            raise EncodingError(f"unknown relation {q.relation!r}") from None
        if r >= self.num_base_relations:
            raise EncodingError(f"relation {q.relation!r} is a reciprocal name")
        try:
            tau = self.timestamp_index[q.time_literal]
        except KeyError:
            raise EncodingError(f"unknown timestamp {q.time_literal!r}") from None
        return h, r, t, tau

    def decode(self, quad: Sequence[int]) -> RawQuadruple:
        h, r, t, tau = (int(x) for x in quad)
        return RawQuadruple(self.entities[h], self.relations[r], self.entities[t],
                            self.timestamps[tau])

    def to_json(self) -> dict:
        return {"entities": self.entities, "relations": self.relations,
                "timestamps": self.timestamps}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(list(obj["entities"]), list(obj["relations"]), list(obj["timestamps"]))


def build_vocab(raw: Iterable[RawQuadruple]) -> Vocab:
    """Build vocabularies over every split at once.

    Entities and relations keep first-seen order; timestamps are sorted
    chronologically with NO_TIME (if any) last.
    """
    entities: dict[str, None] = {}
    relations: dict[str, None] = {}
    times: set[str] = set()
    empty = True
    for q in raw:
        empty = False
        entities.setdefault(q.head)
        entities.setdefault(q.tail)
        relations.setdefault(q.relation)
        times.add(q.time_literal)
    if empty:
        raise DataError("cannot build a vocabulary from no facts")
    base = list(relations)
    return Vocab(list(entities), base + [r + RECIPROCAL_SUFFIX for r in base],
                 sorted(times, key=time_sort_key))


@dataclass
class Dataset:
    quads: np.ndarray  # (N, 4) int64: head, relation, tail, timestamp
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.quads = np.asarray(self.quads, dtype=np.int64).reshape(-1, 4)

    def __len__(self):
        return len(self.quads)


def reciprocal(quads: np.ndarray, num_base_relations: int) -> np.ndarray:
    """(h, r, t, tau) -> (t, r + |R|, h, tau)."""
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    flipped = quads[:, [2, 1, 0, 3]].copy()
    flipped[:, 1] += num_base_relations
    return flipped


def encode_dataset(raw: Sequence[RawQuadruple], vocab: Vocab, split: str) -> Dataset:
    """Encode raw facts; the train split is augmented with reciprocal quads."""
    forward = np.array([vocab.encode(q) for q in raw], dtype=np.int64).reshape(-1, 4)
    if split == "train":
        forward = np.concatenate([forward, reciprocal(forward, vocab.num_base_relations)])
    return Dataset(forward, split)


class FilterIndex:
    """Known true tails for every (head, relation, timestamp) key."""

    def __init__(self, table: dict[tuple[int, int, int], frozenset[int]]):
        self._table = table

    def __len__(self):
        return len(self._table)

    def __getitem__(self, key) -> frozenset[int]:
        return self.get(*key)

    def get(self, head: int, relation: int, timestamp: int) -> frozenset[int]:
        return self._table.get((int(head), int(relation), int(timestamp)), frozenset())

    def items(self):
        return self._table.items()

    def to_quads(self) -> np.ndarray:
        rows = [(h, r, t, tau) for (h, r, tau), tails in self._table.items() for t in tails]
        rows.sort()
        return np.array(rows, dtype=np.int64).reshape(-1, 4)

    @classmethod
    def from_quads(cls, quads: np.ndarray) -> "FilterIndex":
        table: dict[tuple[int, int, int], set[int]] = {}
        for h, r, t, tau in np.asarray(quads, dtype=np.int64).reshape(-1, 4).tolist():
            table.setdefault((h, r, tau), set()).add(t)
        return cls({k: frozenset(v) for k, v in table.items()})


def build_filter_index(datasets: Iterable[Dataset], num_base_relations: int) -> FilterIndex:
    """Index over all splits, forward and reciprocal directions."""
    parts = [ds.quads for ds in datasets]
    if not parts:
        return FilterIndex({})
    quads = np.concatenate(parts)
    forward = quads[quads[:, 1] < num_base_relations]
    return FilterIndex.from_quads(np.concatenate([quads, reciprocal(forward, num_base_relations)]))


def generate_synthetic_kg(num_entities: int, num_relations: int, num_timestamps: int,
                          num_facts: int, seed: int) -> list[RawQuadruple]:
    """Random distinct facts over ``e*``/``r*`` names and consecutive days from 2000-01-01."""
    counts = (num_entities, num_relations, num_timestamps, num_facts)
    if min(counts) < 1:
        raise DataError(f"all counts must be >= 1, got {counts}")
    total = num_entities * num_entities * num_relations * num_timestamps
    if num_facts > total:
        raise DataError(f"{num_facts} facts requested but only {total} distinct quadruples exist")

    rng = np.random.default_rng(seed)
    E, R, T = num_entities, num_relations, num_timestamps
    seen: set[tuple[int, int, int, int]] = set()
    facts: list[tuple[int, int, int, int]] = []

    # covering pass: every entity, relation and timestamp used at least once
    cover = max(-(-E // 2), R, T)
    for i in range(min(cover, num_facts)):
        q = ((2 * i) % E, i % R, (2 * i + 1) % E, i % T)
        if q not in seen:
            seen.add(q)
            facts.append(q)

    remaining = num_facts - len(facts)
    if remaining > 0:
        if num_facts * 2 > total:
            order = rng.permutation(total)
        else:
            order = None
        pos = 0
        while remaining > 0:
            if order is not None:
                flat = int(order[pos])
                pos += 1
            else:
                flat = int(rng.integers(total))
            h, rest = divmod(flat, E * R * T)
            t, rest = divmod(rest, R * T)
            r, tau = divmod(rest, T)
            q = (h, r, t, tau)
            if q in seen:
                continue
            seen.add(q)
            facts.append(q)
            remaining -= 1

    day0 = date(2000, 1, 1)
    stamps = [(day0 + timedelta(days=i)).isoformat() for i in range(T)]
    return [RawQuadruple(f"e{h}", f"r{r}", f"e{t}", stamps[tau]) for h, r, t, tau in facts]


# ---------------------------------------------------------------------------
# binary persistence

_MAGIC = b"TKGD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
_SPLIT_CODES = {"train": 0, "valid": 1, "test": 2, "filter": 3}


def write_quads(path, quads: np.ndarray, split: str, num_entities: int,
                num_relations: int, num_timestamps: int) -> None:
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    if len(quads) and (quads.min() < 0 or quads.max() > 0xFFFFFFFF):
        raise DataError("ids out of u32 range")
    header = _HEADER.pack(_MAGIC, _VERSION, _SPLIT_CODES[split], num_entities,
                          num_relations, num_timestamps, len(quads))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quads.astype("<u4").tobytes())


def read_quads(path) -> tuple[np.ndarray, dict]:
    """Return the (N, 4) id array and the header fields."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, split, ne, nr, nt, n = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 16 * n
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {n} quads, got {len(blob)}")
    quads = np.frombuffer(blob, dtype="<u4", offset=_HEADER.size).reshape(n, 4).astype(np.int64)
    names = {v: k for k, v in _SPLIT_CODES.items()}
    if split not in names:
        raise DataError(f"{path}: unknown split code {split}")
    meta = {"split": names[split], "entities": ne, "relations": nr, "timestamps": nt}
    for col, bound, what in ((0, ne, "entities"), (2, ne, "entities"),
                             (1, nr, "relations"), (3, nt, "timestamps")):
        if n and quads[:, col].max() >= bound:
            raise DataError(f"{path}: id out of range for {what}")
    return quads, meta
