"""Batched scoring of encoded queries against every entity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ModelParams
from .rotor import apply_rotor


@dataclass
class QueryBatch:
    head: np.ndarray      # (B, n, k)
    rotor: np.ndarray     # (B, n, k) relation rows stacked over time rows
    static: np.ndarray    # (B, n, k)
    inner: np.ndarray     # head after the relation/time rotor
    query: np.ndarray     # inner after the static rotor


def forward_queries(params: ModelParams, quads: np.ndarray) -> QueryBatch:
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    head = params.entity[quads[:, 0]]
    rotor = np.concatenate([params.relation[quads[:, 1]], params.time[quads[:, 3]]], axis=1)
    static = params.static[quads[:, 1]]
    inner = apply_rotor(rotor, head)
    query = apply_rotor(static, inner)
    return QueryBatch(head, rotor, static, inner, query)


def score_queries(params: ModelParams, quads: np.ndarray) -> np.ndarray:
    """(B, |E|) scores of every candidate tail for each (h, r, ?, tau) row."""
    q = forward_queries(params, quads).query
    ent = params.entity.reshape(len(params.entity), -1)
    return q.reshape(len(q), -1) @ ent.T
