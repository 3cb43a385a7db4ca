"""Time-aware filtered ranking: MRR and Hits@{1,3,10}.

Ties are broken optimistically: only candidates scoring strictly higher than
the true answer push its rank down.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .data import FilterIndex, reciprocal
from .model import score_queries
from .params import ModelParams


@dataclass(frozen=True)
class MetricsReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    query_count: int

    @classmethod
    def from_ranks(cls, ranks) -> "MetricsReport":
        ranks = np.asarray(ranks, dtype=np.float64)
        if ranks.size == 0:
            raise ValueError("no ranks to aggregate")
        return cls(mrr=float(np.mean(1.0 / ranks)),
                   hits1=float(np.mean(ranks <= 1)),
                   hits3=float(np.mean(ranks <= 3)),
                   hits10=float(np.mean(ranks <= 10)),
                   query_count=int(ranks.size))

    def to_json(self) -> dict:
        return asdict(self)

    def percentages(self) -> dict[str, str]:
        return {"MRR": f"{100 * self.mrr:.2f}", "Hits@1": f"{100 * self.hits1:.2f}",
                "Hits@3": f"{100 * self.hits3:.2f}", "Hits@10": f"{100 * self.hits10:.2f}"}


def rank_tails(queries: np.ndarray, params: ModelParams, filter_index: FilterIndex,
               batch_size: int = 1000) -> np.ndarray:
    """Filtered rank of column 2 of each (h, r, t, tau) row among all entities."""
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 4)
    ranks = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        scores = score_queries(params, chunk)
        rows = np.arange(len(chunk))
        target = scores[rows, chunk[:, 2]].copy()
        fr, fc = [], []
        for i, (h, r, _, tau) in enumerate(chunk.tolist()):
            known = filter_index.get(h, r, tau)
            if known:
                fr.extend([i] * len(known))
                fc.extend(known)
        if fr:
            scores[fr, fc] = -np.inf
        scores[rows, chunk[:, 2]] = target
        ranks[start:start + len(chunk)] = 1 + np.sum(scores > target[:, None], axis=1)
    return ranks


def rank_query(quad, params: ModelParams, filter_index: FilterIndex) -> int:
    return int(rank_tails(np.asarray(quad)[None, :], params, filter_index)[0])


def both_directions(quads: np.ndarray, num_base_relations: int) -> np.ndarray:
    """Tail queries followed by their reciprocal head queries."""
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    return np.concatenate([quads, reciprocal(quads, num_base_relations)])


def evaluate(quads: np.ndarray, params: ModelParams, filter_index: FilterIndex,
             batch_size: int = 1000, return_ranks: bool = False):
    """Filtered metrics over (h, r, ?, tau) and (?, r, t, tau) for every forward quad."""
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    if len(quads) == 0:
        raise ValueError("cannot evaluate an empty split")
    num_base = len(params.relation) // 2
    if quads[:, 1].max() >= num_base:
        raise ValueError("evaluation expects forward quads only")
    ranks = rank_tails(both_directions(quads, num_base), params, filter_index, batch_size)
    report = MetricsReport.from_ranks(ranks)
    return (report, ranks) if return_ranks else report


def write_ranks_csv(path, ranks: np.ndarray) -> None:
    """Per-query audit trail: query id, direction, rank."""
    ranks = np.asarray(ranks)
    half = len(ranks) // 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "direction", "rank"])
        for i in range(half):
            w.writerow([i, "tail", int(ranks[i])])
            w.writerow([i, "head", int(ranks[half + i])])
