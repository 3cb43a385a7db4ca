"""Full-softmax training with element-norm and temporal-smoothness penalties.

The objective for one mini-batch is::

    total = nll + lambda1 * reg_norm + lambda2 * reg_temporal

``nll`` averages the tail cross-entropy over the batch (reciprocal quads in the
train split cover head prediction). ``reg_norm`` averages, over the batch, the
entrywise p-th powers of the head, static rotor, [relation | time] rotor and
tail embeddings. ``reg_temporal`` is the mean p-th power norm of differences
between chronologically adjacent timestamp embeddings.

Gradients are written out by hand and composed with the chain rule;
``chronor.gradcheck`` verifies them against central differences.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import FilterIndex
from .evaluation import evaluate
from .model import forward_queries
from .params import ModelConfig, ModelParams, init_model
from .rotor import apply_rotor_vjp

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.01
    lambda2: float = 0.01
    learning_rate: float = 0.1
    batch_size: int = 1000
    epochs: int = 200
    adagrad_eps: float = 1e-10
    reg_p: int = 4
    seed: int = 0
    valid_every: int = 5
    patience: int = 5
    debug: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.valid_every < 1:
            raise ValueError("batch_size and valid_every must be >= 1, epochs >= 0")
        if self.reg_p < 1:
            raise ValueError("reg_p must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    nll: float
    reg_n4: float
    reg_temporal: float
    total: float

    def to_json(self) -> dict:
        return asdict(self)


def softmax_nll(scores, target: int) -> float:
    """-log softmax(scores)[target] with max subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise TrainingError("non-finite score in softmax")
    m = scores.max()
    return float(m + np.log(np.sum(np.exp(scores - m))) - scores[target])


def _pnorm_p(x: np.ndarray, p: int, axis=None) -> np.ndarray:
    a = np.abs(x)
    return np.sum(a ** p, axis=axis)


def _pnorm_p_grad(x: np.ndarray, p: int) -> np.ndarray:
    return p * np.sign(x) * np.abs(x) ** (p - 1)


def reg_n4(batch: np.ndarray, params: ModelParams, p: int = 4) -> float:
    """Batch mean of ||h||_p^p + ||r2||_p^p + ||[r|tau]||_p^p + ||t||_p^p."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 4)
    if len(batch) == 0:
        raise ValueError("empty batch")
    h, r, t, tau = batch.T
    per_quad = (_pnorm_p(params.entity[h], p, axis=(1, 2))
                + _pnorm_p(params.static[r], p, axis=(1, 2))
                + _pnorm_p(params.relation[r], p, axis=(1, 2))
                + _pnorm_p(params.time[tau], p, axis=(1, 2))
                + _pnorm_p(params.entity[t], p, axis=(1, 2)))
    return float(np.mean(per_quad))


def reg_temporal(time_table: np.ndarray, p: int = 4, chain: int | None = None) -> float:
    """Mean ||tau_{i+1} - tau_i||_p^p over the first ``chain`` timestamps."""
    steps = time_table[: len(time_table) if chain is None else chain]
    if len(steps) < 2:
        return 0.0
    return float(_pnorm_p(np.diff(steps, axis=0), p) / (len(steps) - 1))


def _reg_temporal_grad(time_table: np.ndarray, p: int, chain: int) -> np.ndarray:
    grad = np.zeros_like(time_table)
    if chain < 2:
        return grad
    d = _pnorm_p_grad(np.diff(time_table[:chain], axis=0), p) / (chain - 1)
    grad[1:chain] += d
    grad[: chain - 1] -= d
    return grad


def _loss(batch: np.ndarray, params: ModelParams, model_config: ModelConfig,
          config: TrainConfig, with_grad: bool):
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 4)
    if len(batch) == 0:
        raise ValueError("empty batch")
    B = len(batch)
    p = config.reg_p
    fq = forward_queries(params, batch)
    ent = params.entity.reshape(len(params.entity), -1)
    scores = fq.query.reshape(B, -1) @ ent.T
    if not np.all(np.isfinite(scores)):
        raise TrainingError("non-finite scores (training diverged)")
    rows = np.arange(B)
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    z = e.sum(axis=1, keepdims=True)
    nll = float(np.mean(m[:, 0] + np.log(z[:, 0]) - scores[rows, batch[:, 2]]))

    r_n = reg_n4(batch, params, p)
    r_t = reg_temporal(params.time, p, model_config.time_chain)
    total = nll + config.lambda1 * r_n + config.lambda2 * r_t
    breakdown = LossBreakdown(nll, r_n, r_t, total)
    if not with_grad:
        return breakdown, None

    # softmax cross-entropy
    d_scores = e / z
    d_scores[rows, batch[:, 2]] -= 1.0
    d_scores /= B
    g_entity = (d_scores.T @ fq.query.reshape(B, -1)).reshape(params.entity.shape)
    d_query = (d_scores @ ent).reshape(fq.query.shape)
    d_static, d_inner = apply_rotor_vjp(fq.static, fq.inner, d_query)
    d_rotor, d_head = apply_rotor_vjp(fq.rotor, fq.head, d_inner)

    h, r, t, tau = batch.T
    w = config.lambda1 / B
    if w:
        d_head = d_head + w * _pnorm_p_grad(fq.head, p)
        d_static = d_static + w * _pnorm_p_grad(fq.static, p)
        d_rotor = d_rotor + w * _pnorm_p_grad(fq.rotor, p)
        np.add.at(g_entity, t, w * _pnorm_p_grad(params.entity[t], p))
    np.add.at(g_entity, h, d_head)

    n_r = params.relation.shape[1]
    g_relation = np.zeros_like(params.relation)
    np.add.at(g_relation, r, d_rotor[:, :n_r])
    g_static = np.zeros_like(params.static)
    np.add.at(g_static, r, d_static)
    g_time = np.zeros_like(params.time)
    np.add.at(g_time, tau, d_rotor[:, n_r:])
    if config.lambda2:
        g_time += config.lambda2 * _reg_temporal_grad(params.time, p, model_config.time_chain)

    grads = {"entity": g_entity, "relation": g_relation, "time": g_time, "static": g_static}
    return breakdown, grads


def batch_loss(batch, params: ModelParams, model_config: ModelConfig,
               config: TrainConfig) -> LossBreakdown:
    return _loss(batch, params, model_config, config, with_grad=False)[0]


def loss_and_grad(batch, params: ModelParams, model_config: ModelConfig,
                  config: TrainConfig) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    return _loss(batch, params, model_config, config, with_grad=True)


class AdaGrad:
    """x <- x - lr * g / sqrt(G + eps) with G the running sum of g**2."""

    def __init__(self, params: ModelParams, lr: float = 0.1, eps: float = 1e-10):
        self.lr = lr
        self.eps = eps
        self.accum = {name: np.zeros_like(t) for name, t in params.tables().items()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {name} table")
        for name, g in grads.items():
            acc = self.accum[name]
            acc += g * g
            table = getattr(params, name)
            table -= self.lr * g / np.sqrt(acc + self.eps)


def grad_step(batch, params: ModelParams, optimizer: AdaGrad, model_config: ModelConfig,
              config: TrainConfig) -> LossBreakdown:
    """One AdaGrad update in place; returns the loss before the update."""
    breakdown, grads = loss_and_grad(batch, params, model_config, config)
    optimizer.step(params, grads)
    if config.debug and not params.all_finite():
        bad = [n for n, t in params.tables().items() if not np.isfinite(t).all()]
        raise TrainingError(f"non-finite parameters after step in {', '.join(bad)}")
    return breakdown


@dataclass
class FitResult:
    params: ModelParams
    best_params: ModelParams
    best_valid_mrr: float | None
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def fit(train: np.ndarray, model_config: ModelConfig, config: TrainConfig,
        valid: np.ndarray | None = None, filter_index: FilterIndex | None = None,
        callbacks: Sequence[Callable[[dict], None]] = (),
        params: ModelParams | None = None) -> FitResult:
    """Train for ``config.epochs`` epochs over shuffled mini-batches of ``train``.

    ``train`` holds forward and reciprocal quads. When ``valid`` (forward quads)
    and ``filter_index`` are given, filtered validation MRR is computed every
    ``valid_every`` epochs, the best parameters are kept, and training stops
    after ``patience`` checks without improvement. Each epoch record is passed
    to every callback.
    """
    train = np.asarray(train, dtype=np.int64).reshape(-1, 4)
    if len(train) == 0:
        raise ValueError("empty training set")
    params = init_model(model_config) if params is None else params
    params.check_shapes(model_config)
    optimizer = AdaGrad(params, config.learning_rate, config.adagrad_eps)
    rng = np.random.default_rng(config.seed)

    best = params.copy()
    best_mrr: float | None = None
    best_epoch = 0
    stale = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        sums = np.zeros(4)
        for start in range(0, len(train), config.batch_size):
            batch = train[order[start:start + config.batch_size]]
            try:
                b = grad_step(batch, params, optimizer, model_config, config)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            sums += len(batch) * np.array([b.nll, b.reg_n4, b.reg_temporal, b.total])
        nll, rn, rt, total = (sums / len(train)).tolist()
        record = {"epoch": epoch, "nll": nll, "reg_n4": rn, "reg_temporal": rt, "total": total}
        if not math.isfinite(total):
            raise TrainingError(f"epoch {epoch}: non-finite loss")

        if valid is not None and filter_index is not None and epoch % config.valid_every == 0:
            mrr = evaluate(valid, params, filter_index).mrr
            record["valid_mrr"] = mrr
            if best_mrr is None or mrr > best_mrr:
                best_mrr, best_epoch, stale = mrr, epoch, 0
                best = params.copy()
            else:
                stale += 1
        log.info("epoch %d %s", epoch, record)
        history.append(record)
        for cb in callbacks:
            cb(record)
        if stale >= config.patience:
            log.info("stopping after %d checks without improvement", stale)
            break

    if best_mrr is None:
        best = params.copy()
        best_epoch = len(history)
    return FitResult(params, best, best_mrr, best_epoch, history)
