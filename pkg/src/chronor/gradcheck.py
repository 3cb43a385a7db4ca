"""Central finite-difference checking of the analytic training gradients."""
from __future__ import annotations

import numpy as np

from .params import ModelConfig, ModelParams
from .training import TrainConfig, batch_loss, loss_and_grad

# entries whose gradients are both below this are compared absolutely
ABS_FLOOR = 1e-6


def numeric_gradient(batch, params: ModelParams, model_config: ModelConfig,
                     config: TrainConfig, step: float = 1e-5) -> dict[str, np.ndarray]:
    grads = {}
    for name, table in params.tables().items():
        g = np.zeros_like(table)
        flat, gflat = table.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = batch_loss(batch, params, model_config, config).total
            flat[i] = old - step
            down = batch_loss(batch, params, model_config, config).total
            flat[i] = old
            gflat[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def relative_errors(analytic: dict[str, np.ndarray],
                    numeric: dict[str, np.ndarray]) -> dict[str, float]:
    """Largest |a - f| / max(|a|, |f|, ABS_FLOOR) per table."""
    out = {}
    for name, a in analytic.items():
        f = numeric[name]
        scale = np.maximum(np.maximum(np.abs(a), np.abs(f)), ABS_FLOOR)
        out[name] = float(np.max(np.abs(a - f) / scale)) if a.size else 0.0
    return out


def check_gradients(batch, params: ModelParams, model_config: ModelConfig,
                    config: TrainConfig, step: float = 1e-5) -> dict[str, float]:
    _, analytic = loss_and_grad(batch, params, model_config, config)
    return relative_errors(analytic, numeric_gradient(batch, params, model_config, config, step))
