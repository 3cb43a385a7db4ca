"""Row-wise k-dimensional rotation-and-scaling operators and the bilinear score.

A rotor row ``v`` in R^k acts on a k-vector ``x`` as ``|v| * R(x)``, where ``R``
is the rotation inside the plane spanned by ``e1`` and ``v/|v|`` that carries
``e1`` onto ``v/|v|`` and fixes the orthogonal complement. In closed form, with
``s = |v|``, ``p = v - v1*e1``, ``a = x1``::

    Q x = s*x + (a*(v1 - s) - <x,p>) e1 + a*p - <x,p>/(s + v1) * p

For k = 2 this is complex multiplication ``(v1 + i v2)(x1 + i x2)``.

All functions broadcast over leading axes; the last axis is k. Embedding
matrices are ``(..., n, k)`` arrays.
"""
from __future__ import annotations

import numpy as np

# below this fraction of |v|, v is treated as anti-parallel to e1
ANTIPARALLEL_TOL = 1e-9


def _check_k(v: np.ndarray, x: np.ndarray) -> None:
    if v.shape[-1] != x.shape[-1]:
        raise ValueError(f"rotor dimension {v.shape[-1]} does not match vector dimension {x.shape[-1]}")
    if v.shape[-1] < 2:
        raise ValueError("rotors need k >= 2")


def complex_rotor(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """k = 2 rotor as complex multiplication."""
    v1, v2 = v[..., 0], v[..., 1]
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([v1 * x1 - v2 * x2, v2 * x1 + v1 * x2], axis=-1)


def _plus_denominator(s: np.ndarray, v1: np.ndarray, p: np.ndarray) -> np.ndarray:
    """s + v1 without cancellation when v1 < 0 (uses s^2 - v1^2 = |p|^2)."""
    pp = np.sum(p * p, axis=-1, keepdims=True)
    minus = s - v1
    alt = np.divide(pp, minus, out=np.zeros_like(pp), where=minus > 0)
    return np.where(v1 >= 0, s + v1, alt)


def general_rotor(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """The e1 -> v construction for any k >= 2 (no k = 2 shortcut)."""
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_k(v, x)
    v, x = np.broadcast_arrays(v, x)
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    v1 = v[..., :1]
    a = x[..., :1]
    p = v.copy()
    p[..., 0] = 0.0
    xp = np.sum(x * p, axis=-1, keepdims=True)
    denom = _plus_denominator(s, v1, p)
    regular = denom > ANTIPARALLEL_TOL * s
    coef = np.divide(xp, denom, out=np.zeros_like(xp), where=regular)

    out = s * x + a * p - coef * p
    out[..., :1] += a * (v1 - s) - xp

    # v ~ -|v| e1: the plane is undetermined; use the half turn in the (e1, e2) plane
    flip = ~regular[..., 0] & (s[..., 0] > 0)
    if np.any(flip):
        limit = s * x
        limit[..., :2] *= -1.0
        out[flip] = limit[flip]
    return out


def apply_rotor(v, x) -> np.ndarray:
    """Apply the rotor(s) ``v`` to vector(s) ``x``."""
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_k(v, x)
    if v.shape[-1] == 2:
        return complex_rotor(v, x)
    return general_rotor(v, x)


def apply_rotor_vjp(v: np.ndarray, x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of ``apply_rotor``.

    Returns ``(dv, dx)`` where ``dv = d<g, Q_v x>/dv`` and ``dx = Q_v^T g``.
    """
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if v.shape[-1] == 2:
        v1, v2 = v[..., 0], v[..., 1]
        x1, x2 = x[..., 0], x[..., 1]
        g1, g2 = g[..., 0], g[..., 1]
        dv = np.stack([x1 * g1 + x2 * g2, x1 * g2 - x2 * g1], axis=-1)
        dx = np.stack([v1 * g1 + v2 * g2, v1 * g2 - v2 * g1], axis=-1)
        return dv, dx

    v, x, g = np.broadcast_arrays(v, x, g)
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    v1 = v[..., :1]
    a = x[..., :1]
    g1 = g[..., :1]
    p = v.copy()
    p[..., 0] = 0.0
    x_perp = x.copy()
    x_perp[..., 0] = 0.0
    g_perp = g.copy()
    g_perp[..., 0] = 0.0
    xp = np.sum(x * p, axis=-1, keepdims=True)
    gp = np.sum(g * p, axis=-1, keepdims=True)
    gx = np.sum(g * x, axis=-1, keepdims=True)
    u = np.divide(v, s, out=np.zeros_like(v), where=s > 0)
    denom = _plus_denominator(s, v1, p)
    regular = denom > ANTIPARALLEL_TOL * s
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=regular)

    e1 = np.zeros(v.shape[-1])
    e1[0] = 1.0

    dx = s * g + g1 * ((v1 - s) * e1 - p) + gp * e1 - gp * inv * p
    dv = (gx * u
          + g1 * a * (e1 - u)
          - g1 * x_perp
          + a * g_perp
          - inv * (x_perp * gp + g_perp * xp)
          + xp * gp * inv * inv * (u + e1))

    flip = ~regular[..., 0]
    if np.any(flip):
        # half-turn limit (and the zero rotor): only the scale carries a gradient
        rx = x.copy()
        rx[..., :2] *= -1.0
        rg = g.copy()
        rg[..., :2] *= -1.0
        dv[flip] = (np.sum(g * rx, axis=-1, keepdims=True) * u)[flip]
        dx[flip] = (s * rg)[flip]
    return dv, dx


def rotor_matrix(v) -> np.ndarray:
    """Dense k x k matrix of a single rotor (columns are images of the basis)."""
    v = np.asarray(v, dtype=np.float64)
    eye = np.eye(v.shape[-1])
    return apply_rotor(v[None, :], eye).T


def apply_rowwise(H, ops) -> np.ndarray:
    """Row i of the result is ``apply_rotor(ops[i], H[i])``."""
    H = np.asarray(H, dtype=np.float64)
    ops = np.asarray(ops, dtype=np.float64)
    if H.shape[-2:] != ops.shape[-2:]:
        raise ValueError(f"shape mismatch: matrix {H.shape} vs rotors {ops.shape}")
    return apply_rotor(ops, H)


def inner_product(A, B) -> float:
    """<A, B> = tr(A B^T), the sum of the entrywise product."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    return float(np.sum(A * B))


def concat_rotor(r, tau) -> np.ndarray:
    """Stack relation rows over time rows: ``[r | tau]`` along the row axis."""
    r = np.asarray(r, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if r.shape[-1] != tau.shape[-1]:
        raise ValueError(f"k mismatch: relation {r.shape} vs time {tau.shape}")
    return np.concatenate([r, tau], axis=-2)


def transform(h, r, tau, r2) -> np.ndarray:
    """``h o [r|tau] o r2``: relation/time rotor first, then the static rotor."""
    rt = concat_rotor(r, tau)
    h = np.asarray(h, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    if rt.shape[-2:] != h.shape[-2:] or r2.shape[-2:] != h.shape[-2:]:
        raise ValueError(f"shape mismatch: h {h.shape}, [r|tau] {rt.shape}, r2 {r2.shape}")
    return apply_rowwise(apply_rowwise(h, rt), r2)


def score(h, r, tau, r2, t) -> float:
    return inner_product(transform(h, r, tau, r2), t)


def score_all_tails(h, r, tau, r2, entity_table) -> np.ndarray:
    """Scores against every candidate tail; the head is transformed once."""
    q = transform(h, r, tau, r2)
    entity_table = np.asarray(entity_table, dtype=np.float64)
    if entity_table.shape[1:] != q.shape:
        raise ValueError(f"entity table {entity_table.shape} does not match head {q.shape}")
    return entity_table.reshape(len(entity_table), -1) @ q.reshape(-1)
