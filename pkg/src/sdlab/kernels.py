"""Dense float64 numeric primitives shared by the target model, draft model and trainer.

Everything here is a pure function over immutable inputs.  All arrays are
float64; outputs are freshly allocated.  Reductions go through numpy on the
same shapes for every caller, so repeated runs are bit-identical.
"""

from __future__ import annotations

import numpy as np

LOG_CLAMP = 1e-12
PROB_SUM_TOL = 1e-9


def as_f64(x) -> np.ndarray:
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "value") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite {what}")


def check_prob_vec(p: np.ndarray, what: str = "probability vector") -> None:
    """Validate a probability vector: finite, nonnegative, sums to 1 within tolerance."""
    p = as_f64(p)
    check_finite(p, what)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{what} must be a non-empty vector")
    if np.any(p < 0.0):
        raise ValueError(f"{what} has negative entries")
    s = float(np.sum(p))
    if abs(s - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"{what} sums to {s!r}, expected 1 within {PROB_SUM_TOL}")


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax over a vector of logits.

    Max-subtracted for stability; argmax (first-index tie break) is preserved
    for every temperature > 0.
    """
    z = as_f64(logits)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logit")
    if not temperature > 0.0:
        raise ValueError("temperature must be > 0")
    z = z / temperature
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def attn_row(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention for one query against gathered keys/values.

    Shared by cached sequential decoding and batched tree decoding so the two
    paths produce bit-identical rows for identical contexts.
    """
    scores = keys @ q / np.sqrt(float(keys.shape[1]))
    w = softmax(scores)
    return w @ values


def masked_attention(q, k, v, mask) -> np.ndarray:
    """Row-wise masked attention: row i attends only to positions j with mask[i][j].

    mask must allow the diagonal; a row with no allowed positions is an error.
    """
    q = as_f64(q)
    k = as_f64(k)
    v = as_f64(v)
    m = np.asarray(mask, dtype=bool)
    n = q.shape[0]
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be matrices")
    if not (k.shape[0] == n and v.shape[0] == n and m.shape == (n, n)):
        raise ValueError("dimension mismatch between q, k, v and mask")
    if q.shape[1] != k.shape[1]:
        raise ValueError("q and k width mismatch")
    if not np.all(np.diagonal(m)):
        raise ValueError("mask must allow self-attention on the diagonal")
    out = np.empty((n, v.shape[1]), dtype=np.float64)
    for i in range(n):
        idx = np.flatnonzero(m[i])
        if idx.size == 0:
            raise ValueError(f"row {i} has no allowed positions")
        out[i] = attn_row(q[i], k[idx], v[idx])
    return out


def smooth_l1(pred, target, beta: float = 1.0) -> float:
    """Mean-reduced smooth L1: quadratic inside |diff| < beta, linear outside."""
    p = as_f64(pred)
    t = as_f64(target)
    if p.shape != t.shape:
        raise ValueError("length mismatch")
    if not beta > 0.0:
        raise ValueError("beta must be > 0")
    d = np.abs(p - t)
    per = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return float(np.mean(per))


def smooth_l1_grad(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """d smooth_l1 / d pred, same mean reduction as smooth_l1."""
    d = pred - target
    g = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return g / d.size


def cross_entropy(p_target, q_pred) -> float:
    """Cross entropy -sum(p * log q) with q clamped below at LOG_CLAMP."""
    p = as_f64(p_target)
    q = as_f64(q_pred)
    if p.shape != q.shape:
        raise ValueError("length mismatch")
    return float(-np.sum(p * np.log(np.maximum(q, LOG_CLAMP))))


def sinusoid_position(pos: int, dim: int) -> np.ndarray:
    """Classic fixed sinusoidal positional encoding for one position."""
    enc = np.empty(dim, dtype=np.float64)
    half = dim // 2
    i = np.arange(half, dtype=np.float64)
    freq = np.exp(-np.log(10000.0) * (2.0 * i / dim))
    enc[0::2] = np.sin(pos * freq)
    enc[1::2] = np.cos(pos * freq)
    if dim % 2 == 1:
        enc[-1] = np.sin(pos * np.exp(-np.log(10000.0)))
    return enc


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def inverse_cdf_sample(probs: np.ndarray, u: float) -> int:
    """Draw an index from a probability vector by inverse CDF in index order."""
    c = 0.0
    last = probs.shape[0] - 1
    for i in range(probs.shape[0]):
        c += float(probs[i])
        if u < c:
            return i
    return last
