"""Hot numeric inner loops: numba-compiled kernels with numpy fallbacks.

Three loops dominate offline runtime (memory scoring over large stores, the
box-constrained quadratic solve, equity-curve scans), so each has a numba
``@njit`` build and a vectorized numpy build. Selection happens once at
import: set ``FINCON_NO_NUMBA=1`` to force the numpy path; it is also used
automatically when numba cannot be imported. ``benchmarks/bench_kernels.py``
times the two paths side by side.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_disabled_by_env() -> bool:
    return os.environ.get("FINCON_NO_NUMBA", "").strip().lower() in {"1", "true", "yes"}


# ---------------------------------------------------------------------------
# numpy implementations (always importable; also the fallback path)
# ---------------------------------------------------------------------------

def cosine_matrix_np(query: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """Cosine similarity between one query vector and each row of ``emb``."""
    qnorm = np.sqrt(query @ query)
    norms = np.sqrt(np.einsum("ij,ij->i", emb, emb))
    return (emb @ query) / (norms * qnorm)


def decay_importance_np(v0: np.ndarray, theta: np.ndarray, dt: np.ndarray,
                        bonus: np.ndarray) -> np.ndarray:
    """Elementwise v0 * theta**dt + bonus."""
    return v0 * np.power(theta, dt) + bonus


def box_qp_np(mu: np.ndarray, sigma: np.ndarray, lo: np.ndarray, hi: np.ndarray,
              step: float, obj_tol: float, step_tol: float, max_iter: int):
    """Projected gradient ascent for max <w,mu> - <w,sigma w> over a box.

    Starts from w = 0 (feasible for every direction box). Stops when both the
    objective change and the infinity-norm step fall under their tolerances,
    or after ``max_iter`` iterations. Returns (w, objective, iterations).
    """
    w = np.zeros_like(mu)
    obj = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        grad = mu - 2.0 * (sigma @ w)
        wn = np.clip(w + step * grad, lo, hi)
        new_obj = float(wn @ mu - wn @ (sigma @ wn))
        dw = float(np.max(np.abs(wn - w)))
        done = abs(new_obj - obj) < obj_tol and dw < step_tol
        w = wn
        obj = new_obj
        if done:
            break
    return w, obj, it


def drawdown_fraction_np(values: np.ndarray) -> float:
    """Largest peak-to-trough decline of a positive value series, as a fraction."""
    peaks = np.maximum.accumulate(values)
    return float(np.max((peaks - values) / peaks))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

NUMBA_ENABLED = False

if not _numba_disabled_by_env():
    try:
        from numba import njit

        NUMBA_ENABLED = True

        @njit(cache=True)
        def cosine_matrix_nb(query, emb):
            m, d = emb.shape
            out = np.empty(m)
            qq = 0.0
            for j in range(d):
                qq += query[j] * query[j]
            qnorm = np.sqrt(qq)
            for i in range(m):
                dot = 0.0
                nn = 0.0
                for j in range(d):
                    dot += emb[i, j] * query[j]
                    nn += emb[i, j] * emb[i, j]
                out[i] = dot / (np.sqrt(nn) * qnorm)
            return out

        @njit(cache=True)
        def decay_importance_nb(v0, theta, dt, bonus):
            n = v0.shape[0]
            out = np.empty(n)
            for i in range(n):
                out[i] = v0[i] * theta[i] ** dt[i] + bonus[i]
            return out

        @njit(cache=True)
        def box_qp_nb(mu, sigma, lo, hi, step, obj_tol, step_tol, max_iter):
            n = mu.shape[0]
            w = np.zeros(n)
            obj = 0.0
            it = 0
            for it in range(1, max_iter + 1):
                wn = np.empty(n)
                dw = 0.0
                for i in range(n):
                    g = mu[i]
                    for j in range(n):
                        g -= 2.0 * sigma[i, j] * w[j]
                    v = w[i] + step * g
                    if v < lo[i]:
                        v = lo[i]
                    elif v > hi[i]:
                        v = hi[i]
                    wn[i] = v
                    d = abs(v - w[i])
                    if d > dw:
                        dw = d
                new_obj = 0.0
                for i in range(n):
                    sw = 0.0
                    for j in range(n):
                        sw += sigma[i, j] * wn[j]
                    new_obj += wn[i] * mu[i] - wn[i] * sw
                done = abs(new_obj - obj) < obj_tol and dw < step_tol
                for i in range(n):
                    w[i] = wn[i]
                obj = new_obj
                if done:
                    break
            return w, obj, it

        @njit(cache=True)
        def drawdown_fraction_nb(values):
            peak = values[0]
            worst = 0.0
            for i in range(values.shape[0]):
                v = values[i]
                if v > peak:
                    peak = v
                dd = (peak - v) / peak
                if dd > worst:
                    worst = dd
            return worst

    except ImportError:
        NUMBA_ENABLED = False


if NUMBA_ENABLED:
    cosine_matrix = cosine_matrix_nb
    decay_importance = decay_importance_nb
    box_qp = box_qp_nb
    drawdown_fraction = drawdown_fraction_nb
else:
    cosine_matrix = cosine_matrix_np
    decay_importance = decay_importance_np
    box_qp = box_qp_np
    drawdown_fraction = drawdown_fraction_np
