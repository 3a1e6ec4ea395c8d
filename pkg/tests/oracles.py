"""Independent reference computations used by the tests.

Nothing here imports rldnet internals: every oracle is a direct loop,
enumeration or extended-precision evaluation.
"""

from __future__ import annotations

import mpmath
import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    """Direct sliding-window cross-correlation; x (N,C,H,W), w (O,C,k,k)."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc + (0.0 if b is None else b[oi])
    return out


def cross_entropy_mp(logits, label, dps=50):
    """-log softmax(logits)[label] evaluated with mpmath at ``dps`` digits."""
    with mpmath.workdps(dps):
        z = [mpmath.mpf(float(v)) for v in logits]
        lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in z))
        return float(lse - z[label])


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64, modified in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b, floor: float = 1e-7) -> float:
    """``|a - b| / (|a| + |b|)``; the floor keeps identically-zero gradients (e.g. a bias
    feeding batch norm) from turning finite-difference noise into a relative error of 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def pairwise_dots(X):
    """D[i, j] = <column i, column j> by explicit loops."""
    h = X.shape[1]
    D = np.zeros((h, h))
    for i in range(h):
        for j in range(h):
            D[i, j] = sum(X[c, i] * X[c, j] for c in range(X.shape[0]))
    return D


def brute_force_cmc_map(dist, q_pids, g_pids, q_cams, g_cams, max_rank, junk=(0,)):
    """Re-implementation by exhaustive counting, no sorting.

    The rank of gallery item j for query i is the number of valid items that
    beat it (strictly smaller distance, or equal distance and lower index) plus one.
    """
    nq, ng = dist.shape
    cmc = np.zeros(max_rank)
    aps = []
    for i in range(nq):
        valid = [j for j in range(ng)
                 if not (g_pids[j] == q_pids[i] and g_cams[j] == q_cams[i]) and g_pids[j] not in junk]
        positives = [j for j in valid if g_pids[j] == q_pids[i]]
        if not positives:
            continue

        def rank(j):
            return 1 + sum(1 for t in valid if dist[i, t] < dist[i, j] or (dist[i, t] == dist[i, j] and t < j))

        ranks = sorted(rank(j) for j in positives)
        first = ranks[0]
        for r in range(1, max_rank + 1):
            if first <= r:
                cmc[r - 1] += 1
        aps.append(sum((m + 1) / rk for m, rk in enumerate(ranks)) / len(ranks))
    n = len(aps)
    return cmc / max(n, 1), (sum(aps) / n if n else 0.0), n
