"""Numeric inner loops with two interchangeable backends.

``numba_backend`` holds ``@njit`` loop kernels, ``numpy_backend`` holds
vectorized numpy equivalents. The module-level names dispatch to numba
unless it is missing or ``GRAPHMEM_DISABLE_NUMBA`` is set to a truthy value.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

ENV_FLAG = "GRAPHMEM_DISABLE_NUMBA"

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_disabled() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


# ---------------------------------------------------------------------------
# loop kernels (compiled with numba when available)
# ---------------------------------------------------------------------------


def _scores_loop(U, W, v):
    n, d = U.shape
    w = np.zeros(d)
    for a in range(d):
        acc = 0.0
        for b in range(d):
            acc += W[b, a] * v[b]
        w[a] = acc
    s = np.empty(n)
    for i in range(n):
        acc = 0.0
        for a in range(d):
            acc += U[i, a] * w[a]
        s[i] = acc
    return s


def _topk_loop(s, k):
    order = np.argsort(-s, kind="mergesort")
    return order[: min(k, s.shape[0])].astype(np.int64)


def _softmax_loop(s, tau):
    n = s.shape[0]
    out = np.empty(n)
    if n == 0:
        return out
    m = s[0]
    for i in range(1, n):
        if s[i] > m:
            m = s[i]
    z = 0.0
    for i in range(n):
        out[i] = np.exp((s[i] - m) / tau)
        z += out[i]
    for i in range(n):
        out[i] /= z
    return out


def _grads_loop(F, offsets, G, gold, A, W, Q, tau, eps):
    m = G.shape[0]
    d = A.shape[0]
    losses = np.zeros(m)
    gA = np.zeros((d, d))
    gW = np.zeros((d, d))
    gQ = np.zeros((d, d))
    for inst in range(m):
        lo = offsets[inst]
        hi = offsets[inst + 1]
        n = hi - lo
        if n == 0:
            continue
        g = G[inst]
        v = np.zeros(d)
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += Q[a, b] * g[b]
            v[a] = acc
        w = np.zeros(d)
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += W[b, a] * v[b]
            w[a] = acc
        # w^T A f_j == (A^T w) . f_j
        atw = np.zeros(d)
        for b in range(d):
            acc = 0.0
            for a in range(d):
                acc += A[a, b] * w[a]
            atw[b] = acc
        s = np.empty(n)
        smax = -np.inf
        for j in range(n):
            acc = 0.0
            for b in range(d):
                acc += F[lo + j, b] * atw[b]
            s[j] = acc
            if acc > smax:
                smax = acc
        alpha = np.empty(n)
        z = 0.0
        for j in range(n):
            alpha[j] = np.exp((s[j] - smax) / tau)
            z += alpha[j]
        n_groups = 0
        for j in range(n):
            alpha[j] /= z
            if gold[lo + j] > n_groups:
                n_groups = gold[lo + j]
        mass = np.zeros(n_groups + 1)
        members = np.zeros(n_groups + 1, dtype=np.int64)
        for j in range(n):
            if gold[lo + j] > 0:
                mass[gold[lo + j]] += alpha[j]
                members[gold[lo + j]] += 1
        # sum over groups of P_h / (P_h + eps), shared by every row's delta
        shared = 0.0
        for h in range(1, n_groups + 1):
            if members[h] == 0:
                continue
            losses[inst] -= np.log(mass[h] + eps)
            shared += mass[h] / (mass[h] + eps)
        phi = np.zeros(d)
        for j in range(n):
            own = 0.0
            if gold[lo + j] > 0:
                own = 1.0 / (mass[gold[lo + j]] + eps)
            delta = alpha[j] * (shared - own) / tau
            for b in range(d):
                phi[b] += delta * F[lo + j, b]
        ubar = np.zeros(d)
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += A[a, b] * phi[b]
            ubar[a] = acc
        dv = np.zeros(d)
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += W[a, b] * ubar[b]
            dv[a] = acc
        for a in range(d):
            for b in range(d):
                gW[a, b] += v[a] * ubar[b]
                gQ[a, b] += dv[a] * g[b]
                gA[a, b] += w[a] * phi[b]
    return losses, gA, gW, gQ


def _lcs_loop(a, b):
    n = a.shape[0]
    m = b.shape[0]
    if n == 0 or m == 0:
        return 0
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            elif prev[j] >= cur[j - 1]:
                cur[j] = prev[j]
            else:
                cur[j] = cur[j - 1]
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


# ---------------------------------------------------------------------------
# vectorized numpy equivalents
# ---------------------------------------------------------------------------


def _scores_np(U, W, v):
    return U @ (W.T @ v)


def _topk_np(s, k):
    return np.argsort(-s, kind="stable")[: min(k, s.shape[0])].astype(np.int64)


def _softmax_np(s, tau):
    if s.shape[0] == 0:
        return np.empty(0)
    e = np.exp((s - s.max()) / tau)
    return e / e.sum()


def _grads_np(F, offsets, G, gold, A, W, Q, tau, eps):
    m = G.shape[0]
    d = A.shape[0]
    losses = np.zeros(m)
    gA = np.zeros((d, d))
    gW = np.zeros((d, d))
    gQ = np.zeros((d, d))
    for inst in range(m):
        lo, hi = offsets[inst], offsets[inst + 1]
        if hi == lo:
            continue
        Fi = F[lo:hi]
        labels = gold[lo:hi].astype(np.int64)
        v = Q @ G[inst]
        w = W.T @ v
        s = Fi @ (A.T @ w)
        alpha = _softmax_np(s, tau)
        mass = np.bincount(labels, weights=alpha, minlength=labels.max() + 1)
        mass[0] = 0.0
        present = np.unique(labels[labels > 0])
        losses[inst] = -np.log(mass[present] + eps).sum()
        shared = (mass[present] / (mass[present] + eps)).sum()
        own = np.where(labels > 0, 1.0 / (mass[labels] + eps), 0.0)
        delta = alpha * (shared - own) / tau
        phi = Fi.T @ delta
        ubar = A @ phi
        gW += np.outer(v, ubar)
        gQ += np.outer(W @ ubar, G[inst])
        gA += np.outer(w, phi)
    return losses, gA, gW, gQ


def _lcs_np(a, b):
    if a.shape[0] == 0 or b.shape[0] == 0:
        return 0
    prev = np.zeros(b.shape[0] + 1, dtype=np.int64)
    for x in a:
        hit = np.zeros_like(prev)
        hit[1:] = np.where(b == x, prev[:-1] + 1, 0)
        prev = np.maximum.accumulate(np.maximum(prev, hit))
    return int(prev[-1])


numpy_backend = SimpleNamespace(
    name="numpy",
    scores=_scores_np,
    topk=_topk_np,
    softmax=_softmax_np,
    surrogate_grads=_grads_np,
    lcs=_lcs_np,
)

if numba is not None:
    _jit = numba.njit(cache=True)
    numba_backend = SimpleNamespace(
        name="numba",
        scores=_jit(_scores_loop),
        topk=_jit(_topk_loop),
        softmax=_jit(_softmax_loop),
        surrogate_grads=_jit(_grads_loop),
        lcs=_jit(_lcs_loop),
    )
else:  # pragma: no cover
    numba_backend = None

active = numpy_backend if numba_backend is None or _numba_disabled() else numba_backend
BACKEND = active.name


def bilinear_scores(U: np.ndarray, W: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``s_i = v^T W u_i`` for every row of ``U``."""
    return active.scores(np.ascontiguousarray(U, dtype=np.float64), W, v)


def topk_indices(s: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, ties broken by the smaller index first."""
    return active.topk(np.asarray(s, dtype=np.float64), int(k))


def softmax(s: np.ndarray, tau: float) -> np.ndarray:
    return active.softmax(np.asarray(s, dtype=np.float64), float(tau))


def surrogate_grads(F, offsets, G, gold, A, W, Q, tau, eps):
    """Per-instance losses and summed gradients w.r.t. (A, W, Q).

    ``gold`` labels each stacked row with its gold group (0 = not gold). The
    loss of an instance is ``sum_h -log(mass of group h + eps)``; one group
    gives the plain pooled gold-mass loss.
    """
    return active.surrogate_grads(
        np.ascontiguousarray(F, dtype=np.float64),
        np.asarray(offsets, dtype=np.int64),
        np.ascontiguousarray(G, dtype=np.float64),
        np.asarray(gold, dtype=np.int64),
        A,
        W,
        Q,
        float(tau),
        float(eps),
    )


def lcs_length(a: np.ndarray, b: np.ndarray) -> int:
    return int(active.lcs(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))
