"""Hot loops, each with a numba kernel and a vectorized numpy twin.

The backend is fixed at import time by ``FSMIRL_BACKEND`` (``numba`` or
``numpy``; default ``numba`` when it imports). Both variants stay importable
under ``*_nb`` / ``*_np`` names so tests and the benchmark can compare them.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

BACKEND = os.environ.get("FSMIRL_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"FSMIRL_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")
if numba is None:
    BACKEND = "numpy"
USE_NUMBA = BACKEND == "numba"


def njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def set_threads(n: int) -> None:
    if numba is not None and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# weighted neighbour draws
#
# Row r draws ``s`` neighbours of ``nodes[r]`` using ``uniforms[r]``. Without
# replacement (deg >= s) each pick zeroes its weight; if positive mass runs out
# the remaining picks fall back to with-replacement over the original positive
# weights. A neighbourhood with no positive weight is drawn uniformly.
# Isolated nodes yield -1. Both variants use the same sequential
# cumulative sums, so they agree bitwise.

@njit
def draw_neighbors_nb(offsets, targets, weights, nodes, uniforms):
    m, s = uniforms.shape
    out = np.full((m, s), -1, dtype=np.int64)
    for r in range(m):
        v = nodes[r]
        lo = offsets[v]
        deg = offsets[v + 1] - lo
        if deg == 0:
            continue
        base = weights[lo:lo + deg].copy()
        mass = 0.0
        for k in range(deg):
            mass += base[k]
        if mass <= 0.0:
            base[:] = 1.0
        w = base.copy()
        replace = deg < s
        for t in range(s):
            total = 0.0
            for k in range(deg):
                total += w[k]
            if total <= 0.0:
                for k in range(deg):
                    w[k] = base[k]
                replace = True
                total = 0.0
                for k in range(deg):
                    total += w[k]
            target = uniforms[r, t] * total
            pick = -1
            cum = 0.0
            for k in range(deg):
                cum += w[k]
                if cum > target:
                    pick = k
                    break
            if pick < 0:
                for k in range(deg - 1, -1, -1):
                    if w[k] > 0.0:
                        pick = k
                        break
            out[r, t] = targets[lo + pick]
            if not replace:
                w[pick] = 0.0
    return out


def draw_neighbors_np(offsets, targets, weights, nodes, uniforms):
    m, s = uniforms.shape
    out = np.full((m, s), -1, dtype=np.int64)
    if m == 0:
        return out
    deg = offsets[nodes + 1] - offsets[nodes]
    width = int(deg.max()) if deg.size else 0
    if width == 0:
        return out
    cols = np.arange(width)
    valid = cols[None, :] < deg[:, None]
    flat = np.where(valid, offsets[nodes][:, None] + cols[None, :], 0)
    base = np.where(valid, weights[flat], 0.0)
    base[base.sum(axis=1) <= 0.0] = 1.0
    base[~valid] = 0.0
    w = base.copy()
    replace = deg < s
    live = deg > 0
    rows = np.arange(m)
    for t in range(s):
        cum = np.cumsum(w, axis=1)
        total = cum[:, -1]
        dry = live & (total <= 0.0)
        if dry.any():
            w[dry] = base[dry]
            replace = replace | dry
            cum = np.cumsum(w, axis=1)
            total = cum[:, -1]
        target = uniforms[:, t] * total
        above = cum > target[:, None]
        pick = np.where(above.any(axis=1), above.argmax(axis=1),
                        width - 1 - (w[:, ::-1] > 0.0).argmax(axis=1))
        out[live, t] = targets[flat[rows, pick]][live]
        drop = live & ~replace
        w[rows[drop], pick[drop]] = 0.0
    return out


@njit
def _select(a, k):
    # in-place Hoare selection with a median-of-three pivot; returns the k-th smallest
    lo, hi = 0, a.shape[0] - 1
    while lo < hi:
        x, y, z = a[lo], a[(lo + hi) // 2], a[hi]
        if x > y:
            x, y = y, x
        if y > z:
            y = z
        piv = max(x, y)
        i, j = lo, hi
        while i <= j:
            while a[i] < piv:
                i += 1
            while piv < a[j]:
                j -= 1
            if i <= j:
                a[i], a[j] = a[j], a[i]
                i += 1
                j -= 1
        if j < k:
            lo = i
        if k < i:
            hi = j
    return a[k]


@njit
def _find_pair(z, val):
    n = z.shape[0]
    for u in range(n):
        for v in range(u + 1, n):
            if abs(z[u] - z[v]) == val:
                return u, v
    return -1, -1


@njit
def pair_median_nb(z):
    n = z.shape[0]
    m = n * (n - 1) // 2
    buf = np.empty(m)
    t = 0
    for u in range(n):
        zu = z[u]
        for v in range(u + 1, n):
            buf[t] = abs(zu - z[v])
            t += 1
    hi = _select(buf, m // 2)
    if m % 2:
        lo = hi
    else:
        # everything left of m // 2 is now <= hi
        lo = buf[0]
        for i in range(1, m // 2):
            if buf[i] > lo:
                lo = buf[i]
    out = np.empty((2, 2), dtype=np.int64)
    out[0, 0], out[0, 1] = _find_pair(z, lo)
    out[1, 0], out[1, 1] = _find_pair(z, hi)
    return lo, hi, out


def pair_median_np(z):
    """Lower and upper median of |z_u - z_v| over u < v, with a pair attaining each."""
    n = z.shape[0]
    iu, iv = np.triu_indices(n, k=1)
    dist = np.abs(z[iu] - z[iv])
    m = dist.size
    kth = [m // 2] if m % 2 else [m // 2 - 1, m // 2]
    idx = np.argpartition(dist, kth)[kth]
    lo_i, hi_i = idx[0], idx[-1]
    out = np.array([[iu[lo_i], iv[lo_i]], [iu[hi_i], iv[hi_i]]], dtype=np.int64)
    return float(dist[lo_i]), float(dist[hi_i]), out


# ---------------------------------------------------------------------------
# gaussian-kernel HSIC over column pairs
#
# For columns a, b of Z with bandwidths bw, value = Tr(K J L J) / (n-1)^2 where
# K_uv = exp(-(Z[u,a]-Z[v,a])^2 / (2 bw[a]^2)). Expanded form used here:
#   Tr(KJLJ) = sum(K*L) - 2/n r_K . r_L + s_K s_L / n^2
# with r the row sums and s the grand sums.

@njit
def hsic_pairs_nb(Z, bw, pairs):
    n = Z.shape[0]
    out = np.empty(pairs.shape[0])
    rk = np.empty(n)
    rl = np.empty(n)
    for p in range(pairs.shape[0]):
        a = pairs[p, 0]
        b = pairs[p, 1]
        ga = 1.0 / (2.0 * bw[a] * bw[a])
        gb = 1.0 / (2.0 * bw[b] * bw[b])
        rk[:] = 0.0
        rl[:] = 0.0
        kl = 0.0
        for u in range(n):
            rk[u] += 1.0
            rl[u] += 1.0
            kl += 1.0
            for v in range(u + 1, n):
                da = Z[u, a] - Z[v, a]
                db = Z[u, b] - Z[v, b]
                k = np.exp(-ga * da * da)
                l = np.exp(-gb * db * db)
                rk[u] += k
                rk[v] += k
                rl[u] += l
                rl[v] += l
                kl += 2.0 * k * l
        sk = 0.0
        sl = 0.0
        rr = 0.0
        for u in range(n):
            sk += rk[u]
            sl += rl[u]
            rr += rk[u] * rl[u]
        out[p] = (kl - 2.0 * rr / n + sk * sl / (n * n)) / ((n - 1.0) * (n - 1.0))
    return out


def _gauss_gram_1d(z, bw):
    d = z[:, None] - z[None, :]
    return np.exp(-(d * d) / (2.0 * bw * bw))


def hsic_pairs_np(Z, bw, pairs):
    n = Z.shape[0]
    out = np.empty(len(pairs))
    cache = {}

    def gram(c):
        if c not in cache:
            cache[c] = _gauss_gram_1d(Z[:, c], bw[c])
        return cache[c]

    for p, (a, b) in enumerate(pairs):
        K, L = gram(a), gram(b)
        rk, rl = K.sum(axis=1), L.sum(axis=1)
        tr = (K * L).sum() - 2.0 * (rk @ rl) / n + rk.sum() * rl.sum() / (n * n)
        out[p] = tr / ((n - 1.0) ** 2)
    return out


# Analytic gradient of sum_p value_p w.r.t. Z (holding bw fixed) and w.r.t. bw.
# dT/dK_uv = L_uv - (r_L[u] + r_L[v])/n + s_L/n^2 = (JLJ)_uv, and
# dK_uv/dZ[u,a] = -K_uv (Z[u,a]-Z[v,a]) / bw^2,  dK_uv/dbw = K_uv d^2 / bw^3.

@njit
def hsic_pairs_grad_nb(Z, bw, pairs):
    n, d = Z.shape
    gZ = np.zeros((n, d))
    gbw = np.zeros(d)
    vals = np.empty(pairs.shape[0])
    rk = np.empty(n)
    rl = np.empty(n)
    # upper-triangle kernel values from the first pass, reused in the second
    kbuf = np.empty(n * (n - 1) // 2)
    lbuf = np.empty(n * (n - 1) // 2)
    scale = 1.0 / ((n - 1.0) * (n - 1.0))
    for p in range(pairs.shape[0]):
        a = pairs[p, 0]
        b = pairs[p, 1]
        ga = 1.0 / (2.0 * bw[a] * bw[a])
        gb = 1.0 / (2.0 * bw[b] * bw[b])
        rk[:] = 0.0
        rl[:] = 0.0
        kl = 0.0
        t = 0
        for u in range(n):
            rk[u] += 1.0
            rl[u] += 1.0
            kl += 1.0
            for v in range(u + 1, n):
                da = Z[u, a] - Z[v, a]
                db = Z[u, b] - Z[v, b]
                k = np.exp(-ga * da * da)
                l = np.exp(-gb * db * db)
                kbuf[t] = k
                lbuf[t] = l
                t += 1
                rk[u] += k
                rk[v] += k
                rl[u] += l
                rl[v] += l
                kl += 2.0 * k * l
        sk = 0.0
        sl = 0.0
        rr = 0.0
        for u in range(n):
            sk += rk[u]
            sl += rl[u]
            rr += rk[u] * rl[u]
        vals[p] = (kl - 2.0 * rr / n + sk * sl / (n * n)) * scale
        ck = sk / (n * n)
        cl = sl / (n * n)
        ba2 = bw[a] * bw[a]
        bb2 = bw[b] * bw[b]
        t = 0
        for u in range(n):
            for v in range(u + 1, n):
                da = Z[u, a] - Z[v, a]
                db = Z[u, b] - Z[v, b]
                k = kbuf[t]
                l = lbuf[t]
                t += 1
                # off-diagonal entries appear twice in the symmetric sums
                gk = 2.0 * scale * (l - (rl[u] + rl[v]) / n + cl)
                gl = 2.0 * scale * (k - (rk[u] + rk[v]) / n + ck)
                tk = gk * k
                tl = gl * l
                gZ[u, a] -= tk * da / ba2
                gZ[v, a] += tk * da / ba2
                gZ[u, b] -= tl * db / bb2
                gZ[v, b] += tl * db / bb2
                gbw[a] += tk * da * da / (ba2 * bw[a])
                gbw[b] += tl * db * db / (bb2 * bw[b])
    return vals, gZ, gbw


def hsic_pairs_grad_np(Z, bw, pairs):
    n, d = Z.shape
    gZ = np.zeros((n, d))
    gbw = np.zeros(d)
    vals = np.empty(len(pairs))
    scale = 1.0 / ((n - 1.0) ** 2)
    cache = {}

    def parts(c):
        if c not in cache:
            z = Z[:, c]
            diff = z[:, None] - z[None, :]
            K = np.exp(-(diff * diff) / (2.0 * bw[c] * bw[c]))
            cache[c] = (diff, K, K.sum(axis=1))
        return cache[c]

    for p, (a, b) in enumerate(pairs):
        da, K, rk = parts(a)
        db, L, rl = parts(b)
        sk, sl = rk.sum(), rl.sum()
        vals[p] = ((K * L).sum() - 2.0 * (rk @ rl) / n + sk * sl / (n * n)) * scale
        GK = scale * (L - (rl[:, None] + rl[None, :]) / n + sl / (n * n))
        GL = scale * (K - (rk[:, None] + rk[None, :]) / n + sk / (n * n))
        TK = GK * K
        TL = GL * L
        # diagonal terms carry zero distance, so they drop out below
        gZ[:, a] -= 2.0 * (TK * da).sum(axis=1) / bw[a] ** 2
        gZ[:, b] -= 2.0 * (TL * db).sum(axis=1) / bw[b] ** 2
        gbw[a] += (TK * da * da).sum() / bw[a] ** 3
        gbw[b] += (TL * db * db).sum() / bw[b] ** 3
    return vals, gZ, gbw


if USE_NUMBA:
    draw_neighbors = draw_neighbors_nb
    pair_median = pair_median_nb
    hsic_pairs = hsic_pairs_nb
    hsic_pairs_grad = hsic_pairs_grad_nb
else:
    draw_neighbors = draw_neighbors_np
    pair_median = pair_median_np
    hsic_pairs = hsic_pairs_np
    hsic_pairs_grad = hsic_pairs_grad_np
