"""Hot numeric kernels with numba and pure-NumPy implementations.

Each kernel family exposes three names:

* ``<name>_nb`` - loop-oriented implementation, compiled with ``numba.njit``
  when the numba backend is active (see :mod:`zrcg.backend`);
* ``<name>_np`` - vectorized NumPy fallback;
* ``<name>`` - the selected implementation.

All kernels are dtype-generic: they run in float32 for training and in
float64 for gradient checking. Scalar reductions use float64 accumulators.

Gated recurrence convention (single-layer, zero initial state)::

    z_t = sigmoid(Wz x_t + Uz h_{t-1} + bz)        update gate
    r_t = sigmoid(Wr x_t + Ur h_{t-1} + br)        reset gate
    c_t = tanh(Wh x_t + r_t * (Uh h_{t-1}) + bh)   candidate
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t

Sequences are padded to a common length; ``lengths`` marks the valid steps.
"""

import math

import numpy as np

from .backend import jit, select

# Pre-activations are clipped here before exp(); sigmoid/tanh are exactly
# saturated beyond this in float64, so clipping does not change results.
_GATE_CLIP = 60.0


def _sigmoid_np(a):
    return 1.0 / (1.0 + np.exp(-np.clip(a, -_GATE_CLIP, _GATE_CLIP)))


# ---------------------------------------------------------------------------
# Gated recurrent encoder, forward
# ---------------------------------------------------------------------------


def _gru_forward_loops(X, lengths, Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh):
    n, T, d = X.shape
    H_final = np.zeros((n, d), dtype=X.dtype)
    Z = np.zeros((n, T, d), dtype=X.dtype)
    R = np.zeros((n, T, d), dtype=X.dtype)
    C = np.zeros((n, T, d), dtype=X.dtype)
    HP = np.zeros((n, T, d), dtype=X.dtype)   # h_{t-1} per step
    UHP = np.zeros((n, T, d), dtype=X.dtype)  # Uh @ h_{t-1} per step
    h = np.zeros(d, dtype=np.float64)
    for i in range(n):
        for c in range(d):
            h[c] = 0.0
        L = lengths[i]
        for t in range(L):
            for row in range(d):
                az = float(bz[row])
                ar = float(br[row])
                ah = float(bh[row])
                uh = 0.0
                for c in range(d):
                    x = float(X[i, t, c])
                    az += float(Wz[row, c]) * x + float(Uz[row, c]) * h[c]
                    ar += float(Wr[row, c]) * x + float(Ur[row, c]) * h[c]
                    ah += float(Wh[row, c]) * x
                    uh += float(Uh[row, c]) * h[c]
                if az > _GATE_CLIP:
                    az = _GATE_CLIP
                elif az < -_GATE_CLIP:
                    az = -_GATE_CLIP
                if ar > _GATE_CLIP:
                    ar = _GATE_CLIP
                elif ar < -_GATE_CLIP:
                    ar = -_GATE_CLIP
                zv = 1.0 / (1.0 + math.exp(-az))
                rv = 1.0 / (1.0 + math.exp(-ar))
                Z[i, t, row] = zv
                R[i, t, row] = rv
                UHP[i, t, row] = uh
                HP[i, t, row] = h[row]
                C[i, t, row] = math.tanh(ah + rv * uh)
            for row in range(d):
                zv = float(Z[i, t, row])
                h[row] = (1.0 - zv) * float(HP[i, t, row]) + zv * float(C[i, t, row])
        for row in range(d):
            H_final[i, row] = h[row]
    return H_final, Z, R, C, HP, UHP


def gru_forward_np(X, lengths, Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh):
    n, T, d = X.shape
    dtype = X.dtype
    Z = np.zeros((n, T, d), dtype=dtype)
    R = np.zeros((n, T, d), dtype=dtype)
    C = np.zeros((n, T, d), dtype=dtype)
    HP = np.zeros((n, T, d), dtype=dtype)
    UHP = np.zeros((n, T, d), dtype=dtype)
    h = np.zeros((n, d), dtype=dtype)
    for t in range(T):
        active = lengths > t
        if not active.any():
            break
        x = X[:, t, :]
        uhp = h @ Uh.T
        z = _sigmoid_np(x @ Wz.T + h @ Uz.T + bz)
        r = _sigmoid_np(x @ Wr.T + h @ Ur.T + br)
        c = np.tanh(x @ Wh.T + r * uhp + bh)
        Z[active, t] = z[active]
        R[active, t] = r[active]
        C[active, t] = c[active]
        HP[active, t] = h[active]
        UHP[active, t] = uhp[active]
        h_new = (1.0 - z) * h + z * c
        h = np.where(active[:, None], h_new, h)
    return h.astype(dtype, copy=False), Z, R, C, HP, UHP


gru_forward_nb = jit(_gru_forward_loops)


# ---------------------------------------------------------------------------
# Gated recurrent encoder, backward (backprop through time)
# ---------------------------------------------------------------------------


def _gru_backward_loops(X, lengths, Z, R, C, HP, UHP,
                        Wz, Uz, Wr, Ur, Wh, Uh, dH_final):
    n, T, d = X.shape
    dX = np.zeros((n, T, d), dtype=X.dtype)
    dWz = np.zeros((d, d), dtype=np.float64)
    dUz = np.zeros((d, d), dtype=np.float64)
    dbz = np.zeros(d, dtype=np.float64)
    dWr = np.zeros((d, d), dtype=np.float64)
    dUr = np.zeros((d, d), dtype=np.float64)
    dbr = np.zeros(d, dtype=np.float64)
    dWh = np.zeros((d, d), dtype=np.float64)
    dUh = np.zeros((d, d), dtype=np.float64)
    dbh = np.zeros(d, dtype=np.float64)
    dh = np.zeros(d, dtype=np.float64)
    daz = np.zeros(d, dtype=np.float64)
    dar = np.zeros(d, dtype=np.float64)
    dah = np.zeros(d, dtype=np.float64)
    for i in range(n):
        L = lengths[i]
        for c in range(d):
            dh[c] = float(dH_final[i, c])
        for t in range(L - 1, -1, -1):
            for row in range(d):
                zv = float(Z[i, t, row])
                rv = float(R[i, t, row])
                cv = float(C[i, t, row])
                hp = float(HP[i, t, row])
                dz = dh[row] * (cv - hp)
                dc = dh[row] * zv
                dahv = dc * (1.0 - cv * cv)
                drv = dahv * float(UHP[i, t, row])
                daz[row] = dz * zv * (1.0 - zv)
                dar[row] = drv * rv * (1.0 - rv)
                dah[row] = dahv
            for row in range(d):
                hp = float(HP[i, t, row])
                xv = float(X[i, t, row])
                acc = dh[row] * (1.0 - float(Z[i, t, row]))
                for rr in range(d):
                    dWz[rr, row] += daz[rr] * xv
                    dUz[rr, row] += daz[rr] * hp
                    dWr[rr, row] += dar[rr] * xv
                    dUr[rr, row] += dar[rr] * hp
                    dWh[rr, row] += dah[rr] * xv
                    dUh[rr, row] += dah[rr] * float(R[i, t, rr]) * hp
                    acc += (float(Uz[rr, row]) * daz[rr]
                            + float(Ur[rr, row]) * dar[rr]
                            + float(Uh[rr, row]) * dah[rr] * float(R[i, t, rr]))
                dxv = 0.0
                for rr in range(d):
                    dxv += (float(Wz[rr, row]) * daz[rr]
                            + float(Wr[rr, row]) * dar[rr]
                            + float(Wh[rr, row]) * dah[rr])
                dX[i, t, row] = dxv
                dh[row] = acc  # safe: row already consumed this iteration
            for row in range(d):
                dbz[row] += daz[row]
                dbr[row] += dar[row]
                dbh[row] += dah[row]
    out = (dX,
           dWz.astype(X.dtype), dUz.astype(X.dtype), dbz.astype(X.dtype),
           dWr.astype(X.dtype), dUr.astype(X.dtype), dbr.astype(X.dtype),
           dWh.astype(X.dtype), dUh.astype(X.dtype), dbh.astype(X.dtype))
    return out


def gru_backward_np(X, lengths, Z, R, C, HP, UHP,
                    Wz, Uz, Wr, Ur, Wh, Uh, dH_final):
    n, T, d = X.shape
    dtype = X.dtype
    dX = np.zeros((n, T, d), dtype=dtype)
    dWz = np.zeros((d, d), dtype=np.float64)
    dUz = np.zeros((d, d), dtype=np.float64)
    dbz = np.zeros(d, dtype=np.float64)
    dWr = np.zeros((d, d), dtype=np.float64)
    dUr = np.zeros((d, d), dtype=np.float64)
    dbr = np.zeros(d, dtype=np.float64)
    dWh = np.zeros((d, d), dtype=np.float64)
    dUh = np.zeros((d, d), dtype=np.float64)
    dbh = np.zeros(d, dtype=np.float64)
    dh = np.zeros((n, d), dtype=np.float64)
    dHf = dH_final.astype(np.float64)
    for t in range(T - 1, -1, -1):
        starts = (lengths - 1) == t
        if starts.any():
            dh[starts] += dHf[starts]
        active = lengths > t
        if not active.any():
            continue
        idx = np.nonzero(active)[0]
        z = Z[idx, t].astype(np.float64)
        r = R[idx, t].astype(np.float64)
        c = C[idx, t].astype(np.float64)
        hp = HP[idx, t].astype(np.float64)
        uhp = UHP[idx, t].astype(np.float64)
        x = X[idx, t].astype(np.float64)
        dhi = dh[idx]
        dz = dhi * (c - hp)
        dc = dhi * z
        dah = dc * (1.0 - c * c)
        dr = dah * uhp
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dah_r = dah * r
        dWz += daz.T @ x
        dUz += daz.T @ hp
        dbz += daz.sum(axis=0)
        dWr += dar.T @ x
        dUr += dar.T @ hp
        dbr += dar.sum(axis=0)
        dWh += dah.T @ x
        dUh += dah_r.T @ hp
        dbh += dah.sum(axis=0)
        dX[idx, t] = (daz @ Wz + dar @ Wr + dah @ Wh).astype(dtype)
        dh[idx] = (dhi * (1.0 - z)
                   + daz @ Uz + dar @ Ur + dah_r @ Uh)
    return (dX,
            dWz.astype(dtype), dUz.astype(dtype), dbz.astype(dtype),
            dWr.astype(dtype), dUr.astype(dtype), dbr.astype(dtype),
            dWh.astype(dtype), dUh.astype(dtype), dbh.astype(dtype))


gru_backward_nb = jit(_gru_backward_loops)


# ---------------------------------------------------------------------------
# Row-softmax entropy over pairwise cosine similarities
# ---------------------------------------------------------------------------
#
# For rows e_1..e_n: P_ij = softmax_j(cos(e_i, e_j) / tau), optionally
# excluding j == i, and H_i = -sum_j P_ij log P_ij. Returns sum_i H_i and
# the gradient of that sum with respect to E.


def _entropy_loops(E, tau, include_self, eps):
    n, d = E.shape
    inv = np.empty(n, dtype=np.float64)
    U = np.empty((n, d), dtype=np.float64)
    for i in range(n):
        s = 0.0
        for c in range(d):
            v = float(E[i, c])
            s += v * v
        nr = math.sqrt(s)
        if nr < eps:
            nr = eps
        inv[i] = 1.0 / nr
        for c in range(d):
            U[i, c] = float(E[i, c]) * inv[i]
    cosM = U @ U.T
    H_sum = 0.0
    G = np.zeros((n, n), dtype=np.float64)  # d(H_sum)/d(cos_ij)
    row = np.empty(n, dtype=np.float64)
    for i in range(n):
        mx = -1e300
        for j in range(n):
            if not include_self and j == i:
                continue
            v = cosM[i, j] / tau
            row[j] = v
            if v > mx:
                mx = v
        ssum = 0.0
        for j in range(n):
            if not include_self and j == i:
                continue
            ev = math.exp(row[j] - mx)
            row[j] = ev
            ssum += ev
        H = 0.0
        for j in range(n):
            if not include_self and j == i:
                continue
            p = row[j] / ssum
            row[j] = p
            if p > 0.0:
                H -= p * math.log(p)
        H_sum += H
        for j in range(n):
            if not include_self and j == i:
                continue
            p = row[j]
            if p > 0.0:
                G[i, j] = -p * (math.log(p) + H) / tau
    S = G + G.T
    dE = np.zeros((n, d), dtype=E.dtype)
    for i in range(n):
        coef = 0.0
        for j in range(n):
            coef += S[i, j] * cosM[i, j]
        for c in range(d):
            acc = 0.0
            for j in range(n):
                acc += S[i, j] * U[j, c]
            dE[i, c] = inv[i] * (acc - coef * U[i, c])
    return H_sum, dE


def entropy_np(E, tau, include_self, eps):
    n, d = E.shape
    Ef = E.astype(np.float64)
    norms = np.sqrt((Ef * Ef).sum(axis=1))
    inv = 1.0 / np.maximum(norms, eps)
    U = Ef * inv[:, None]
    cosM = U @ U.T
    logits = cosM / tau
    if not include_self:
        np.fill_diagonal(logits, -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    P = ex / ex.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        logP = np.where(P > 0.0, np.log(np.maximum(P, 1e-300)), 0.0)
    H_rows = -(P * logP).sum(axis=1)
    H_sum = float(H_rows.sum())
    G = np.where(P > 0.0, -P * (logP + H_rows[:, None]) / tau, 0.0)
    S = G + G.T
    coef = (S * cosM).sum(axis=1)
    dE = inv[:, None] * (S @ U - coef[:, None] * U)
    return H_sum, dE.astype(E.dtype)


entropy_nb = jit(_entropy_loops)


# ---------------------------------------------------------------------------
# Pessimistic ranking against sampled negatives
# ---------------------------------------------------------------------------


def _rank_loops(U, items, truth_idx, neg_idx):
    n, d = U.shape
    m = neg_idx.shape[1]
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        ts = 0.0
        ti = truth_idx[i]
        for c in range(d):
            ts += float(U[i, c]) * float(items[ti, c])
        rank = 1
        for j in range(m):
            sc = 0.0
            nj = neg_idx[i, j]
            for c in range(d):
                sc += float(U[i, c]) * float(items[nj, c])
            if sc >= ts:
                rank += 1
        ranks[i] = rank
    return ranks


def rank_np(U, items, truth_idx, neg_idx):
    Uf = U.astype(np.float64)
    If = items.astype(np.float64)
    truth_scores = np.einsum("nd,nd->n", Uf, If[truth_idx])
    neg_scores = np.einsum("nd,nmd->nm", Uf, If[neg_idx])
    return 1 + (neg_scores >= truth_scores[:, None]).sum(axis=1).astype(np.int64)


rank_nb = jit(_rank_loops)


# ---------------------------------------------------------------------------
# Nearest-centroid assignment for Lloyd iterations
# ---------------------------------------------------------------------------


def _kmeans_assign_loops(X, C):
    n, d = X.shape
    k = C.shape[0]
    labels = np.empty(n, dtype=np.int64)
    sqd = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = -1
        bestv = 1e300
        for j in range(k):
            s = 0.0
            for c in range(d):
                diff = float(X[i, c]) - float(C[j, c])
                s += diff * diff
            if s < bestv:
                bestv = s
                best = j
        labels[i] = best
        sqd[i] = bestv
    return labels, sqd


def kmeans_assign_np(X, C):
    Xf = X.astype(np.float64)
    Cf = C.astype(np.float64)
    diff = Xf[:, None, :] - Cf[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    labels = d2.argmin(axis=1).astype(np.int64)
    return labels, d2[np.arange(len(labels)), labels]


kmeans_assign_nb = jit(_kmeans_assign_loops)


# ---------------------------------------------------------------------------
# Selected implementations. The recurrence defaults to the NumPy path: its
# per-timestep batched matmuls hit BLAS and beat the scalar loops at the
# latent widths this engine uses (see benchmarks/bench_kernels.py).
# ---------------------------------------------------------------------------

gru_forward = select(gru_forward_nb, gru_forward_np, default="numpy")
gru_backward = select(gru_backward_nb, gru_backward_np, default="numpy")
entropy = select(entropy_nb, entropy_np, default="numba")
rank_against = select(rank_nb, rank_np, default="numba")
kmeans_assign = select(kmeans_assign_nb, kmeans_assign_np, default="numba")
