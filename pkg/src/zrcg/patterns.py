"""Sequence-level pattern transfer.

Source-domain user representations are clustered with k-means (k-means++
seeding, Lloyd iterations); the centroids act as transferable behavioral
prototypes. At inference a user representation attends over the prototypes
with a softmax over raw cosine similarities (no temperature), and the
attended prototype mix is fused with the user representation through a
learned projection of the concatenation.

Pattern bank container (PTRN v1, little-endian)::

    magic    4 bytes  b"PTRN"
    version  u32      1
    k        u32      number of centroids
    d_l      u32      latent width
    payload  k*d_l*4  float32 centroids, row-major
    fprint   32 bytes fingerprint binding the bank to (corpus, checkpoint)
    crc      u32      CRC32 of every byte before this field
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .objective import EPS_COSINE

MAGIC = b"PTRN"
VERSION = 1

KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6


class BankError(Exception):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


class FingerprintMismatch(Exception):
    def __init__(self):
        super().__init__(
            "fingerprint-mismatch: pattern bank was not built from this checkpoint/corpus pair"
        )


@dataclass
class PatternBank:
    k: int
    centroids: np.ndarray           # (k, d_l) float32
    inertia: float
    fingerprint: bytes = b"\x00" * 32
    inertia_trace: list = field(default_factory=list, repr=False)

    @property
    def d_l(self):
        return self.centroids.shape[1]


def make_fingerprint(corpus_digest, checkpoint_bytes):
    """32-byte binding of a source corpus digest and checkpoint file bytes."""
    h = hashlib.sha256()
    h.update(corpus_digest.encode("ascii"))
    h.update(b"|")
    h.update(hashlib.sha256(checkpoint_bytes).digest())
    return h.digest()


def _reseed_empty(X, labels, sqd, centroids, empty_clusters):
    """Move each empty cluster's centroid to the current farthest point."""
    sqd = sqd.copy()
    for c in empty_clusters:
        j = int(np.argmax(sqd))
        centroids[c] = X[j]
        labels[j] = c
        sqd[j] = 0.0
    return labels, sqd, centroids


def extract_patterns(reprs, k, seed):
    """Cluster user representations into ``k`` prototypes.

    k-means++ seeding, Lloyd iterations until the maximum centroid shift
    falls below 1e-6 (or 300 iterations); empty clusters are reseeded to the
    farthest point. Requires at least ``k`` distinct rows.
    """
    X = np.ascontiguousarray(np.asarray(reprs, dtype=np.float64))
    if X.ndim != 2:
        raise ValueError("expected a 2-D array of user representations")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = X.shape[0]
    if n < k or np.unique(X, axis=0).shape[0] < k:
        raise ValueError(f"need at least {k} distinct representations, got {n} rows")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x7A77))))

    # k-means++ seeding
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    centroids[0] = X[int(rng.integers(0, n))]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        probs = d2 / d2.sum()
        centroids[c] = X[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((X - centroids[c]) ** 2).sum(axis=1))

    trace = []
    for _ in range(KMEANS_MAX_ITER):
        labels, sqd = kernels.kmeans_assign(X, centroids)
        labels = np.asarray(labels)
        sqd = np.asarray(sqd)
        counts = np.bincount(labels, minlength=k)
        empty = np.nonzero(counts == 0)[0]
        if len(empty):
            labels, sqd, centroids = _reseed_empty(X, labels, sqd, centroids, empty)
            counts = np.bincount(labels, minlength=k)
        trace.append(float(sqd.sum()))
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        new_centroids = sums / counts[:, None]
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < KMEANS_TOL:
            break
    labels, sqd = kernels.kmeans_assign(X, centroids)
    inertia = float(np.asarray(sqd).sum())
    trace.append(inertia)
    return PatternBank(
        k=k,
        centroids=centroids.astype(np.float32),
        inertia=inertia,
        inertia_trace=trace,
    )


def attend_batch(Y, centroids, with_cache=False):
    """Softmax attention over prototype cosine similarities.

    Returns ``(A, S_tilde)`` where ``A`` rows are probability vectors and
    ``S_tilde = A @ centroids``. With ``with_cache`` a tuple of intermediates
    for the backward pass is appended.
    """
    Yf = np.asarray(Y, dtype=np.float64)
    Cf = np.asarray(centroids, dtype=np.float64)
    y_norms = np.sqrt((Yf * Yf).sum(axis=1))
    inv_y = 1.0 / np.maximum(y_norms, EPS_COSINE)
    c_norms = np.sqrt((Cf * Cf).sum(axis=1))
    inv_c = 1.0 / np.maximum(c_norms, EPS_COSINE)
    U = Yf * inv_y[:, None]
    V = Cf * inv_c[:, None]
    cos = U @ V.T                       # (n, k)
    mx = cos.max(axis=1, keepdims=True)
    ex = np.exp(cos - mx)
    A = ex / ex.sum(axis=1, keepdims=True)
    S_tilde = A @ Cf
    if with_cache:
        return A, S_tilde, (cos, U, V, inv_y, Cf)
    return A, S_tilde


def attend_backward(dA_out, dS_tilde, A, cache):
    """Gradient of (A, S_tilde) w.r.t. the user representations Y.

    Centroids are treated as constants (the bank is frozen between
    re-extractions). ``dA_out`` may be None when only S_tilde is consumed.
    """
    cos, U, V, inv_y, Cf = cache
    dA = np.asarray(dS_tilde, dtype=np.float64) @ Cf.T
    if dA_out is not None:
        dA = dA + np.asarray(dA_out, dtype=np.float64)
    inner = (dA * A).sum(axis=1, keepdims=True)
    dcos = A * (dA - inner)
    dY = inv_y[:, None] * (dcos @ V - (dcos * cos).sum(axis=1, keepdims=True) * U)
    return dY


def attend(y, bank):
    """Single-user attention: returns (weights, attended pattern)."""
    A, S = attend_batch(np.asarray(y)[None, :], bank.centroids)
    return A[0], S[0]


def fuse(y, s_tilde, W_f):
    """Project the concatenation [y ; s_tilde] back to the latent space."""
    y = np.asarray(y)
    s_tilde = np.asarray(s_tilde)
    W_f = np.asarray(W_f)
    if W_f.shape != (y.shape[-1], y.shape[-1] + s_tilde.shape[-1]):
        raise ValueError(f"fusion matrix shape {W_f.shape} does not match inputs")
    return np.concatenate([y, s_tilde], axis=-1) @ W_f.T


def save_bank(bank, path):
    payload = np.ascontiguousarray(bank.centroids, dtype="<f4").tobytes()
    if len(bank.fingerprint) != 32:
        raise BankError("bad-fingerprint", "fingerprint must be 32 bytes")
    body = (MAGIC + struct.pack("<III", VERSION, bank.k, bank.d_l)
            + payload + bank.fingerprint)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_bank(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 + 32 + 4:
        raise BankError("truncated", f"file is only {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise BankError("bad-magic", "not a PTRN pattern bank")
    version, k, d_l = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise BankError("bad-version", f"unsupported version {version}")
    expected = 16 + k * d_l * 4 + 32 + 4
    if len(blob) != expected:
        raise BankError("payload-size-mismatch", f"expected {expected} bytes, found {len(blob)}")
    crc_stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if crc_stored != (zlib.crc32(blob[:-4]) & 0xFFFFFFFF):
        raise BankError("crc-mismatch", "checksum does not match")
    centroids = np.frombuffer(blob, dtype="<f4", count=k * d_l, offset=16).reshape(k, d_l)
    if not np.isfinite(centroids).all():
        raise BankError("non-finite", "centroids contain NaN or Inf")
    fingerprint = blob[16 + k * d_l * 4 : 16 + k * d_l * 4 + 32]
    return PatternBank(
        k=int(k),
        centroids=centroids.astype(np.float32),
        inertia=float("nan"),
        fingerprint=fingerprint,
    )
