"""Trainable parameters and the forward pipeline.

The model maps a raw semantic embedding (width ``d_h``) into a latent space
(width ``d_l < d_h``) with two parallel affine projection layers whose
outputs are merged element-wise, encodes an interaction history into a user
representation with a pluggable sequence encoder (mean pooling or a
single-layer gated recurrence), and scores candidate items by dot product.

Parameters live in a flat ``name -> ndarray`` dict so the trainer, the
optimizer and the gradient checker can iterate them uniformly.

Checkpoint container (ZRCG v1, little-endian)::

    magic   4 bytes  b"ZRCG"
    version u32      1
    hlen    u32      byte length of the JSON header
    header  hlen     JSON: dims, encoder variant, merge mode, tensor manifest,
                     free-form metadata
    tensors ...      float32 row-major data, manifest order
    crc     u32      CRC32 of every byte before this field
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels

MAGIC = b"ZRCG"
VERSION = 1

MEAN_POOL = "mean-pool"
RECURRENT_GATE = "recurrent-gate"
ENCODER_VARIANTS = (MEAN_POOL, RECURRENT_GATE)

_GRU_TENSORS = ("enc_Wz", "enc_Uz", "enc_bz", "enc_Wr", "enc_Ur", "enc_br",
                "enc_Wh", "enc_Uh", "enc_bh")


class ModelError(Exception):
    pass


class DimensionError(ModelError):
    pass


class EmptyHistoryError(ModelError):
    def __init__(self):
        super().__init__("empty-history: cannot encode an empty interaction sequence")


class CheckpointError(ModelError):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class ModelParams:
    d_h: int
    d_l: int
    encoder: str                   # mean-pool | recurrent-gate
    max_seq_len: int
    merge_mode: str = "sum"
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def tensor_names(self):
        return list(self.tensors.keys())

    def copy(self):
        return ModelParams(
            d_h=self.d_h,
            d_l=self.d_l,
            encoder=self.encoder,
            max_seq_len=self.max_seq_len,
            merge_mode=self.merge_mode,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            meta=dict(self.meta),
        )

    def astype(self, dtype):
        out = self.copy()
        out.tensors = {k: v.astype(dtype) for k, v in out.tensors.items()}
        return out


def init_params(d_h, d_l, encoder=MEAN_POOL, max_seq_len=50, seed=0,
                merge_mode="sum", dtype=np.float32):
    """Seeded initialization: weights uniform in +-1/sqrt(fan_in), biases zero."""
    if d_l >= d_h:
        raise DimensionError(f"latent dim must be smaller than input dim (d_l={d_l}, d_h={d_h})")
    if encoder not in ENCODER_VARIANTS:
        raise ModelError(f"unknown encoder variant {encoder!r}")
    if merge_mode != "sum":
        raise ModelError(f"unknown merge mode {merge_mode!r}")
    if max_seq_len < 1:
        raise ModelError("max_seq_len must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x1217))))

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    tensors = {
        "W_p": uniform((d_l, d_h), d_h),
        "b_p": np.zeros(d_l, dtype=dtype),
        "W_p2": uniform((d_l, d_h), d_h),
        "b_p2": np.zeros(d_l, dtype=dtype),
    }
    if encoder == RECURRENT_GATE:
        for name in _GRU_TENSORS:
            if name.startswith("enc_b"):
                tensors[name] = np.zeros(d_l, dtype=dtype)
            else:
                tensors[name] = uniform((d_l, d_l), d_l)
    tensors["W_f"] = uniform((d_l, 2 * d_l), 2 * d_l)
    return ModelParams(
        d_h=d_h, d_l=d_l, encoder=encoder, max_seq_len=max_seq_len,
        merge_mode=merge_mode, tensors=tensors,
    )


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def project_batch(params, E_sem):
    """Merged two-layer projection of raw embeddings, rows = items."""
    E_sem = np.asarray(E_sem)
    if E_sem.ndim != 2 or E_sem.shape[1] != params.d_h:
        raise DimensionError(f"expected (*, {params.d_h}) raw embeddings, got {E_sem.shape}")
    t = params.tensors
    first = E_sem @ t["W_p"].T + t["b_p"]
    second = E_sem @ t["W_p2"].T + t["b_p2"]
    return first + second


def project_item(params, e_sem):
    e_sem = np.asarray(e_sem)
    if e_sem.ndim != 1 or e_sem.shape[0] != params.d_h:
        raise DimensionError(f"expected a length-{params.d_h} vector, got shape {e_sem.shape}")
    if not np.isfinite(e_sem).all():
        raise ModelError("raw embedding contains non-finite values")
    return project_batch(params, e_sem[None, :])[0]


def pad_sequences(seqs, max_seq_len, d_l, dtype, item_matrix):
    """Gather item embedding sequences into a padded (n, T, d_l) batch.

    Each sequence is truncated to its last ``max_seq_len`` entries before
    padding. Returns (X, lengths).
    """
    trimmed = [np.asarray(s[-max_seq_len:], dtype=np.int64) for s in seqs]
    lengths = np.asarray([len(s) for s in trimmed], dtype=np.int64)
    if (lengths == 0).any():
        raise EmptyHistoryError()
    T = int(lengths.max())
    X = np.zeros((len(trimmed), T, d_l), dtype=dtype)
    for i, s in enumerate(trimmed):
        X[i, : len(s)] = item_matrix[s]
    return X, lengths


def encode_batch(params, X, lengths):
    """Encode padded embedding sequences; returns (Y, cache) for backward."""
    if params.encoder == MEAN_POOL:
        sums = X.sum(axis=1, dtype=np.float64)
        Y = (sums / lengths[:, None]).astype(X.dtype)
        return Y, ("mean", lengths)
    t = params.tensors
    out = kernels.gru_forward(
        X, lengths,
        t["enc_Wz"], t["enc_Uz"], t["enc_bz"],
        t["enc_Wr"], t["enc_Ur"], t["enc_br"],
        t["enc_Wh"], t["enc_Uh"], t["enc_bh"],
    )
    return out[0], ("gru", lengths, out[1:])


def encode_sequence(params, embeddings):
    """Encode one interaction history (a sequence of latent item vectors)."""
    embeddings = [np.asarray(e) for e in embeddings]
    if len(embeddings) == 0:
        raise EmptyHistoryError()
    for e in embeddings:
        if e.shape != (params.d_l,):
            raise DimensionError(f"expected length-{params.d_l} vectors, got {e.shape}")
    mat = np.stack(embeddings)
    mat = mat[-params.max_seq_len:]
    X = mat[None, :, :]
    lengths = np.asarray([mat.shape[0]], dtype=np.int64)
    Y, _ = encode_batch(params, X, lengths)
    return Y[0]


def score(user_repr, item_emb):
    user_repr = np.asarray(user_repr)
    item_emb = np.asarray(item_emb)
    if user_repr.shape != item_emb.shape or user_repr.ndim != 1:
        raise DimensionError(
            f"score expects two equal-length vectors, got {user_repr.shape} and {item_emb.shape}"
        )
    return float(np.dot(user_repr.astype(np.float64), item_emb.astype(np.float64)))


def fuse_user(params, Y, S_tilde):
    """Project [user repr ; attended pattern] back to the latent space."""
    W_f = params.tensors["W_f"]
    F = np.concatenate([Y, S_tilde], axis=-1)
    return F @ W_f.T


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(params, path):
    manifest = [[name, list(arr.shape)] for name, arr in params.tensors.items()]
    header = {
        "d_h": params.d_h,
        "d_l": params.d_l,
        "encoder": params.encoder,
        "merge_mode": params.merge_mode,
        "max_seq_len": params.max_seq_len,
        "tensors": manifest,
        "meta": params.meta,
    }
    hbytes = json.dumps(header, separators=(",", ":"), ensure_ascii=True, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for name, arr in params.tensors.items():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path, expect=None):
    """Load a checkpoint; ``expect`` may pin d_h / d_l / encoder.

    Raises :class:`CheckpointError` on container damage and
    :class:`DimensionError` when the file disagrees with ``expect``.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("bad-magic", "not a ZRCG checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError("bad-version", f"unsupported version {version}")
    if len(blob) < 12 + hlen + 4:
        raise CheckpointError("truncated", "header extends past end of file")
    crc_stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    crc_actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise CheckpointError("crc-mismatch", f"stored {crc_stored:#010x}, computed {crc_actual:#010x}")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("bad-header", str(exc)) from exc
    offset = 12 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(blob) - 4:
            raise CheckpointError("payload-size-mismatch", f"tensor {name} extends past end of file")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        offset = end
    if offset != len(blob) - 4:
        raise CheckpointError("payload-size-mismatch", "trailing bytes after tensor payload")
    params = ModelParams(
        d_h=int(header["d_h"]),
        d_l=int(header["d_l"]),
        encoder=header["encoder"],
        merge_mode=header["merge_mode"],
        max_seq_len=int(header["max_seq_len"]),
        tensors=tensors,
        meta=header.get("meta", {}),
    )
    if expect:
        for key in ("d_h", "d_l", "encoder"):
            want = expect.get(key)
            if want is not None and getattr(params, key) != want:
                raise DimensionError(
                    f"checkpoint {key}={getattr(params, key)} does not match expected {want}"
                )
    return params
