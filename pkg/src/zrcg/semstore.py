"""Raw semantic item embeddings and the SEMB binary container.

SEMB v1 layout (all integers little-endian):

    magic   4 bytes  b"SEMB"
    version u32      1
    count   u32      number of rows
    dim     u32      embedding width
    strlen  u64      byte length of the string table
    strtab  strlen   JSON array of item_id strings, one per row, row order
    payload count*dim*4 bytes of float32 row-major data
    crc     u32      CRC32 of every byte before this field

Stores are immutable after load and safe to share across threads.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"SEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


class SembError(Exception):
    """SEMB validation failure; ``code`` identifies the check that failed."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


class UnboundItemsError(Exception):
    def __init__(self, missing):
        preview = ", ".join(missing[:8])
        more = "" if len(missing) <= 8 else f" (+{len(missing) - 8} more)"
        super().__init__(f"unbound-items: {len(missing)} corpus items lack embeddings: {preview}{more}")
        self.missing = list(missing)


@dataclass
class SemanticStore:
    dim: int
    rows: np.ndarray   # (count, dim) float32
    index: dict        # item_id -> row

    @property
    def count(self):
        return self.rows.shape[0]

    def row(self, item_id):
        return self.rows[self.index[item_id]]


@dataclass
class BoundStore:
    """A store resolved against a corpus: row_of[i] is the store row of corpus item i."""

    store: SemanticStore
    row_of: np.ndarray  # (corpus.n_items,) int64

    @property
    def dim(self):
        return self.store.dim

    def matrix(self):
        """Embedding matrix aligned with corpus item indices."""
        return self.store.rows[self.row_of]


def save(store, path):
    if store.rows.dtype != np.float32:
        raise SembError("bad-dtype", "rows must be float32")
    if store.rows.ndim != 2 or store.rows.shape[1] != store.dim:
        raise SembError("bad-shape", f"rows must be (count, {store.dim})")
    ids = [None] * store.count
    for item_id, row in store.index.items():
        ids[row] = item_id
    if any(i is None for i in ids):
        raise SembError("index-gap", "index does not cover every row exactly once")
    strtab = json.dumps(ids, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    payload = np.ascontiguousarray(store.rows, dtype="<f4").tobytes()
    body = _HEADER.pack(MAGIC, VERSION, store.count, store.dim, len(strtab)) + strtab + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + 4:
        raise SembError("truncated", f"file is only {len(blob)} bytes")
    magic, version, count, dim, strlen = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise SembError("bad-magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise SembError("bad-version", f"unsupported version {version}")
    if dim == 0:
        raise SembError("zero-dim", "declared embedding dim is 0")
    offset = _HEADER.size
    if len(blob) < offset + strlen:
        raise SembError("truncated", "string table extends past end of file")
    strtab = blob[offset : offset + strlen]
    offset += strlen
    try:
        ids = json.loads(strtab.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SembError("bad-string-table", str(exc)) from exc
    if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
        raise SembError("bad-string-table", "string table is not a JSON array of strings")
    if len(ids) != count:
        raise SembError(
            "count-mismatch", f"header declares {count} rows, string table has {len(ids)}"
        )
    payload_len = count * dim * 4
    if len(blob) - offset - 4 != payload_len:
        raise SembError(
            "payload-size-mismatch",
            f"expected {payload_len} payload bytes, found {len(blob) - offset - 4}",
        )
    crc_stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    crc_actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise SembError("crc-mismatch", f"stored {crc_stored:#010x}, computed {crc_actual:#010x}")
    rows = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset)
    rows = rows.reshape(count, dim).astype(np.float32)
    if not np.isfinite(rows).all():
        raise SembError("non-finite", "payload contains NaN or Inf values")
    if len(set(ids)) != len(ids):
        raise SembError("duplicate-ids", "string table contains duplicate item ids")
    return SemanticStore(dim=int(dim), rows=rows, index={i: r for r, i in enumerate(ids)})


def missing_items(store, corpus):
    """Corpus item ids that have no row in the store, in corpus order."""
    return [it.item_id for it in corpus.items if it.item_id not in store.index]


def bind(store, corpus):
    """Resolve every corpus item to a store row.

    Raises :class:`UnboundItemsError` carrying the full missing-id list when
    any corpus item lacks an embedding.
    """
    missing = missing_items(store, corpus)
    if missing:
        raise UnboundItemsError(missing)
    row_of = np.asarray([store.index[it.item_id] for it in corpus.items], dtype=np.int64)
    return BoundStore(store=store, row_of=row_of)
