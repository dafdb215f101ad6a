"""SEMB v1 container writer.

The layout must match the recommendation engine byte for byte (all integers
little-endian):

    magic   4 bytes  b"SEMB"
    version u32      1
    count   u32      number of rows
    dim     u32      embedding width
    strlen  u64      byte length of the string table
    strtab  strlen   JSON array of item_id strings, row order
    payload count*dim*4 float32 row-major
    crc     u32      CRC32 of every byte before this field
"""

import json
import struct
import zlib

import numpy as np

MAGIC = b"SEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


def write_semb(item_ids, rows, path):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[0] != len(item_ids):
        raise ValueError(f"rows shape {rows.shape} does not match {len(item_ids)} ids")
    if not np.isfinite(rows).all():
        raise ValueError("refusing to write non-finite embeddings")
    strtab = json.dumps(list(item_ids), separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    body = _HEADER.pack(MAGIC, VERSION, rows.shape[0], rows.shape[1], len(strtab))
    body += strtab + rows.tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))
