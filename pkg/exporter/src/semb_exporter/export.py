"""Export pipeline: metadata JSONL -> batched embedding -> SEMB v1.

Items are embedded in metadata-file order, one row per item, after applying
the same text template the recommendation engine uses when ingesting
metadata. Progress is checkpointed after every batch into two sidecar files
(``<out>.part`` holds raw float32 rows, ``<out>.cursor`` the resume state),
so an interrupted run can resume without re-embedding; the assembled file is
byte-identical either way. Sidecars are removed on success.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .backends import resolve
from .writer import write_semb

logger = logging.getLogger("semb_exporter")

# Must match the engine's metadata template exactly, or exported embeddings
# would not correspond to the texts the engine reasons about.
TEXT_TEMPLATE = "Title: {title}. Features: {features}. Description: {description}."

CURSOR_VERSION = 1


class ExportError(Exception):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class ExportJob:
    metadata_path: str
    model: str
    out_path: str
    batch_size: int = 32
    normalize: bool = False
    resume: bool = False
    max_retries: int = 3
    backoff_s: float = 0.5

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        return self


@dataclass
class ExportResult:
    status: str       # "complete" | "paused"
    items_done: int
    items_total: int
    out_path: str


def read_metadata(path):
    """(item_id, templated text) pairs in file order."""
    rows = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportError("bad-metadata", f"{path}:{line_no}: {exc.msg}") from exc
            item_id = obj.get("item_id")
            if not isinstance(item_id, str) or not item_id:
                raise ExportError("bad-metadata", f"{path}:{line_no}: missing item_id")
            if item_id in seen:
                raise ExportError("bad-metadata", f"{path}:{line_no}: duplicate item_id {item_id!r}")
            seen.add(item_id)
            text = TEXT_TEMPLATE.format(
                title=obj.get("title", "") or "",
                features=obj.get("features", "") or "",
                description=obj.get("description", "") or "",
            )
            rows.append((item_id, text))
    if not rows:
        raise ExportError("bad-metadata", f"{path}: no items")
    return rows


def _metadata_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _cursor_path(out_path):
    return out_path + ".cursor"


def _part_path(out_path):
    return out_path + ".part"


def _write_cursor(out_path, state):
    tmp = _cursor_path(out_path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(state, fh, sort_keys=True)
    os.replace(tmp, _cursor_path(out_path))


def _load_cursor(job, meta_sha, total):
    path = _cursor_path(job.out_path)
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        state = json.load(fh)
    for key, want in (("version", CURSOR_VERSION), ("model", job.model),
                      ("normalize", job.normalize), ("metadata_sha", meta_sha),
                      ("total", total)):
        if state.get(key) != want:
            raise ExportError(
                "cursor-mismatch",
                f"resume cursor disagrees on {key} (cursor {state.get(key)!r}, job {want!r}); "
                "delete the sidecar files to restart",
            )
    part_size = os.path.getsize(_part_path(job.out_path)) if os.path.exists(_part_path(job.out_path)) else 0
    expected = state["next"] * state["dim"] * 4
    if part_size != expected:
        raise ExportError("cursor-mismatch",
                          f"partial payload is {part_size} bytes, cursor expects {expected}")
    return state


def _embed_with_retry(backend, texts, job):
    delay = job.backoff_s
    for attempt in range(job.max_retries + 1):
        try:
            return np.asarray(backend.embed_batch(texts), dtype=np.float32)
        except Exception as exc:  # backend failures are retried, then surfaced
            if attempt == job.max_retries:
                raise ExportError(
                    "backend-failure",
                    f"embed_batch failed after {attempt + 1} attempts: {exc}",
                ) from exc
            logger.warning("embed_batch failed (%s); retrying in %.1fs", exc, delay)
            time.sleep(delay)
            delay *= 2.0


def run_export(job, backend=None, limit=None):
    """Run or resume an export job.

    ``limit`` caps the number of items processed in this call (used to
    exercise interruption); the cursor stays on disk so a later call with
    ``resume=True`` continues where this one stopped.
    """
    job.validate()
    if backend is None:
        backend = resolve(job.model)
    rows = read_metadata(job.metadata_path)
    meta_sha = _metadata_digest(job.metadata_path)
    total = len(rows)

    state = _load_cursor(job, meta_sha, total) if job.resume else None
    if state is None:
        state = {
            "version": CURSOR_VERSION,
            "model": job.model,
            "normalize": job.normalize,
            "metadata_sha": meta_sha,
            "total": total,
            "dim": int(backend.dim),
            "next": 0,
        }
        with open(_part_path(job.out_path), "wb"):
            pass
        _write_cursor(job.out_path, state)
    dim = state["dim"]
    if int(backend.dim) != dim:
        raise ExportError("dim-change",
                          f"backend dim {backend.dim} does not match cursor dim {dim}")

    done_this_call = 0
    while state["next"] < total:
        if limit is not None and done_this_call >= limit:
            return ExportResult("paused", state["next"], total, job.out_path)
        lo = state["next"]
        hi = min(lo + job.batch_size, total)
        if limit is not None:
            hi = min(hi, lo + (limit - done_this_call))
        texts = [text for _, text in rows[lo:hi]]
        arr = _embed_with_retry(backend, texts, job)
        if arr.shape != (hi - lo, dim):
            raise ExportError("dim-change",
                              f"backend returned shape {arr.shape}, expected ({hi - lo}, {dim})")
        if not np.isfinite(arr).all():
            raise ExportError("backend-failure", "backend returned non-finite embeddings")
        if job.normalize:
            norms = np.linalg.norm(arr, axis=1, keepdims=True)
            arr = arr / np.maximum(norms, 1e-12)
        with open(_part_path(job.out_path), "ab") as fh:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        state["next"] = hi
        done_this_call += hi - lo
        _write_cursor(job.out_path, state)
        logger.info("embedded %d/%d items", state["next"], total)

    payload = np.fromfile(_part_path(job.out_path), dtype="<f4").reshape(total, dim)
    write_semb([item_id for item_id, _ in rows], payload, job.out_path)
    os.remove(_part_path(job.out_path))
    os.remove(_cursor_path(job.out_path))
    return ExportResult("complete", total, total, job.out_path)
