"""Embedding backends.

A backend is anything with an integer ``dim`` attribute and an
``embed_batch(texts) -> float32 array of shape (len(texts), dim)`` method.
Model identifiers are resolved as:

* ``stub:<dim>`` - deterministic offline backend; each text's vector is
  seeded from a hash of the text, so exports are reproducible and need no
  network or model weights;
* ``<module.path>:<factory>`` - import ``factory`` from ``module.path`` and
  call it with no arguments; plug in any real encoder this way.
"""

import hashlib
import importlib

import numpy as np


class StubBackend:
    """Hash-seeded deterministic embeddings for tests and dry runs."""

    def __init__(self, dim):
        if dim < 1:
            raise ValueError("stub dim must be positive")
        self.dim = int(dim)

    def embed_batch(self, texts):
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.Generator(np.random.PCG64(seed))
            out[i] = rng.standard_normal(self.dim).astype(np.float32)
        return out


def resolve(model_id):
    if model_id.startswith("stub:"):
        return StubBackend(int(model_id.split(":", 1)[1]))
    if ":" in model_id:
        module_name, attr = model_id.rsplit(":", 1)
        module = importlib.import_module(module_name)
        factory = getattr(module, attr)
        return factory()
    raise ValueError(
        f"unknown model identifier {model_id!r}; use 'stub:<dim>' or '<module>:<factory>'"
    )
