"""Zero-shot cross-domain sequential recommendation engine.

Trains a sequential recommender on one domain's interaction data plus
precomputed semantic item embeddings, regularizes the latent item space for
cross-domain transfer (inter-domain compactness and intra-domain diversity
entropy terms), extracts transferable sequential patterns by clustering user
representations, and evaluates zero-shot on a disjoint target domain.
"""

from . import corpus, evalkit, kernels, model, objective, patterns, semstore, trainer
from .backend import NUMBA_ENABLED

__version__ = "0.1.0"

__all__ = [
    "corpus",
    "evalkit",
    "kernels",
    "model",
    "objective",
    "patterns",
    "semstore",
    "trainer",
    "NUMBA_ENABLED",
    "__version__",
]
