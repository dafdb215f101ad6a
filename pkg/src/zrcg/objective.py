"""Training objectives: pairwise ranking loss plus item-level generalization.

Three ingredients are combined per step:

* ``bpr_loss`` - pairwise logistic ranking loss over (positive, negative)
  score differences;
* ``intra_diversity`` - for each domain, the average entropy of the row
  softmax over within-domain cosine similarities (temperature ``tau``);
  higher values mean within-domain embeddings are spread evenly;
* ``inter_compactness`` - for each item, the negative entropy of the softmax
  over cosine similarities to *other* domains' centers. With exactly two
  domains and the own center excluded from the denominator the distribution
  is a single point mass and the term is identically zero; the
  ``include-own`` mode keeps the own center in the denominator, which makes
  the term informative for two domains.

The combined objective is ``L_rec - alpha * L_intra + beta * L_inter`` with
``beta = alpha * n_items / n_domains**3`` under the default scaled rule.

All loss math runs in float64 and is returned together with exact gradients
with respect to the latent item embeddings, so the trainer can backpropagate
through domain centers and every softmax/entropy term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels

logger = logging.getLogger("zrcg.objective")

EPS_COSINE = 1e-12

BETA_SCALED = "scaled"
BETA_MANUAL = "manual"
INTER_EXCLUDE_OWN = "exclude-own"
INTER_INCLUDE_OWN = "include-own"
SCOPE_METADATA = "metadata"
SCOPE_STRICT = "strict"


@dataclass
class GenLossConfig:
    alpha: float = 0.001
    tau: float = 0.1
    beta_rule: str = BETA_SCALED
    manual_beta: float = None
    n_for_beta: str = "batch-items"       # batch-items | corpus-items
    include_self_pairs: bool = False
    inter_mode: str = INTER_EXCLUDE_OWN   # exclude-own | include-own
    sample_size: int = 64                 # extra items drawn per domain per batch
    scope: str = SCOPE_METADATA           # metadata | strict
    enabled: bool = True
    include_intra: bool = True            # ablation toggle
    include_inter: bool = True            # ablation toggle

    def validate(self):
        if self.enabled and self.alpha <= 0:
            raise ValueError("alpha must be > 0 while the generalization loss is enabled")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.beta_rule not in (BETA_SCALED, BETA_MANUAL):
            raise ValueError(f"unknown beta_rule {self.beta_rule!r}")
        if self.beta_rule == BETA_MANUAL and (self.manual_beta is None or self.manual_beta <= 0):
            raise ValueError("manual beta_rule requires manual_beta > 0")
        if self.n_for_beta not in ("batch-items", "corpus-items"):
            raise ValueError(f"unknown n_for_beta {self.n_for_beta!r}")
        if self.inter_mode not in (INTER_EXCLUDE_OWN, INTER_INCLUDE_OWN):
            raise ValueError(f"unknown inter_mode {self.inter_mode!r}")
        if self.scope not in (SCOPE_METADATA, SCOPE_STRICT):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.sample_size < 0:
            raise ValueError("sample_size must be >= 0")
        return self


def _guarded_unit_rows(M):
    norms = np.sqrt((M * M).sum(axis=1))
    inv = 1.0 / np.maximum(norms, EPS_COSINE)
    return M * inv[:, None], inv


def domain_centers(E, domains, n_domains=None):
    """Per-domain arithmetic means of the embedding rows.

    Every domain index in ``range(n_domains)`` must have at least one row.
    """
    E = np.asarray(E)
    domains = np.asarray(domains, dtype=np.int64)
    if n_domains is None:
        n_domains = int(domains.max()) + 1 if len(domains) else 0
    counts = np.bincount(domains, minlength=n_domains)
    if (counts == 0).any():
        empty = np.nonzero(counts == 0)[0].tolist()
        raise ValueError(f"domains without items: {empty}")
    sums = np.zeros((n_domains, E.shape[1]), dtype=np.float64)
    np.add.at(sums, domains, E.astype(np.float64))
    centers = sums / counts[:, None]
    return centers.astype(E.dtype)


def inter_compactness(E, domains, config, centers=None, with_grad=False):
    """Sum over items of q*log(q) across other-domain assignment softmaxes.

    Always <= 0. Returns the scalar, or ``(scalar, dE, dCenters)`` with
    ``with_grad``; the center gradient is *not* yet distributed to member
    rows (see :func:`generalization_terms`).
    """
    E = np.asarray(E)
    domains = np.asarray(domains, dtype=np.int64)
    n_domains = int(domains.max()) + 1 if len(domains) else 0
    if n_domains < 2:
        raise ValueError("inter-domain compactness requires at least 2 domains")
    if centers is None:
        centers = domain_centers(E, domains, n_domains)
    Ef = E.astype(np.float64)
    Cf = np.asarray(centers, dtype=np.float64)
    U, inv_e = _guarded_unit_rows(Ef)
    V, inv_c = _guarded_unit_rows(Cf)
    cosM = U @ V.T                      # (n, D)
    logits = cosM / config.tau
    n = len(domains)
    rows = np.arange(n)
    if config.inter_mode == INTER_EXCLUDE_OWN:
        logits = logits.copy()
        logits[rows, domains] = -np.inf
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    Q = ex / ex.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        logQ = np.where(Q > 0.0, np.log(np.maximum(Q, 1e-300)), 0.0)
    summed = np.ones((n, n_domains), dtype=bool)   # S: domains in the outer sum
    summed[rows, domains] = False
    contrib = Q * logQ * summed
    L = float(contrib.sum())
    if not with_grad:
        return L
    # d/d logits of sum_{d in S} q_d log q_d for a row softmax q over the
    # active set: (1+log q_j) q_j [j in S] - q_j * sum_{d in S} (1+log q_d) q_d
    inner = ((1.0 + logQ) * Q * summed).sum(axis=1, keepdims=True)
    dlogits = (1.0 + logQ) * Q * summed - Q * inner
    dcos = dlogits / config.tau
    dE = inv_e[:, None] * (dcos @ V - (dcos * cosM).sum(axis=1, keepdims=True) * U)
    dC = inv_c[:, None] * (dcos.T @ U - (dcos * cosM).sum(axis=0)[:, None] * V)
    return L, dE.astype(E.dtype), dC.astype(E.dtype)


def intra_diversity(E, domains, config, with_grad=False):
    """Sum over domains of the mean within-domain softmax-row entropy (>= 0).

    Domains with a single item are skipped (with a log record) when self
    pairs are excluded, since they have no within-domain pair distribution.
    """
    E = np.asarray(E)
    domains = np.asarray(domains, dtype=np.int64)
    n_domains = int(domains.max()) + 1 if len(domains) else 0
    total = 0.0
    dE = np.zeros_like(E) if with_grad else None
    skipped = 0
    for d in range(n_domains):
        idx = np.nonzero(domains == d)[0]
        n_d = len(idx)
        if n_d == 0:
            continue
        if n_d < 2 and not config.include_self_pairs:
            skipped += 1
            logger.warning("intra-diversity: domain %d has a single item, skipped", d)
            continue
        H_sum, grad = kernels.entropy(
            np.ascontiguousarray(E[idx]), float(config.tau),
            bool(config.include_self_pairs), EPS_COSINE,
        )
        total += H_sum / n_d
        if with_grad:
            dE[idx] += np.asarray(grad) / n_d
    if with_grad:
        return float(total), dE
    return float(total)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.clip(np.asarray(x, dtype=np.float64), -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-x))


def bpr_from_diffs(diffs, with_grad=False):
    """Ranking loss from positive-minus-negative score differences.

    ``sum(log(1 + exp(-diff)))``, the numerically stable form of
    ``-sum(log sigmoid(diff))``.
    """
    diffs = np.asarray(diffs, dtype=np.float64)
    L = float(softplus(-diffs).sum())
    if not with_grad:
        return L
    return L, sigmoid(diffs) - 1.0


def bpr_loss(user_reprs, positive_embs, negative_embs):
    """Pairwise ranking loss over aligned (user, positive, negative) rows."""
    U = np.asarray(user_reprs, dtype=np.float64)
    P = np.asarray(positive_embs, dtype=np.float64)
    N = np.asarray(negative_embs, dtype=np.float64)
    if not (U.shape == P.shape == N.shape):
        raise ValueError(f"misaligned BPR triples: {U.shape}, {P.shape}, {N.shape}")
    diffs = np.einsum("nd,nd->n", U, P) - np.einsum("nd,nd->n", U, N)
    return bpr_from_diffs(diffs)


@dataclass(frozen=True)
class CombinedLoss:
    total: float
    rec: float
    intra: float
    inter: float
    alpha: float
    beta: float


def beta_value(config, n_items, n_domains):
    if not config.enabled:
        return 0.0
    if config.beta_rule == BETA_MANUAL:
        return float(config.manual_beta)
    return float(config.alpha) * float(n_items) / float(n_domains) ** 3


def combine(L_rec, L_intra, L_inter, config, n_items, n_domains):
    """Total objective: ranking loss minus alpha*intra plus beta*inter."""
    config.validate()
    for name, val in (("L_rec", L_rec), ("L_intra", L_intra), ("L_inter", L_inter)):
        if not np.isfinite(val):
            raise ValueError(f"non-finite loss term {name}: {val}")
    if not config.enabled:
        return CombinedLoss(float(L_rec), float(L_rec), 0.0, 0.0, 0.0, 0.0)
    alpha = float(config.alpha)
    beta = beta_value(config, n_items, n_domains)
    intra = float(L_intra) if config.include_intra else 0.0
    inter = float(L_inter) if config.include_inter else 0.0
    total = float(L_rec) - alpha * intra + beta * inter
    return CombinedLoss(total, float(L_rec), intra, inter, alpha, beta)


def generalization_terms(E, domains, config, with_grad=False):
    """Both generalization losses on one embedding batch.

    Returns ``(L_intra, L_inter)`` and, with gradients, the pair of
    d(loss)/d(E) arrays. The inter gradient includes the path through the
    domain centers (each center is the mean of its member rows).
    """
    E = np.asarray(E)
    domains = np.asarray(domains, dtype=np.int64)
    zero = np.zeros_like(E)
    L_intra, d_intra = 0.0, zero
    L_inter, d_inter = 0.0, zero.copy()
    if config.include_intra:
        if with_grad:
            L_intra, d_intra = intra_diversity(E, domains, config, with_grad=True)
        else:
            L_intra = intra_diversity(E, domains, config)
    if config.include_inter:
        if with_grad:
            L_inter, dE_direct, dC = inter_compactness(E, domains, config, with_grad=True)
            d_inter = dE_direct.astype(np.float64)
            counts = np.bincount(domains, minlength=dC.shape[0]).astype(np.float64)
            d_inter += (dC.astype(np.float64) / counts[:, None])[domains]
            d_inter = d_inter.astype(E.dtype)
        else:
            L_inter = inter_compactness(E, domains, config)
    if with_grad:
        return L_intra, L_inter, d_intra, d_inter
    return L_intra, L_inter
