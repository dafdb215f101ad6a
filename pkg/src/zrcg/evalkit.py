"""Ranking evaluation, zero-shot inference, and embedding diagnostics.

Evaluation protocol: for each user the ground-truth item is ranked against
``n_negatives`` items sampled uniformly from the same domain, excluding the
user's entire history; ranks are pessimistic under score ties (the truth is
placed after tied negatives). Recall@k is the fraction of users ranked
within the cutoff; NDCG@k is ``1/log2(rank+1)`` for ranked-in users (a
single relevant item has ideal DCG 1). Both are reported in percent, as the
mean over ``n_repeats`` independent negative draws.

Zero-shot evaluation loads a frozen checkpoint trained on a disjoint source
corpus, projects the target items with the frozen projection, encodes each
target user's history (training prefix plus validation item; the test item
is the truth), optionally fuses with the source pattern bank, and runs the
protocol. Evaluation never mutates the checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels, model as model_mod, patterns as patterns_mod
from .corpus import split as make_split
from .patterns import FingerprintMismatch, make_fingerprint
from .semstore import bind

VARIANT_SEM = "-Sem"
VARIANT_RECG = "-RecG"

_STREAM_EVAL = 6


class EvalError(Exception):
    pass


class DomainOverlapError(EvalError):
    def __init__(self, kind, count):
        super().__init__(
            f"domain-overlap: {count} {kind} ids appear in both source and target corpora"
        )
        self.kind = kind
        self.count = count


@dataclass
class EvalConfig:
    cutoffs: tuple = (5, 10, 20)
    n_negatives: int = 100
    n_repeats: int = 5
    seed: int = 0
    tie_rule: str = "pessimistic"

    def validate(self):
        if not self.cutoffs:
            raise ValueError("at least one cutoff is required")
        if any(k < 1 for k in self.cutoffs):
            raise ValueError("cutoffs must be positive")
        if max(self.cutoffs) > self.n_negatives + 1:
            raise ValueError("cutoffs cannot exceed n_negatives + 1")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        if self.tie_rule != "pessimistic":
            raise ValueError(f"unknown tie rule {self.tie_rule!r}")
        return self


@dataclass
class EvalReport:
    variant: str
    source_domain: str
    target_domain: str
    cutoffs: list              # [{"k", "recall_pct", "ndcg_pct"}]
    per_repeat: list           # same shape, one entry per repeat
    user_count: int
    repeats: int
    seed: int
    extras: dict = field(default_factory=dict)

    def to_json(self):
        doc = {
            "variant": self.variant,
            "source_domain": self.source_domain,
            "target_domain": self.target_domain,
            "cutoffs": self.cutoffs,
            "per_repeat": self.per_repeat,
            "user_count": self.user_count,
            "repeats": self.repeats,
            "seed": self.seed,
        }
        doc.update(self.extras)
        return json.dumps(doc, separators=(",", ":"), ensure_ascii=True, sort_keys=True)

    def metric(self, k, name="recall_pct"):
        for row in self.cutoffs:
            if row["k"] == k:
                return row[name]
        raise KeyError(f"cutoff {k} not in report")


def rank_one(user_repr, truth_emb, negative_embs, tie_rule="pessimistic"):
    """1-based rank of the truth among the negatives (pessimistic on ties)."""
    if tie_rule != "pessimistic":
        raise ValueError(f"unknown tie rule {tie_rule!r}")
    u = np.asarray(user_repr, dtype=np.float64)
    t = float(u @ np.asarray(truth_emb, dtype=np.float64))
    scores = np.asarray(negative_embs, dtype=np.float64) @ u
    return int(1 + (scores >= t).sum())


def metrics(ranks, cutoffs):
    """Recall@k and NDCG@k (percent) for a collection of 1-based ranks."""
    ranks = np.asarray(ranks, dtype=np.int64)
    if (ranks < 1).any():
        raise ValueError("ranks must be >= 1")
    out = []
    for k in cutoffs:
        hit = ranks <= k
        recall = 100.0 * hit.mean() if len(ranks) else 0.0
        gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        out.append({
            "k": int(k),
            "recall_pct": float(recall),
            "ndcg_pct": float(100.0 * gains.mean() if len(ranks) else 0.0),
        })
    return out


def sample_negatives(rng, pool, forbidden, count):
    """Sample up to ``count`` distinct pool entries avoiding ``forbidden``.

    Uses rejection sampling while the pool is comfortably larger than the
    request, otherwise materializes the allowed set. Deterministic given the
    generator state.
    """
    pool = np.asarray(pool)
    avail_bound = len(pool) - len(forbidden)
    if avail_bound <= 0:
        return np.empty(0, dtype=np.int64)
    if avail_bound < 2 * count or len(pool) < 4 * count:
        avail = np.asarray([int(i) for i in pool if int(i) not in forbidden], dtype=np.int64)
        if len(avail) == 0:
            return np.empty(0, dtype=np.int64)
        take = min(count, len(avail))
        picked = rng.choice(len(avail), size=take, replace=False)
        return avail[np.sort(picked)]
    seen = set()
    out = []
    while len(out) < count:
        cand = int(pool[int(rng.integers(0, len(pool)))])
        if cand in forbidden or cand in seen:
            continue
        seen.add(cand)
        out.append(cand)
    return np.asarray(out, dtype=np.int64)


def _domain_pools(corpus):
    pools = {}
    for idx, it in enumerate(corpus.items):
        pools.setdefault(it.domain, []).append(idx)
    return {d: np.asarray(v, dtype=np.int64) for d, v in pools.items()}


def _encode_users(params, item_matrix, seqs, bank, fusion, chunk=512):
    reprs = np.zeros((len(seqs), params.d_l), dtype=item_matrix.dtype)
    for lo in range(0, len(seqs), chunk):
        part = seqs[lo : lo + chunk]
        X, lengths = model_mod.pad_sequences(part, params.max_seq_len, params.d_l,
                                             item_matrix.dtype, item_matrix)
        Y, _ = model_mod.encode_batch(params, X, lengths)
        if fusion:
            _, S_tilde = patterns_mod.attend_batch(Y, bank.centroids)
            Y = model_mod.fuse_user(params, Y, S_tilde.astype(Y.dtype))
        reprs[lo : lo + len(part)] = Y
    return reprs


def protocol_eval(params, corpus, store, eval_cfg, bank=None, fusion=False,
                  history="prefix+val", truth="test"):
    """Run the sampled-negative ranking protocol on a corpus' own split.

    ``history``/``truth`` choose between validation mode (``prefix`` /
    ``val``) and test mode (``prefix+val`` / ``test``). Returns
    (per-repeat metric tables, mean metric table, user count).
    """
    eval_cfg.validate()
    if fusion and bank is None:
        raise EvalError("fusion requested without a pattern bank")
    bound = bind(store, corpus)
    item_matrix = model_mod.project_batch(params, bound.matrix())
    split_spec = make_split(corpus)
    entries = split_spec.entries
    if not entries:
        raise EvalError("no evaluable users (all sequences shorter than 3)")
    seqs = []
    truths = []
    for e in entries:
        prefix = split_spec.prefix(corpus, e)
        if history == "prefix+val":
            seqs.append(np.concatenate([prefix, [e.val]]))
        else:
            seqs.append(prefix)
        truths.append(e.test if truth == "test" else e.val)
    truths = np.asarray(truths, dtype=np.int64)
    reprs = _encode_users(params, item_matrix, seqs, bank, fusion)

    pools = _domain_pools(corpus)
    hist_sets = [set(int(i) for i in corpus.users[e.user].items) for e in entries]
    per_repeat = []
    for rep in range(eval_cfg.n_repeats):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((eval_cfg.seed, _STREAM_EVAL, rep))))
        neg_rows = []
        for j, e in enumerate(entries):
            pool = pools[corpus.items[truths[j]].domain]
            negs = sample_negatives(rng, pool, hist_sets[j], eval_cfg.n_negatives)
            if len(negs) < eval_cfg.n_negatives:
                raise EvalError(
                    f"user {corpus.users[e.user].user_id}: only {len(negs)} negatives available, "
                    f"{eval_cfg.n_negatives} required (shrink n_negatives for tiny corpora)"
                )
            neg_rows.append(negs)
        neg_idx = np.stack(neg_rows)
        ranks = np.asarray(kernels.rank_against(
            np.ascontiguousarray(reprs), item_matrix, truths, neg_idx))
        per_repeat.append(metrics(ranks, eval_cfg.cutoffs))
    mean_rows = []
    for ci, k in enumerate(eval_cfg.cutoffs):
        mean_rows.append({
            "k": int(k),
            "recall_pct": float(np.mean([r[ci]["recall_pct"] for r in per_repeat])),
            "ndcg_pct": float(np.mean([r[ci]["ndcg_pct"] for r in per_repeat])),
        })
    return per_repeat, mean_rows, len(entries)


def check_disjoint(params, target_corpus):
    src_items = set(params.meta.get("source_item_ids", []))
    src_users = set(params.meta.get("source_user_ids", []))
    item_overlap = sum(1 for it in target_corpus.items if it.item_id in src_items)
    if item_overlap:
        raise DomainOverlapError("item", item_overlap)
    user_overlap = sum(1 for u in target_corpus.users if u.user_id in src_users)
    if user_overlap:
        raise DomainOverlapError("user", user_overlap)


def zero_shot_eval(checkpoint_path, bank_path, target_corpus, target_store,
                   eval_cfg, fusion=True, variant=None):
    """Evaluate a frozen source checkpoint on a disjoint target corpus.

    The checkpoint's recorded source item/user ids must be disjoint from the
    target corpus; with fusion, the bank's fingerprint must match the
    (source corpus, checkpoint) pair it was built from.
    """
    with open(checkpoint_path, "rb") as fh:
        ckpt_bytes = fh.read()
    params = model_mod.load_checkpoint(checkpoint_path)
    check_disjoint(params, target_corpus)
    bank = None
    if fusion:
        bank = patterns_mod.load_bank(bank_path)
        expected = make_fingerprint(params.meta.get("corpus_digest", ""), ckpt_bytes)
        if bank.fingerprint != expected:
            raise FingerprintMismatch()
    per_repeat, mean_rows, user_count = protocol_eval(
        params, target_corpus, target_store, eval_cfg, bank=bank, fusion=fusion)
    return EvalReport(
        variant=variant or (VARIANT_RECG if fusion else VARIANT_SEM),
        source_domain=params.meta.get("source_domain", "?"),
        target_domain="+".join(target_corpus.domain_names()),
        cutoffs=mean_rows,
        per_repeat=per_repeat,
        user_count=user_count,
        repeats=eval_cfg.n_repeats,
        seed=eval_cfg.seed,
    )


# ---------------------------------------------------------------------------
# Embedding diagnostics
# ---------------------------------------------------------------------------


@dataclass
class DiagnosticsReport:
    center_distance: float      # mean pairwise distance between domain centers
    mean_intra_cosine: float    # mean within-domain pairwise cosine
    probe_accuracy: float       # held-out domain classification accuracy (0..1)
    warnings: list

    def rows(self):
        return [
            ("center_distance", self.center_distance),
            ("mean_intra_cosine", self.mean_intra_cosine),
            ("probe_accuracy", self.probe_accuracy),
        ]


def _mean_pairwise_cosine(E):
    """Mean cos(e_i, e_j) over i != j via the normalized-sum identity."""
    n = E.shape[0]
    if n < 2:
        return float("nan")
    norms = np.linalg.norm(E, axis=1)
    U = E / np.maximum(norms, 1e-12)[:, None]
    s = U.sum(axis=0)
    total = float(s @ s) - n
    return total / (n * (n - 1))


def linear_probe_accuracy(E, labels, seed=0, train_frac=0.8, steps=500,
                          lr=1.0, l2=1e-3):
    """Held-out accuracy of a softmax-regression domain classifier.

    Features are standardized; the 80/20 split is a seeded permutation; the
    classifier is trained full-batch from a zero init, so the whole
    diagnostic is deterministic.
    """
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = E.shape
    n_classes = int(labels.max()) + 1
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xD1A6))))
    perm = rng.permutation(n)
    n_train = max(1, int(round(train_frac * n)))
    tr, te = perm[:n_train], perm[n_train:]
    if len(te) == 0:
        tr, te = perm, perm
    mu = E[tr].mean(axis=0)
    sd = E[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    Xtr = (E[tr] - mu) / sd
    Xte = (E[te] - mu) / sd
    ytr = labels[tr]
    W = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[ytr]
    for _ in range(steps):
        logits = Xtr @ W.T + b
        logits -= logits.max(axis=1, keepdims=True)
        ez = np.exp(logits)
        probs = ez / ez.sum(axis=1, keepdims=True)
        g = (probs - onehot) / len(ytr)
        W -= lr * (g.T @ Xtr + l2 * W)
        b -= lr * g.sum(axis=0)
    pred = (Xte @ W.T + b).argmax(axis=1)
    return float((pred == labels[te]).mean())


def pca_2d(E):
    """Deterministic 2-component PCA with a fixed sign convention."""
    E = np.asarray(E, dtype=np.float64)
    mu = E.mean(axis=0)
    centered = E - mu
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros((2 - vt.shape[0], E.shape[1]))])
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def embedding_diagnostics(E, domains, seed=0):
    """Numeric alignment/uniformity diagnostics on projected item embeddings."""
    E = np.asarray(E, dtype=np.float64)
    domains = np.asarray(domains, dtype=np.int64)
    n_domains = int(domains.max()) + 1
    if n_domains < 2:
        raise ValueError("diagnostics require at least 2 domains")
    warnings = []
    rank = np.linalg.matrix_rank(E - E.mean(axis=0)) if E.shape[0] > 1 else 0
    if rank == 0:
        warnings.append("degenerate embedding matrix (rank 0)")
    centers = np.stack([E[domains == d].mean(axis=0) for d in range(n_domains)])
    dists = []
    for a in range(n_domains):
        for b in range(a + 1, n_domains):
            dists.append(float(np.linalg.norm(centers[a] - centers[b])))
    intra = []
    for d in range(n_domains):
        rows = E[domains == d]
        if rows.shape[0] >= 2:
            intra.append(_mean_pairwise_cosine(rows))
        else:
            warnings.append(f"domain {d} has fewer than 2 items")
    return DiagnosticsReport(
        center_distance=float(np.mean(dists)),
        mean_intra_cosine=float(np.mean(intra)) if intra else float("nan"),
        probe_accuracy=linear_probe_accuracy(E, domains, seed=seed),
        warnings=warnings,
    )


def write_diagnostics_csv(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        for name, value in report.rows():
            fh.write(f"{name},{value!r}\n")


def write_pca_csv(item_ids, domain_names, coords, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("item_id,domain,x,y\n")
        for item_id, dom, (x, y) in zip(item_ids, domain_names, coords):
            fh.write(f"{item_id},{dom},{x!r},{y!r}\n")
