"""Training: exact gradients of the combined objective, Adam, epoch loop.

The computation graph is small and fixed, so gradients are computed by a
specialized reverse-mode pass rather than a general autodiff engine:

    raw embeddings -> dual projection -> item embeddings
        -> sequence encoder -> user repr
        -> (optional) pattern attention + fusion
        -> pairwise ranking loss
    item embeddings -> generalization losses (through domain centers and
        every softmax/entropy term)

Finite-difference checks in the test suite gate every path. Training is
deterministic: batch shuffling, history cut points, negative sampling and
pattern extraction all derive from the run seed via named seed streams.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, model as model_mod, objective, patterns as patterns_mod
from .corpus import split as make_split
from .model import MEAN_POOL, RECURRENT_GATE
from .semstore import bind

logger = logging.getLogger("zrcg.trainer")

# Seed stream tags (mixed into SeedSequence entropy tuples).
_STREAM_SHUFFLE = 1
_STREAM_NEGATIVES = 2
_STREAM_GEN = 3
_STREAM_BANK = 4
_STREAM_VALID = 5


class GradientError(Exception):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = None          # optional max global gradient norm
    patience: int = 5                # early stop on validation NDCG@10
    fusion_enabled: bool = False
    fusion_k: int = 32
    fusion_start_frac: float = 0.8   # fuse during the last (1-frac) of epochs
    val_negatives: int = 100
    val_cutoff: int = 10

    def validate(self):
        # 0 is allowed as the degenerate no-op rate (parameters must not move).
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0.0 <= self.fusion_start_frac <= 1.0):
            raise ValueError("fusion_start_frac must lie in [0, 1]")
        if self.fusion_k < 1:
            raise ValueError("fusion_k must be >= 1")
        return self


def _rng(seed, stream, epoch=0):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, stream, epoch))))


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """One training step's fixed inputs, in local (deduplicated) index space."""

    esem: np.ndarray          # (n_used, d_h) raw embeddings of used pool items
    hist_padded: np.ndarray   # (n_users, T) local indices, zero-padded
    lengths: np.ndarray       # (n_users,)
    pos_local: np.ndarray     # (n_users,)
    neg_local: np.ndarray     # (n_users,)
    gen_local: np.ndarray     # (m,) unique local indices entering the gen losses
    gen_domains: np.ndarray   # (m,)
    n_domains: int            # domains in the full generalization pool
    n_batch_items: int        # |gen set|, default scale for beta
    n_corpus_items: int       # full pool size, alternative scale for beta

    @property
    def valid_mask(self):
        T = self.hist_padded.shape[1]
        return np.arange(T)[None, :] < self.lengths[:, None]


def make_batch(pool_sem, pool_domains, histories, pos, neg, gen_pool,
               n_domains, max_seq_len):
    """Deduplicate pool indices and lay the step inputs out densely."""
    histories = [np.asarray(h, dtype=np.int64)[-max_seq_len:] for h in histories]
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    gen_pool = np.asarray(gen_pool, dtype=np.int64)
    used = np.unique(np.concatenate([np.concatenate(histories), pos, neg, gen_pool]))
    local = {int(g): i for i, g in enumerate(used)}
    lengths = np.asarray([len(h) for h in histories], dtype=np.int64)
    T = int(lengths.max())
    hist_padded = np.zeros((len(histories), T), dtype=np.int64)
    for i, h in enumerate(histories):
        hist_padded[i, : len(h)] = [local[int(g)] for g in h]
    gen_local = np.asarray(sorted(local[int(g)] for g in np.unique(gen_pool)), dtype=np.int64)
    inv = {v: k for k, v in local.items()}
    gen_domains = np.asarray([pool_domains[inv[int(l)]] for l in gen_local], dtype=np.int64)
    return Batch(
        esem=np.ascontiguousarray(pool_sem[used]),
        hist_padded=hist_padded,
        lengths=lengths,
        pos_local=np.asarray([local[int(g)] for g in pos], dtype=np.int64),
        neg_local=np.asarray([local[int(g)] for g in neg], dtype=np.int64),
        gen_local=gen_local,
        gen_domains=gen_domains,
        n_domains=n_domains,
        n_batch_items=len(gen_local),
        n_corpus_items=pool_sem.shape[0],
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def forward_backward(params, batch, gen_cfg, bank=None, need_grads=True):
    """Evaluate the combined loss on a batch; optionally return gradients.

    ``bank`` activates pattern attention + fusion for the ranking path. The
    bank's centroids are constants; gradients flow into the fusion matrix
    and back through the user representations.
    """
    t = params.tensors
    # Overflow from diverging parameters surfaces as a non-finite loss, which
    # the caller handles; suppress the redundant numpy warnings here.
    with np.errstate(over="ignore", invalid="ignore"):
        E_proj = model_mod.project_batch(params, batch.esem)
        dtype = E_proj.dtype

        X = E_proj[batch.hist_padded]
        X[~batch.valid_mask] = 0.0
        Y, enc_cache = model_mod.encode_batch(params, X, batch.lengths)

        if bank is not None:
            A, S_tilde, att_cache = patterns_mod.attend_batch(Y, bank.centroids, with_cache=True)
            F = np.concatenate([Y, S_tilde.astype(dtype)], axis=1)
            U_repr = F @ t["W_f"].T
        else:
            U_repr = Y

        pos_emb = E_proj[batch.pos_local]
        neg_emb = E_proj[batch.neg_local]
        diffs = np.einsum("nd,nd->n", U_repr.astype(np.float64),
                          (pos_emb - neg_emb).astype(np.float64))
        L_rec, ddiffs = objective.bpr_from_diffs(diffs, with_grad=True)

        if gen_cfg.enabled and len(batch.gen_local) and np.isfinite(E_proj).all():
            E_gen = np.ascontiguousarray(E_proj[batch.gen_local])
            L_intra, L_inter, d_intra, d_inter = objective.generalization_terms(
                E_gen, batch.gen_domains, gen_cfg, with_grad=True
            )
        else:
            L_intra = L_inter = 0.0
            d_intra = d_inter = None

    n_beta = batch.n_batch_items if gen_cfg.n_for_beta == "batch-items" else batch.n_corpus_items
    finite = all(np.isfinite(v) for v in (L_rec, L_intra, L_inter))
    if not finite or (gen_cfg.enabled and len(batch.gen_local) and d_intra is None):
        return objective.CombinedLoss(float("nan"), L_rec, L_intra, L_inter, 0.0, 0.0), None
    combined = objective.combine(L_rec, L_intra, L_inter, gen_cfg, n_beta, batch.n_domains)
    if not need_grads:
        return combined, None

    dE_proj = np.zeros_like(E_proj)
    ddiffs = ddiffs.astype(dtype)
    dU = ddiffs[:, None] * (pos_emb - neg_emb)
    np.add.at(dE_proj, batch.pos_local, ddiffs[:, None] * U_repr.astype(dtype))
    np.add.at(dE_proj, batch.neg_local, -(ddiffs[:, None] * U_repr.astype(dtype)))

    tape = {}
    if bank is not None:
        tape["W_f"] = (dU.T @ F).astype(dtype)
        dF = dU @ t["W_f"]
        dY = dF[:, : params.d_l].copy()
        dS = dF[:, params.d_l:]
        dY += patterns_mod.attend_backward(None, dS, A, att_cache).astype(dtype)
    else:
        if "W_f" in t:
            tape["W_f"] = np.zeros_like(t["W_f"])
        dY = dU

    if enc_cache[0] == "mean":
        dX = np.repeat((dY / batch.lengths[:, None]).astype(dtype)[:, None, :],
                       X.shape[1], axis=1)
        dX[~batch.valid_mask] = 0.0
    else:
        caches = enc_cache[2]
        out = kernels.gru_backward(
            X, batch.lengths, *caches,
            t["enc_Wz"], t["enc_Uz"], t["enc_Wr"], t["enc_Ur"], t["enc_Wh"], t["enc_Uh"],
            dY,
        )
        dX = np.asarray(out[0])
        for name, g in zip(_GRU_GRAD_NAMES, out[1:]):
            tape[name] = np.asarray(g)

    mask = batch.valid_mask
    np.add.at(dE_proj, batch.hist_padded[mask], dX[mask])

    if gen_cfg.enabled and d_intra is not None:
        gen_grad = (-combined.alpha) * d_intra.astype(np.float64) \
                   + combined.beta * d_inter.astype(np.float64)
        dE_proj[batch.gen_local] += gen_grad.astype(dtype)

    dW = (dE_proj.T @ batch.esem).astype(dtype)
    db = dE_proj.sum(axis=0, dtype=np.float64).astype(dtype)
    tape["W_p"] = dW
    tape["b_p"] = db
    tape["W_p2"] = dW.copy()
    tape["b_p2"] = db.copy()

    for name in params.tensors:
        if name not in tape:
            tape[name] = np.zeros_like(params.tensors[name])
        if not np.isfinite(tape[name]).all():
            raise GradientError(name)
    return combined, tape


_GRU_GRAD_NAMES = ("enc_Wz", "enc_Uz", "enc_bz", "enc_Wr", "enc_Ur", "enc_br",
                   "enc_Wh", "enc_Uh", "enc_bh")


def batch_loss(params, batch, gen_cfg, bank=None):
    """Loss-only evaluation (used by finite-difference checks)."""
    combined, _ = forward_backward(params, batch, gen_cfg, bank=bank, need_grads=False)
    return combined


def backward(params, batch, gen_cfg, bank=None):
    """Gradient tape of the combined objective for one batch."""
    _, tape = forward_backward(params, batch, gen_cfg, bank=bank, need_grads=True)
    return tape


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @staticmethod
    def for_params(params):
        state = AdamState()
        for name, arr in params.tensors.items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(params, tape, state, config):
    """Standard Adam update with bias correction; mutates params and state."""
    if config.grad_clip is not None:
        sq = 0.0
        for g in tape.values():
            sq += float((g.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        if norm > config.grad_clip > 0:
            scale = config.grad_clip / norm
            tape = {k: g * scale for k, g in tape.items()}
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, theta in params.tensors.items():
        g = tape[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)).astype(theta.dtype)
    return params


# ---------------------------------------------------------------------------
# Generalization pool (source items plus optional target metadata items)
# ---------------------------------------------------------------------------


@dataclass
class GenPool:
    sem: np.ndarray        # (n_pool, d_h) raw embeddings
    domains: np.ndarray    # (n_pool,)
    n_domains: int
    n_source: int          # pool[:n_source] are the source corpus items
    domain_names: list


def build_gen_pool(corpus, bound, gen_cfg, aux_corpus=None, aux_bound=None):
    """Assemble the item pool for the generalization losses.

    With ``metadata`` scope, items from an auxiliary corpus (typically the
    target domain's metadata; no interactions are consumed) join the pool
    with their own domain labels, merged by domain name.
    """
    sem = bound.matrix()
    domains = corpus.item_domains()
    names = list(corpus.domain_names())
    if gen_cfg.scope == objective.SCOPE_METADATA and aux_corpus is not None:
        name_to_idx = {n: i for i, n in enumerate(names)}
        extra_domains = []
        for it in aux_corpus.items:
            dname = aux_corpus.domains[it.domain].name
            if dname not in name_to_idx:
                name_to_idx[dname] = len(names)
                names.append(dname)
            extra_domains.append(name_to_idx[dname])
        sem = np.concatenate([sem, aux_bound.matrix()], axis=0)
        domains = np.concatenate([domains, np.asarray(extra_domains, dtype=np.int64)])
    return GenPool(
        sem=sem,
        domains=domains,
        n_domains=len(names),
        n_source=corpus.n_items,
        domain_names=names,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: model_mod.ModelParams
    bank: patterns_mod.PatternBank
    loss_rows: list                 # dicts: step, L_rec, L_intra, L_inter, beta, L_total
    val_history: list               # per-epoch validation NDCG (percent)
    best_epoch: int
    diverged: bool
    skipped_users: int


def _extract_bank(params, corpus, item_matrix_src, split_spec, k, seed_tuple):
    """Cluster current source-user representations, clamping k to the number
    of distinct rows so degenerate parameter states cannot fail the run."""
    reprs = _source_user_reprs(params, corpus,
                               model_mod.project_batch(params, item_matrix_src), split_spec)
    distinct = np.unique(reprs, axis=0).shape[0]
    return patterns_mod.extract_patterns(reprs, min(k, distinct), seed_tuple)


def _source_user_reprs(params, corpus, item_matrix, split_spec, chunk=512):
    """Encode every split user's full training prefix."""
    reprs = np.zeros((len(split_spec.entries), params.d_l), dtype=item_matrix.dtype)
    for lo in range(0, len(split_spec.entries), chunk):
        entries = split_spec.entries[lo : lo + chunk]
        seqs = [split_spec.prefix(corpus, e) for e in entries]
        X, lengths = model_mod.pad_sequences(seqs, params.max_seq_len, params.d_l,
                                             item_matrix.dtype, item_matrix)
        Y, _ = model_mod.encode_batch(params, X, lengths)
        reprs[lo : lo + len(entries)] = Y
    return reprs


def _history_sets(corpus):
    return [set(int(i) for i in u.items) for u in corpus.users]


def _domain_pools(corpus):
    pools = {}
    for idx, it in enumerate(corpus.items):
        pools.setdefault(it.domain, []).append(idx)
    return {d: np.asarray(v, dtype=np.int64) for d, v in pools.items()}


def _sample_negative(rng, pool, forbidden):
    if len(pool) <= len(forbidden):
        return -1
    for _ in range(10_000):
        cand = int(pool[int(rng.integers(0, len(pool)))])
        if cand not in forbidden:
            return cand
    raise RuntimeError("negative sampling failed to find a candidate")


def _validation_ndcg(params, corpus, item_matrix, split_spec, bank, config, epoch, cutoff):
    """Leave-one-out NDCG@cutoff on the validation items, in percent."""
    from .evalkit import sample_negatives

    rng = _rng(config.seed, _STREAM_VALID, epoch)
    pools = _domain_pools(corpus)
    hist_sets = _history_sets(corpus)
    entries = split_spec.entries
    total = 0.0
    counted = 0
    chunk = 512
    for lo in range(0, len(entries), chunk):
        part = entries[lo : lo + chunk]
        seqs = [split_spec.prefix(corpus, e) for e in part]
        X, lengths = model_mod.pad_sequences(seqs, params.max_seq_len, params.d_l,
                                             item_matrix.dtype, item_matrix)
        Y, _ = model_mod.encode_batch(params, X, lengths)
        if bank is not None:
            _, S_tilde = patterns_mod.attend_batch(Y, bank.centroids)
            U = model_mod.fuse_user(params, Y, S_tilde.astype(Y.dtype))
        else:
            U = Y
        neg_rows = []
        truth_rows = []
        keep = []
        for j, e in enumerate(part):
            pool = pools[corpus.items[e.val].domain]
            negs = sample_negatives(rng, pool, hist_sets[e.user], config.val_negatives)
            if len(negs) == 0:
                continue
            neg_rows.append(negs)
            truth_rows.append(e.val)
            keep.append(j)
        if not keep:
            continue
        # Short negative rows are padded by repeating a real negative; the
        # validation score is only an early-stop signal, so the slight
        # double-counting on tiny corpora is acceptable.
        width = max(len(r) for r in neg_rows)
        neg_idx = np.zeros((len(keep), width), dtype=np.int64)
        for r, row in enumerate(neg_rows):
            neg_idx[r, : len(row)] = row
            if len(row) < width:
                neg_idx[r, len(row):] = row[0]
        ranks = np.asarray(kernels.rank_against(
            np.ascontiguousarray(U[keep]), item_matrix,
            np.asarray(truth_rows, dtype=np.int64), neg_idx,
        ))
        gains = np.where(ranks <= cutoff, 1.0 / np.log2(ranks + 1.0), 0.0)
        total += float(gains.sum())
        counted += len(keep)
    return 100.0 * total / counted if counted else 0.0


def train(corpus, store, params, train_cfg, gen_cfg, aux_corpus=None, aux_store=None):
    """Train on a source corpus; returns best-validation parameters and bank.

    Per batch: project the involved raw embeddings, encode each user's
    history up to a seeded cut point, score the cut item against one sampled
    same-domain negative, add the generalization losses over the distinct
    positive/negative items plus ``sample_size`` extra items per domain, and
    take one Adam step. When fusion is enabled the ranking path routes
    through pattern attention during the last ``1 - fusion_start_frac`` of
    epochs, with the bank re-extracted each epoch.
    """
    train_cfg.validate()
    gen_cfg.validate()
    bound = bind(store, corpus)
    aux_bound = None
    if aux_corpus is not None:
        aux_bound = bind(aux_store if aux_store is not None else store, aux_corpus)
    pool = build_gen_pool(corpus, bound, gen_cfg, aux_corpus, aux_bound)
    split_spec = make_split(corpus)
    if not split_spec.entries:
        raise ValueError("no trainable users after splitting")
    item_matrix_src = pool.sem[: pool.n_source]

    hist_sets = _history_sets(corpus)
    domain_pools = _domain_pools(corpus)
    gen_domain_pools = {}
    for d in range(pool.n_domains):
        gen_domain_pools[d] = np.nonzero(pool.domains == d)[0]

    fusion_start = int(math.floor(train_cfg.epochs * train_cfg.fusion_start_frac)) \
        if train_cfg.fusion_enabled else train_cfg.epochs

    loss_rows = []
    val_history = []
    best_params = params.copy()
    last_good = params.copy()   # params that produced the latest finite loss
    best_val = -1.0
    best_epoch = -1
    epochs_since_best = 0
    diverged = False
    skipped_users = 0
    state = AdamState.for_params(params)
    step = 0
    bank = None

    # One supervision pair per user, fixed across epochs: the history is the
    # prefix up to a seeded cut point and the positive is the item at the cut.
    rng_cut = _rng(train_cfg.seed, _STREAM_SHUFFLE, train_cfg.epochs + 1)
    cuts = np.asarray([
        int(rng_cut.integers(1, e.prefix_len)) if e.prefix_len >= 2 else -1
        for e in split_spec.entries
    ], dtype=np.int64)

    for epoch in range(train_cfg.epochs):
        if train_cfg.fusion_enabled and epoch >= fusion_start:
            bank = _extract_bank(params, corpus, item_matrix_src, split_spec,
                                 train_cfg.fusion_k, (train_cfg.seed, _STREAM_BANK, epoch))

        rng_shuffle = _rng(train_cfg.seed, _STREAM_SHUFFLE, epoch)
        rng_neg = _rng(train_cfg.seed, _STREAM_NEGATIVES, epoch)
        rng_gen = _rng(train_cfg.seed, _STREAM_GEN, epoch)
        order = rng_shuffle.permutation(len(split_spec.entries))

        for lo in range(0, len(order), train_cfg.batch_size):
            chunk = order[lo : lo + train_cfg.batch_size]
            histories, pos, neg = [], [], []
            for entry_idx in chunk:
                e = split_spec.entries[int(entry_idx)]
                cut = int(cuts[int(entry_idx)])
                if cut < 1:
                    skipped_users += 1
                    continue
                prefix = split_spec.prefix(corpus, e)
                positive = int(prefix[cut])
                negative = _sample_negative(
                    rng_neg, domain_pools[corpus.items[positive].domain], hist_sets[e.user]
                )
                if negative < 0:
                    skipped_users += 1
                    continue
                histories.append(prefix[:cut])
                pos.append(positive)
                neg.append(negative)
            if not histories:
                continue

            gen_extra = []
            if gen_cfg.enabled:
                for d in range(pool.n_domains):
                    dp = gen_domain_pools[d]
                    if len(dp) == 0:
                        continue
                    take = min(max(gen_cfg.sample_size, 2), len(dp))
                    picked = rng_gen.choice(len(dp), size=take, replace=False)
                    gen_extra.append(dp[picked])
            gen_pool_idx = np.unique(np.concatenate(
                [np.asarray(pos, dtype=np.int64), np.asarray(neg, dtype=np.int64)]
                + gen_extra
            )) if gen_cfg.enabled else np.asarray(pos, dtype=np.int64)

            batch = make_batch(pool.sem, pool.domains, histories, pos, neg,
                               gen_pool_idx, pool.n_domains, params.max_seq_len)
            combined, tape = forward_backward(params, batch, gen_cfg, bank=bank)
            step += 1
            if not np.isfinite(combined.total):
                logger.warning("training diverged at step %d; restoring last good parameters", step)
                diverged = True
                break
            last_good = params.copy()
            loss_rows.append({
                "step": step,
                "L_rec": combined.rec,
                "L_intra": combined.intra,
                "L_inter": combined.inter,
                "beta": combined.beta,
                "L_total": combined.total,
            })
            adam_step(params, tape, state, train_cfg)
        if diverged:
            break

        proj_all = model_mod.project_batch(params, item_matrix_src)
        val = _validation_ndcg(params, corpus, proj_all, split_spec, bank,
                               train_cfg, epoch, train_cfg.val_cutoff)
        val_history.append(val)
        if val > best_val:
            best_val = val
            best_params = params.copy()
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    if diverged and best_epoch < 0:
        best_params = last_good
        best_epoch = 0
    elif best_epoch < 0:
        best_params = params.copy()
        best_epoch = 0

    # Final pattern bank, extracted from the parameters that will be shipped.
    final_bank = _extract_bank(best_params, corpus, item_matrix_src, split_spec,
                               train_cfg.fusion_k,
                               (train_cfg.seed, _STREAM_BANK, train_cfg.epochs))
    return TrainResult(
        params=best_params,
        bank=final_bank,
        loss_rows=loss_rows,
        val_history=val_history,
        best_epoch=best_epoch,
        diverged=diverged,
        skipped_users=skipped_users,
    )


def write_loss_log(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,L_rec,L_intra,L_inter,beta,L_total\n")
        for r in rows:
            fh.write(f"{r['step']},{r['L_rec']!r},{r['L_intra']!r},{r['L_inter']!r},"
                     f"{r['beta']!r},{r['L_total']!r}\n")
