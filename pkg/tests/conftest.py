import json

import numpy as np
import pytest

from zrcg import model, objective, patterns, trainer


def make_instance(seed, encoder="mean-pool", fusion=False, inter_mode="exclude-own",
                  include_self=False, n_domains=2, d_h=6, d_l=3, n_items=8, n_users=3,
                  alpha=0.05, tau=0.3, dtype=np.float64):
    """Small randomized training instance for gradient checking."""
    rng = np.random.default_rng(seed)
    params = model.init_params(d_h, d_l, encoder=encoder, max_seq_len=5, seed=seed).astype(dtype)
    pool_sem = rng.standard_normal((n_items, d_h)).astype(dtype)
    pool_domains = rng.integers(0, n_domains, size=n_items)
    for d in range(n_domains):  # every domain needs at least 2 members
        pool_domains[2 * d] = d
        pool_domains[2 * d + 1] = d
    histories = [rng.integers(0, n_items, size=int(rng.integers(1, 5))) for _ in range(n_users)]
    pos = rng.integers(0, n_items, n_users)
    neg = rng.integers(0, n_items, n_users)
    batch = trainer.make_batch(pool_sem, pool_domains, histories, pos, neg,
                               np.arange(n_items), n_domains, max_seq_len=5)
    gen_cfg = objective.GenLossConfig(
        alpha=alpha, tau=tau, inter_mode=inter_mode, include_self_pairs=include_self,
    ).validate()
    bank = None
    if fusion:
        bank = patterns.PatternBank(
            k=3, centroids=rng.standard_normal((3, d_l)).astype(dtype), inertia=0.0)
    return params, batch, gen_cfg, bank


def finite_difference_gradients(params, batch, gen_cfg, bank=None, h=1e-5):
    """Central finite differences of the total loss for every parameter."""
    out = {}
    for name, arr in params.tensors.items():
        fd = np.zeros_like(arr)
        flat, fdf = arr.ravel(), fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = trainer.batch_loss(params, batch, gen_cfg, bank=bank).total
            flat[i] = orig - h
            lm = trainer.batch_loss(params, batch, gen_cfg, bank=bank).total
            flat[i] = orig
            fdf[i] = (lp - lm) / (2 * h)
        out[name] = fd
    return out


def max_relative_error(a, b, floor=1e-8):
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture
def tmp_corpus_files(tmp_path):
    """Writes (interactions.tsv, metadata.jsonl) from row lists."""

    def _write(interactions, metadata):
        inter = tmp_path / "interactions.tsv"
        meta = tmp_path / "metadata.jsonl"
        with open(inter, "w", encoding="utf-8") as fh:
            for user, item, ts in interactions:
                fh.write(f"{user}\t{item}\t{ts}\n")
        with open(meta, "w", encoding="utf-8") as fh:
            for row in metadata:
                fh.write(json.dumps(row) + "\n")
        return str(inter), str(meta)

    return _write


def meta_row(item_id, domain="A", title=None, features="f", description="d"):
    return {
        "item_id": item_id,
        "domain": domain,
        "title": title if title is not None else f"Item {item_id}",
        "features": features,
        "description": description,
    }


def dense_interactions(user_ids, item_ids, repeats=1, start_ts=1000):
    """Every user interacts with every item ``repeats`` times, time-ordered."""
    rows = []
    ts = start_ts
    for user in user_ids:
        for r in range(repeats):
            for item in item_ids:
                rows.append((user, item, ts))
                ts += 1
    return rows
