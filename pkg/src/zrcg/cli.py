"""Command-line entry point.

Subcommands mirror the pipeline stages::

    zrcg synth     generate a synthetic two-domain corpus + SEMB embeddings
    zrcg prepare   ingest raw interaction/metadata files, write splits
    zrcg train     train on a source domain, write checkpoint + pattern bank
    zrcg eval      in-domain or zero-shot ranking evaluation
    zrcg analyze   embedding alignment diagnostics + 2-D PCA export
    zrcg semb-info inspect a SEMB embedding file

Configuration is a flat ``key = value`` file (``--config``); command-line
flags override file values. Every command writes a ``manifest.json`` listing
the effective configuration, input hashes, and artifact checksums.

Exit codes: 0 success, 2 parse error, 3 empty corpus after filtering,
4 I/O error, 5 validation error (formats, dimensions, overlap, fingerprints).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import corpus as corpus_mod
from . import evalkit, model as model_mod, patterns as patterns_mod
from . import semstore, trainer as trainer_mod
from .objective import GenLossConfig

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_EMPTY = 3
EXIT_IO = 4
EXIT_VALIDATION = 5


class ConfigError(Exception):
    pass


def load_config_file(path):
    cfg = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            cfg[key.strip()] = value.strip()
    return cfg


def _get(cfg, key, default, cast=str):
    if key not in cfg:
        return default
    raw = cfg[key]
    if cast is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    def __init__(self, command, cfg, seed):
        self.doc = {
            "command": command,
            "config": dict(cfg),
            "seed": seed,
            "inputs": {},
            "artifacts": {},
            "timings": {},
        }
        self._t0 = time.time()

    def add_input(self, path):
        self.doc["inputs"][str(path)] = _sha256(path)

    def add_artifact(self, path):
        self.doc["artifacts"][str(path)] = _sha256(path)

    def write(self, out_dir):
        self.doc["timings"]["total_s"] = round(time.time() - self._t0, 3)
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _ensure_out(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _merged_config(args):
    cfg = {}
    if args.config:
        cfg.update(load_config_file(args.config))
    return cfg


def _seed(args, cfg):
    if args.seed is not None:
        return args.seed
    return _get(cfg, "seed", 0, int)


def _synth_config(cfg, seed):
    return corpus_mod.SynthConfig(
        n_items=_get(cfg, "synth.n_items", 200, int),
        n_users=_get(cfg, "synth.n_users", 300, int),
        d_h=_get(cfg, "synth.d_h", 64, int),
        bias_strength=_get(cfg, "synth.bias_strength", 1.0, float),
        n_latent_topics=_get(cfg, "synth.n_topics", 8, int),
        transition_sharpness=_get(cfg, "synth.sharpness", 3.0, float),
        seed=seed,
    )


def _write_synth(result, store_rows, out_dir, manifest):
    inter = os.path.join(out_dir, "interactions.tsv")
    meta = os.path.join(out_dir, "metadata.jsonl")
    semb = os.path.join(out_dir, "items.semb")
    corpus_mod.write_interactions_tsv(result.interaction_rows, inter)
    corpus_mod.write_metadata_jsonl(result.metadata_rows, meta)
    store = semstore.SemanticStore(
        dim=store_rows.shape[1],
        rows=store_rows,
        index={it.item_id: i for i, it in enumerate(result.corpus.items)},
    )
    semstore.save(store, semb)
    for p in (inter, meta, semb):
        manifest.add_artifact(p)


def cmd_synth(args):
    cfg = _merged_config(args)
    seed = _seed(args, cfg)
    out = _ensure_out(args)
    manifest = Manifest("synth", cfg, seed)
    if args.bias_sweep:
        strengths = [float(s) for s in args.bias_sweep.split(",") if s.strip()]
        for strength in strengths:
            sub = os.path.join(out, f"bias_{strength:g}")
            os.makedirs(sub, exist_ok=True)
            scfg = _synth_config(cfg, seed)
            scfg = corpus_mod.SynthConfig(**{**scfg.__dict__, "bias_strength": strength})
            result = corpus_mod.synthesize_full(scfg)
            _write_synth(result, result.embeddings, sub, manifest)
    else:
        result = corpus_mod.synthesize_full(_synth_config(cfg, seed))
        _write_synth(result, result.embeddings, out, manifest)
    manifest.write(out)
    return EXIT_OK


def cmd_prepare(args):
    cfg = _merged_config(args)
    seed = _seed(args, cfg)
    out = _ensure_out(args)
    manifest = Manifest("prepare", cfg, seed)
    manifest.add_input(args.interactions)
    manifest.add_input(args.metadata)
    corpus = corpus_mod.ingest(args.interactions, args.metadata,
                               collapse_duplicates=args.collapse_duplicates)
    split_spec = corpus_mod.split(corpus)
    corpus_path = os.path.join(out, "corpus.json")
    with open(corpus_path, "w", encoding="utf-8") as fh:
        fh.write(corpus.to_canonical_json())
    splits_path = os.path.join(out, "splits.jsonl")
    corpus_mod.write_split_manifest(corpus, split_spec, splits_path)
    manifest.add_artifact(corpus_path)
    manifest.add_artifact(splits_path)
    manifest.write(out)
    print(f"prepared corpus: {corpus.n_users} users, {corpus.n_items} items, "
          f"{len(corpus.domains)} domains, {split_spec.skipped} users skipped in split")
    return EXIT_OK


def _gen_config(cfg, overrides=None):
    merged = dict(cfg)
    if overrides:
        merged.update(overrides)
    alpha = _get(merged, "gen.alpha", 0.001, float)
    enabled = _get(merged, "gen.enabled", True, bool) and alpha > 0
    gen = GenLossConfig(
        alpha=alpha if alpha > 0 else 0.001,
        tau=_get(merged, "gen.tau", 0.1, float),
        beta_rule=_get(merged, "gen.beta_rule", "scaled"),
        manual_beta=_get(merged, "gen.manual_beta", None, float),
        n_for_beta=_get(merged, "gen.n_for_beta", "batch-items"),
        include_self_pairs=_get(merged, "gen.include_self_pairs", False, bool),
        inter_mode=_get(merged, "gen.inter_mode", "exclude-own"),
        sample_size=_get(merged, "gen.sample_size", 64, int),
        scope=_get(merged, "gen.scope", "metadata"),
        enabled=enabled,
        include_intra=_get(merged, "gen.include_intra", True, bool),
        include_inter=_get(merged, "gen.include_inter", True, bool),
    )
    return gen.validate()


def _train_config(cfg, seed, fusion_enabled):
    tc = trainer_mod.TrainConfig(
        learning_rate=_get(cfg, "train.learning_rate", 1e-3, float),
        batch_size=_get(cfg, "train.batch_size", 128, int),
        epochs=_get(cfg, "train.epochs", 5, int),
        seed=seed,
        grad_clip=_get(cfg, "train.grad_clip", None, float),
        patience=_get(cfg, "train.patience", 5, int),
        fusion_enabled=fusion_enabled,
        fusion_k=_get(cfg, "fusion.k", 32, int),
        fusion_start_frac=_get(cfg, "fusion.start_frac", 0.8, float),
        val_negatives=_get(cfg, "eval.n_negatives", 100, int),
    )
    return tc.validate()


_ABLATIONS = ("ig", "id", "ic", "sg")


def _apply_variant(cfg, variant, ablations):
    """Map the variant/ablation selection onto config overrides."""
    overrides = {}
    fusion = _get(cfg, "fusion.enabled", True, bool)
    label = evalkit.VARIANT_RECG
    if variant == "sem":
        overrides["gen.enabled"] = "false"
        fusion = False
        label = evalkit.VARIANT_SEM
    for ab in ablations:
        if ab == "ig":
            overrides["gen.enabled"] = "false"
        elif ab == "id":
            overrides["gen.include_intra"] = "false"
        elif ab == "ic":
            overrides["gen.include_inter"] = "false"
        elif ab == "sg":
            fusion = False
        label += f" w/o {ab.upper()}"
    return overrides, fusion, label


def _load_source(args):
    corpus = corpus_mod.ingest(args.interactions, args.metadata,
                               collapse_duplicates=getattr(args, "collapse_duplicates", False))
    aux = None
    if args.domain:
        full = corpus
        corpus = full.subset_domains([args.domain])
        other = [d for d in full.domain_names() if d != args.domain]
        if other:
            aux = full.subset_domains(other)
    if getattr(args, "aux_metadata", None):
        aux = corpus_mod.metadata_only_corpus(args.aux_metadata)
    if corpus.n_users == 0 or corpus.n_items == 0:
        raise corpus_mod.EmptyCorpusError()
    return corpus, aux


def cmd_train(args):
    cfg = _merged_config(args)
    seed = _seed(args, cfg)
    out = _ensure_out(args)
    overrides, fusion_enabled, label = _apply_variant(cfg, args.variant, args.ablate or [])
    manifest = Manifest("train", {**cfg, **overrides, "variant": args.variant}, seed)
    for p in (args.interactions, args.metadata, args.semb):
        manifest.add_input(p)
    if args.aux_metadata:
        manifest.add_input(args.aux_metadata)

    source, aux = _load_source(args)
    store = semstore.load(args.semb)
    gen_cfg = _gen_config(cfg, overrides)
    train_cfg = _train_config(cfg, seed, fusion_enabled)
    params = model_mod.init_params(
        d_h=store.dim,
        d_l=_get(cfg, "model.d_l", 32, int),
        encoder=_get(cfg, "model.encoder", model_mod.MEAN_POOL),
        max_seq_len=_get(cfg, "model.max_seq_len", 50, int),
        seed=seed,
    )
    result = trainer_mod.train(source, store, params, train_cfg, gen_cfg,
                               aux_corpus=aux, aux_store=store)
    result.params.meta = {
        "variant": label,
        "source_domain": "+".join(source.domain_names()),
        "corpus_digest": source.digest(),
        "source_item_ids": sorted(source.item_index.keys()),
        "source_user_ids": sorted(source.user_index.keys()),
        "seed": seed,
        "fusion_enabled": fusion_enabled,
        "diverged": result.diverged,
        "best_epoch": result.best_epoch,
    }
    ckpt_path = os.path.join(out, "checkpoint.zrcg")
    model_mod.save_checkpoint(result.params, ckpt_path)
    with open(ckpt_path, "rb") as fh:
        ckpt_bytes = fh.read()
    result.bank.fingerprint = patterns_mod.make_fingerprint(source.digest(), ckpt_bytes)
    bank_path = os.path.join(out, "bank.ptrn")
    patterns_mod.save_bank(result.bank, bank_path)
    log_path = os.path.join(out, "loss_log.csv")
    trainer_mod.write_loss_log(result.loss_rows, log_path)
    for p in (ckpt_path, bank_path, log_path):
        manifest.add_artifact(p)
    manifest.write(out)
    status = "diverged (last good checkpoint kept)" if result.diverged else "ok"
    print(f"trained {label}: {len(result.loss_rows)} steps, best epoch {result.best_epoch}, {status}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _merged_config(args)
    seed = _seed(args, cfg)
    out = _ensure_out(args)
    manifest = Manifest("eval", cfg, seed)
    for p in (args.checkpoint, args.interactions, args.metadata, args.semb):
        manifest.add_input(p)
    if args.bank:
        manifest.add_input(args.bank)
    corpus = corpus_mod.ingest(args.interactions, args.metadata)
    if args.domain:
        corpus = corpus.subset_domains([args.domain])
    store = semstore.load(args.semb)
    eval_cfg = evalkit.EvalConfig(
        cutoffs=tuple(int(k) for k in _get(cfg, "eval.cutoffs", "5,10,20").split(",")),
        n_negatives=_get(cfg, "eval.n_negatives", 100, int),
        n_repeats=_get(cfg, "eval.n_repeats", 5, int),
        seed=seed,
    ).validate()
    fusion = not args.no_fusion
    if args.mode == "zero-shot":
        if fusion and not args.bank:
            raise ConfigError("zero-shot fusion evaluation requires --bank")
        report = evalkit.zero_shot_eval(
            args.checkpoint, args.bank, corpus, store, eval_cfg,
            fusion=fusion, variant=args.label,
        )
    else:
        params = model_mod.load_checkpoint(args.checkpoint)
        bank = patterns_mod.load_bank(args.bank) if (fusion and args.bank) else None
        per_repeat, mean_rows, user_count = evalkit.protocol_eval(
            params, corpus, store, eval_cfg, bank=bank, fusion=fusion and bank is not None)
        report = evalkit.EvalReport(
            variant=args.label or params.meta.get("variant", "?"),
            source_domain=params.meta.get("source_domain", "?"),
            target_domain="+".join(corpus.domain_names()),
            cutoffs=mean_rows,
            per_repeat=per_repeat,
            user_count=user_count,
            repeats=eval_cfg.n_repeats,
            seed=eval_cfg.seed,
            extras={"mode": "in-domain"},
        )
    report_path = os.path.join(out, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    manifest.add_artifact(report_path)
    manifest.write(out)
    for row in report.cutoffs:
        print(f"{report.variant} {report.source_domain}->{report.target_domain} "
              f"R@{row['k']}={row['recall_pct']:.2f}% N@{row['k']}={row['ndcg_pct']:.2f}%")
    return EXIT_OK


def _analyze_one(checkpoint_path, items_corpus, store, seed, out, suffix, manifest):
    params = model_mod.load_checkpoint(checkpoint_path)
    bound = semstore.bind(store, items_corpus)
    projected = model_mod.project_batch(params, bound.matrix())
    domains = items_corpus.item_domains()
    report = evalkit.embedding_diagnostics(projected, domains, seed=seed)
    diag_path = os.path.join(out, f"diagnostics{suffix}.csv")
    evalkit.write_diagnostics_csv(report, diag_path)
    coords = evalkit.pca_2d(projected)
    names = items_corpus.domain_names()
    pca_path = os.path.join(out, f"pca{suffix}.csv")
    evalkit.write_pca_csv(
        [it.item_id for it in items_corpus.items],
        [names[it.domain] for it in items_corpus.items],
        coords, pca_path,
    )
    manifest.add_artifact(diag_path)
    manifest.add_artifact(pca_path)
    return report


def cmd_analyze(args):
    cfg = _merged_config(args)
    seed = _seed(args, cfg)
    out = _ensure_out(args)
    manifest = Manifest("analyze", cfg, seed)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.metadata)
    manifest.add_input(args.semb)
    items_corpus = corpus_mod.metadata_only_corpus(args.metadata)
    store = semstore.load(args.semb)
    report_a = _analyze_one(args.checkpoint, items_corpus, store, seed, out, "", manifest)
    if args.compare:
        manifest.add_input(args.compare)
        report_b = _analyze_one(args.compare, items_corpus, store, seed, out, "_b", manifest)
        side_path = os.path.join(out, "side_by_side.csv")
        with open(side_path, "w", encoding="utf-8") as fh:
            fh.write("metric,value_a,value_b\n")
            for (name, va), (_, vb) in zip(report_a.rows(), report_b.rows()):
                fh.write(f"{name},{va!r},{vb!r}\n")
        manifest.add_artifact(side_path)
    manifest.write(out)
    for name, value in report_a.rows():
        print(f"{name}: {value:.6f}")
    return EXIT_OK


def cmd_semb_info(args):
    store = semstore.load(args.path)
    print(f"SEMB v1: {store.count} rows, dim {store.dim}, checksum ok")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="zrcg",
        description="Zero-shot cross-domain sequential recommendation engine",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numba threading (best effort)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic two-domain corpus")
    common(p)
    p.add_argument("--bias-sweep", default=None,
                   help="comma-separated bias strengths; writes one corpus per value")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="ingest raw files and write split manifest")
    common(p)
    p.add_argument("--interactions", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--collapse-duplicates", action="store_true",
                   help="merge consecutive repeats of the same item per user")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a source corpus")
    common(p)
    p.add_argument("--interactions", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--semb", required=True)
    p.add_argument("--domain", default=None, help="train only on this domain")
    p.add_argument("--aux-metadata", default=None,
                   help="extra metadata whose items join the generalization pool")
    p.add_argument("--variant", choices=("sem", "recg"), default="recg")
    p.add_argument("--ablate", action="append", choices=_ABLATIONS,
                   help="disable one mechanism (repeatable)")
    p.add_argument("--collapse-duplicates", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ranking evaluation")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--interactions", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--semb", required=True)
    p.add_argument("--domain", default=None, help="evaluate only on this domain")
    p.add_argument("--mode", choices=("zero-shot", "in-domain"), default="zero-shot")
    p.add_argument("--no-fusion", action="store_true",
                   help="score with raw user representations (Sem variant)")
    p.add_argument("--label", default=None, help="variant label for the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="embedding diagnostics and PCA export")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--semb", required=True)
    p.add_argument("--compare", default=None, help="second checkpoint for side-by-side")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("semb-info", help="inspect a SEMB file")
    p.add_argument("path")
    p.set_defaults(func=cmd_semb_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        try:
            import numba

            numba.set_num_threads(max(1, args.threads))
        except Exception:
            pass
    try:
        return args.func(args)
    except corpus_mod.ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except corpus_mod.EmptyCorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (semstore.SembError, semstore.UnboundItemsError,
            model_mod.ModelError, patterns_mod.BankError,
            patterns_mod.FingerprintMismatch, evalkit.EvalError,
            corpus_mod.CorpusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
