"""Interaction corpora: ingestion, leave-one-out splitting, synthesis.

A :class:`Corpus` is immutable after construction and holds interned users,
items and domains plus time-ordered per-user item sequences. Input formats:

* interactions: UTF-8 TSV with columns ``user_id TAB item_id TAB timestamp``
  (int64 seconds);
* item metadata: JSON Lines, one object per item with keys ``item_id``,
  ``domain``, ``title``, ``features``, ``description``.

Item text is assembled with a fixed template so that downstream embedding
runs are reproducible. Items whose title, features and description are all
empty are treated as text-less and dropped. Users and items with fewer than
ten interactions are removed, iterating to a fixed point because removing an
item can push a user below the threshold (and vice versa).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

MIN_INTERACTIONS = 10
TEXT_TEMPLATE = "Title: {title}. Features: {features}. Description: {description}."

# Raw-embedding geometry: item = topic prototype + domain offset + noise, all
# times a per-item scale. Topics come in close pairs (a shared parent
# direction plus a smaller child component), so neighbouring topics are hard
# to tell apart from raw embeddings even though the sequence dynamics treat
# them as distinct; per-item scales model varying metadata richness.
_SYNTH_TOPIC_SCALE = 1.0
_SYNTH_CHILD_SCALE = 0.45   # sub-topic separation relative to the parent
_SYNTH_NOISE = 0.2
_SYNTH_SCALE_SPREAD = 2.0   # per-item embedding norms vary in [1/S, S], log-uniform
_SYNTH_MIN_LEN = 12
_SYNTH_MAX_LEN = 20
_SYNTH_TS_BASE = 1_600_000_000


class CorpusError(Exception):
    """Base class for corpus construction failures."""


class ParseError(CorpusError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class EmptyCorpusError(CorpusError):
    def __init__(self, message="corpus-empty: no users or items survived filtering"):
        super().__init__(message)


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    domain: int
    text: str


@dataclass(frozen=True)
class DomainMeta:
    name: str
    n_items: int


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    items: np.ndarray      # int64 item indices, time order
    timestamps: np.ndarray  # int64 seconds


@dataclass
class IngestStats:
    filter_passes: int = 0
    dropped_textless_items: int = 0
    dropped_unknown_item_events: int = 0
    dropped_users: int = 0
    dropped_items: int = 0
    collapsed_duplicates: int = 0


@dataclass
class Corpus:
    items: list
    users: list
    domains: list
    item_index: dict
    user_index: dict
    domain_index: dict
    stats: IngestStats = field(default_factory=IngestStats)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_users(self):
        return len(self.users)

    def item_domains(self):
        """Domain index of every item, as an int64 array."""
        return np.asarray([it.domain for it in self.items], dtype=np.int64)

    def item_ids(self):
        return [it.item_id for it in self.items]

    def domain_names(self):
        return [d.name for d in self.domains]

    def validate(self):
        n = self.n_items
        for u in self.users:
            if len(u.items) == 0:
                raise CorpusError(f"user {u.user_id} has an empty sequence")
            if u.items.min() < 0 or u.items.max() >= n:
                raise CorpusError(f"user {u.user_id} references an unknown item index")
            if np.any(np.diff(u.timestamps) < 0):
                raise CorpusError(f"user {u.user_id} is not time-ordered")
        for it in self.items:
            if not it.text:
                raise CorpusError(f"item {it.item_id} has empty text")
            if not (0 <= it.domain < len(self.domains)):
                raise CorpusError(f"item {it.item_id} has an unknown domain index")
        return self

    def to_canonical_json(self):
        """Deterministic JSON serialization used for hashing and corpus.json."""
        doc = {
            "domains": self.domain_names(),
            "items": [
                {"id": it.item_id, "domain": self.domains[it.domain].name, "text": it.text}
                for it in self.items
            ],
            "users": [
                {
                    "id": u.user_id,
                    "items": [int(i) for i in u.items],
                    "timestamps": [int(t) for t in u.timestamps],
                }
                for u in self.users
            ],
        }
        return json.dumps(doc, separators=(",", ":"), ensure_ascii=True)

    def digest(self):
        """SHA-256 hex digest of the canonical serialization."""
        return hashlib.sha256(self.to_canonical_json().encode("ascii")).hexdigest()

    @staticmethod
    def from_canonical_json(text):
        doc = json.loads(text)
        domain_names = list(doc["domains"])
        domain_index = {d: i for i, d in enumerate(domain_names)}
        items = [
            ItemRecord(o["id"], domain_index[o["domain"]], o["text"]) for o in doc["items"]
        ]
        users = [
            UserSequence(
                o["id"],
                np.asarray(o["items"], dtype=np.int64),
                np.asarray(o["timestamps"], dtype=np.int64),
            )
            for o in doc["users"]
        ]
        counts = np.zeros(len(domain_names), dtype=np.int64)
        for it in items:
            counts[it.domain] += 1
        domains = [DomainMeta(d, int(counts[i])) for i, d in enumerate(domain_names)]
        return Corpus(
            items=items,
            users=users,
            domains=domains,
            item_index={it.item_id: i for i, it in enumerate(items)},
            user_index={u.user_id: i for i, u in enumerate(users)},
            domain_index=domain_index,
        ).validate()

    def subset_domains(self, names):
        """Restrict to the given domains.

        Keeps items in the named domains and users whose entire history lies
        in the kept item set; indices are re-interned densely, preserving
        original order. Item and user identifier strings are unchanged.
        """
        keep_domains = set(names)
        unknown = keep_domains - set(self.domain_names())
        if unknown:
            raise CorpusError(f"unknown domains: {sorted(unknown)}")
        old_names = self.domain_names()
        new_domain_names = [d for d in old_names if d in keep_domains]
        new_domain_index = {d: i for i, d in enumerate(new_domain_names)}
        item_map = {}
        new_items = []
        for old_idx, it in enumerate(self.items):
            if old_names[it.domain] in keep_domains:
                item_map[old_idx] = len(new_items)
                new_items.append(
                    ItemRecord(it.item_id, new_domain_index[old_names[it.domain]], it.text)
                )
        new_users = []
        for u in self.users:
            if all(int(i) in item_map for i in u.items):
                new_users.append(
                    UserSequence(
                        u.user_id,
                        np.asarray([item_map[int(i)] for i in u.items], dtype=np.int64),
                        u.timestamps.copy(),
                    )
                )
        counts = np.zeros(len(new_domain_names), dtype=np.int64)
        for it in new_items:
            counts[it.domain] += 1
        return Corpus(
            items=new_items,
            users=new_users,
            domains=[DomainMeta(d, int(counts[i])) for i, d in enumerate(new_domain_names)],
            item_index={it.item_id: i for i, it in enumerate(new_items)},
            user_index={u.user_id: i for i, u in enumerate(new_users)},
            domain_index=new_domain_index,
        )


@dataclass(frozen=True)
class SplitEntry:
    user: int        # user index into corpus.users
    prefix_len: int  # training prefix length (sequence minus val and test)
    val: int         # item index
    test: int        # item index


@dataclass
class SplitSpec:
    entries: list
    skipped: int  # users excluded because their sequence is shorter than 3

    def prefix(self, corpus, entry):
        return corpus.users[entry.user].items[: entry.prefix_len]

    def manifest_rows(self, corpus):
        for e in self.entries:
            yield {
                "user": corpus.users[e.user].user_id,
                "prefix_len": e.prefix_len,
                "val": corpus.items[e.val].item_id,
                "test": corpus.items[e.test].item_id,
            }


def split(corpus):
    """Leave-one-out split: last item is test, penultimate is validation.

    Users with fewer than three interactions cannot be split and are counted
    in ``skipped``.
    """
    entries = []
    skipped = 0
    for idx, u in enumerate(corpus.users):
        if len(u.items) < 3:
            skipped += 1
            continue
        entries.append(
            SplitEntry(
                user=idx,
                prefix_len=len(u.items) - 2,
                val=int(u.items[-2]),
                test=int(u.items[-1]),
            )
        )
    return SplitSpec(entries=entries, skipped=skipped)


def format_item_text(title, features, description):
    return TEXT_TEMPLATE.format(
        title=title or "", features=features or "", description=description or ""
    )


def _read_metadata(path):
    """Returns (records, dropped_textless). Records keep file order."""
    records = []
    seen = set()
    dropped_textless = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ParseError(path, line_no, "metadata row is not an object")
            item_id = obj.get("item_id")
            domain = obj.get("domain")
            if not isinstance(item_id, str) or not item_id:
                raise ParseError(path, line_no, "missing or invalid item_id")
            if not isinstance(domain, str) or not domain:
                raise ParseError(path, line_no, "missing or invalid domain")
            if item_id in seen:
                raise ParseError(path, line_no, f"duplicate item_id {item_id!r}")
            seen.add(item_id)
            title = obj.get("title", "") or ""
            features = obj.get("features", "") or ""
            description = obj.get("description", "") or ""
            if not (title.strip() or features.strip() or description.strip()):
                dropped_textless += 1
                continue
            records.append((item_id, domain, format_item_text(title, features, description)))
    return records, dropped_textless


def _read_interactions(path):
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            row = line.rstrip("\n").rstrip("\r")
            if not row:
                continue
            parts = row.split("\t")
            if len(parts) != 3:
                raise ParseError(path, line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            user_id, item_id, ts_raw = parts
            if not user_id or not item_id:
                raise ParseError(path, line_no, "empty user_id or item_id")
            try:
                ts = int(ts_raw)
            except ValueError:
                raise ParseError(path, line_no, f"timestamp is not an integer: {ts_raw!r}") from None
            events.append((user_id, item_id, ts, line_no))
    return events


def ingest(interactions_path, metadata_path, collapse_duplicates=False):
    """Build a corpus from raw interaction and metadata files.

    Items without text are dropped first; then users and items with fewer
    than ten interactions are removed, iterating until nothing changes.
    Each user's events are stable-sorted by (timestamp, file order).
    ``collapse_duplicates`` merges consecutive repeats of the same item
    within a user's timeline before filtering (off by default: repeats are
    genuine interactions).
    """
    stats = IngestStats()
    records, stats.dropped_textless_items = _read_metadata(metadata_path)
    meta_by_id = {item_id: (domain, text) for item_id, domain, text in records}
    events = _read_interactions(interactions_path)

    known = [e for e in events if e[1] in meta_by_id]
    stats.dropped_unknown_item_events = len(events) - len(known)
    events = known

    if collapse_duplicates:
        by_user = {}
        for e in events:
            by_user.setdefault(e[0], []).append(e)
        collapsed = []
        for user_events in by_user.values():
            user_events.sort(key=lambda e: (e[2], e[3]))
            prev_item = None
            for e in user_events:
                if e[1] == prev_item:
                    stats.collapsed_duplicates += 1
                    continue
                collapsed.append(e)
                prev_item = e[1]
        collapsed.sort(key=lambda e: e[3])  # restore file order for interning
        events = collapsed

    # Iterate the <MIN_INTERACTIONS filter to a fixed point.
    all_users = {e[0] for e in events}
    all_items = {e[1] for e in events}
    while True:
        stats.filter_passes += 1
        user_counts = {}
        item_counts = {}
        for user_id, item_id, _, _ in events:
            user_counts[user_id] = user_counts.get(user_id, 0) + 1
            item_counts[item_id] = item_counts.get(item_id, 0) + 1
        keep_users = {u for u, c in user_counts.items() if c >= MIN_INTERACTIONS}
        keep_items = {i for i, c in item_counts.items() if c >= MIN_INTERACTIONS}
        filtered = [e for e in events if e[0] in keep_users and e[1] in keep_items]
        if len(filtered) == len(events):
            break
        events = filtered
    stats.dropped_users = len(all_users) - len({e[0] for e in events})
    stats.dropped_items = len(all_items) - len({e[1] for e in events})

    if not events:
        raise EmptyCorpusError()

    # Intern: items by metadata file order, users by first appearance in the
    # interaction file, domains by first appearance among retained items.
    kept_item_ids = {e[1] for e in events}
    item_ids = [item_id for item_id, _, _ in records if item_id in kept_item_ids]
    domain_index = {}
    items = []
    for item_id in item_ids:
        domain_name, text = meta_by_id[item_id]
        if domain_name not in domain_index:
            domain_index[domain_name] = len(domain_index)
        items.append(ItemRecord(item_id, domain_index[domain_name], text))
    item_index = {it.item_id: i for i, it in enumerate(items)}

    user_order = []
    seen_users = set()
    per_user = {}
    for e in events:
        if e[0] not in seen_users:
            seen_users.add(e[0])
            user_order.append(e[0])
        per_user.setdefault(e[0], []).append(e)

    users = []
    for user_id in user_order:
        ue = sorted(per_user[user_id], key=lambda e: (e[2], e[3]))
        users.append(
            UserSequence(
                user_id,
                np.asarray([item_index[e[1]] for e in ue], dtype=np.int64),
                np.asarray([e[2] for e in ue], dtype=np.int64),
            )
        )

    counts = np.zeros(len(domain_index), dtype=np.int64)
    for it in items:
        counts[it.domain] += 1
    domains = [DomainMeta(name, int(counts[i])) for name, i in domain_index.items()]
    corpus = Corpus(
        items=items,
        users=users,
        domains=domains,
        item_index=item_index,
        user_index={u.user_id: i for i, u in enumerate(users)},
        domain_index=domain_index,
        stats=stats,
    )
    return corpus.validate()


def metadata_only_corpus(metadata_path):
    """Items-only corpus from a metadata file (no interactions, no users).

    Used where only item embeddings and domain labels are needed: the
    generalization-loss item pool and embedding diagnostics.
    """
    records, dropped = _read_metadata(metadata_path)
    if not records:
        raise EmptyCorpusError("corpus-empty: metadata file has no usable items")
    domain_index = {}
    items = []
    for item_id, domain_name, text in records:
        if domain_name not in domain_index:
            domain_index[domain_name] = len(domain_index)
        items.append(ItemRecord(item_id, domain_index[domain_name], text))
    counts = np.zeros(len(domain_index), dtype=np.int64)
    for it in items:
        counts[it.domain] += 1
    stats = IngestStats(dropped_textless_items=dropped)
    return Corpus(
        items=items,
        users=[],
        domains=[DomainMeta(name, int(counts[i])) for name, i in domain_index.items()],
        item_index={it.item_id: i for i, it in enumerate(items)},
        user_index={},
        domain_index=domain_index,
        stats=stats,
    ).validate()


# ---------------------------------------------------------------------------
# Synthetic two-domain benchmark corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 200          # per domain
    n_users: int = 300          # per domain
    d_h: int = 64
    bias_strength: float = 1.0  # norm of the per-domain embedding offset
    n_latent_topics: int = 8
    transition_sharpness: float = 3.0
    seed: int = 0

    def validate(self):
        if self.n_items < 1 or self.n_users < 1:
            raise ValueError("n_items and n_users must be positive")
        if self.d_h < 2:
            raise ValueError("d_h must be at least 2")
        if self.bias_strength < 0:
            raise ValueError("bias_strength must be non-negative")
        if self.n_latent_topics < 1:
            raise ValueError("n_latent_topics must be positive")
        if self.transition_sharpness <= 0:
            raise ValueError("transition_sharpness must be positive")
        return self


@dataclass
class SynthResult:
    corpus: Corpus
    embeddings: np.ndarray       # (n_items_total, d_h) float32, corpus item order
    metadata_rows: list          # dicts matching the metadata JSONL schema
    interaction_rows: list       # (user_id, item_id, timestamp) tuples


_DOMAIN_NAMES = ("A", "B")


def synthesize_full(config):
    """Generate a deterministic two-domain corpus with latent topic structure.

    Both domains share the same topic prototypes and the same topic-level
    Markov chain; each domain adds a constant offset vector of norm
    ``bias_strength`` to its items' raw embeddings, modelling systematic
    vocabulary differences between domains.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    T = config.n_latent_topics
    d_h = config.d_h

    parents = rng.standard_normal(((T + 1) // 2, d_h))
    parents /= np.linalg.norm(parents, axis=1, keepdims=True)
    children = rng.standard_normal((T, d_h))
    children /= np.linalg.norm(children, axis=1, keepdims=True)
    protos = parents[np.arange(T) // 2] + _SYNTH_CHILD_SCALE * children
    protos *= _SYNTH_TOPIC_SCALE
    trans_logits = config.transition_sharpness * rng.standard_normal((T, T))
    trans_logits -= trans_logits.max(axis=1, keepdims=True)
    trans = np.exp(trans_logits)
    trans /= trans.sum(axis=1, keepdims=True)

    items = []
    metadata_rows = []
    embeddings = []
    items_by_topic = {}
    domain_index = {}
    for d_idx, dname in enumerate(_DOMAIN_NAMES):
        domain_index[dname] = d_idx
        direction = rng.standard_normal(d_h)
        direction /= np.linalg.norm(direction)
        offset = config.bias_strength * direction
        topics = rng.integers(0, T, size=config.n_items)
        noise = rng.standard_normal((config.n_items, d_h)) * _SYNTH_NOISE
        # Per-item scale models varying metadata richness: real text encoders
        # produce embeddings of very different norms for terse vs rich items.
        log_s = np.log(_SYNTH_SCALE_SPREAD)
        scales = np.exp(rng.uniform(-log_s, log_s, size=config.n_items))
        for j in range(config.n_items):
            t = int(topics[j])
            item_id = f"{dname}_i{j:05d}"
            title = f"Item {j} ({dname})"
            features = f"topic-{t}"
            description = f"Synthetic catalog entry {j} in domain {dname}."
            metadata_rows.append(
                {
                    "item_id": item_id,
                    "domain": dname,
                    "title": title,
                    "features": features,
                    "description": description,
                }
            )
            items.append(
                ItemRecord(item_id, d_idx, format_item_text(title, features, description))
            )
            embeddings.append(scales[j] * (protos[t] + offset + noise[j]))
            items_by_topic.setdefault((d_idx, t), []).append(len(items) - 1)

    users = []
    interaction_rows = []
    for d_idx, dname in enumerate(_DOMAIN_NAMES):
        for j in range(config.n_users):
            user_id = f"{dname}_u{j:05d}"
            length = int(rng.integers(_SYNTH_MIN_LEN, _SYNTH_MAX_LEN + 1))
            topic = int(rng.integers(0, T))
            seq = np.empty(length, dtype=np.int64)
            ts = np.empty(length, dtype=np.int64)
            base = _SYNTH_TS_BASE + j * 100_000
            for step in range(length):
                probe = topic
                while (d_idx, probe) not in items_by_topic:
                    probe = (probe + 1) % T
                pool = items_by_topic[(d_idx, probe)]
                seq[step] = pool[int(rng.integers(0, len(pool)))]
                ts[step] = base + step
                topic = int(rng.choice(T, p=trans[topic]))
            users.append(UserSequence(user_id, seq, ts))
            for step in range(length):
                interaction_rows.append(
                    (user_id, items[seq[step]].item_id, int(ts[step]))
                )

    counts = np.zeros(len(_DOMAIN_NAMES), dtype=np.int64)
    for it in items:
        counts[it.domain] += 1
    corpus = Corpus(
        items=items,
        users=users,
        domains=[DomainMeta(n, int(counts[i])) for i, n in enumerate(_DOMAIN_NAMES)],
        item_index={it.item_id: i for i, it in enumerate(items)},
        user_index={u.user_id: i for i, u in enumerate(users)},
        domain_index=domain_index,
    ).validate()
    return SynthResult(
        corpus=corpus,
        embeddings=np.asarray(embeddings, dtype=np.float32),
        metadata_rows=metadata_rows,
        interaction_rows=interaction_rows,
    )


def synthesize(config):
    """Spec-facing wrapper: returns (corpus, semantic store)."""
    from .semstore import SemanticStore

    result = synthesize_full(config)
    store = SemanticStore(
        dim=config.d_h,
        rows=result.embeddings,
        index={it.item_id: i for i, it in enumerate(result.corpus.items)},
    )
    return result.corpus, store


def write_interactions_tsv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for user_id, item_id, ts in rows:
            fh.write(f"{user_id}\t{item_id}\t{ts}\n")


def write_metadata_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":"), ensure_ascii=True) + "\n")


def write_split_manifest(corpus, split_spec, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in split_spec.manifest_rows(corpus):
            fh.write(json.dumps(row, separators=(",", ":"), ensure_ascii=True) + "\n")
