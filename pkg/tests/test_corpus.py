import numpy as np
import pytest

from zrcg import corpus as corpus_mod
from zrcg.corpus import (
    EmptyCorpusError,
    ParseError,
    SynthConfig,
    ingest,
    metadata_only_corpus,
    split,
    synthesize,
    synthesize_full,
)

from conftest import dense_interactions, meta_row


def brute_force_filter(events, min_count=10):
    """Independent oracle: iterate the <min_count filter on (user, item) events."""
    events = list(events)
    while True:
        users = {}
        items = {}
        for u, i in events:
            users[u] = users.get(u, 0) + 1
            items[i] = items.get(i, 0) + 1
        kept = [(u, i) for u, i in events if users[u] >= min_count and items[i] >= min_count]
        if len(kept) == len(events):
            return events
        events = kept


class TestIngest:
    def test_user_below_ten_interactions_dropped(self, tmp_corpus_files):
        # 12 anchor users keep the items alive; one user has only 9 events.
        items = [f"i{k}" for k in range(9)]
        anchors = [f"anchor{j}" for j in range(12)]
        rows = dense_interactions(anchors, items + ["filler0", "filler1", "filler2"])
        rows += [(f"weak", items[k], 50_000 + k) for k in range(9)]
        meta = [meta_row(i) for i in items + ["filler0", "filler1", "filler2"]]
        inter, metap = tmp_corpus_files(rows, meta)
        corpus = ingest(inter, metap)
        assert "weak" not in corpus.user_index
        assert corpus.n_users == 12

    def test_empty_input_raises_corpus_empty(self, tmp_corpus_files):
        inter, metap = tmp_corpus_files([], [meta_row("i0")])
        with pytest.raises(EmptyCorpusError):
            ingest(inter, metap)

    def test_shared_items_fixed_point_in_one_pass(self, tmp_corpus_files):
        # 3 users x 12 shared items, each pair seen 4 times: every item gets 12
        # interactions and every user 48, so one filter pass suffices.
        users = ["u0", "u1", "u2"]
        items = [f"i{k}" for k in range(12)]
        rows = dense_interactions(users, items, repeats=4)
        inter, metap = tmp_corpus_files(rows, [meta_row(i) for i in items])
        corpus = ingest(inter, metap)

        expected = brute_force_filter([(u, i) for u, i, _ in rows])
        assert {u for u, _ in expected} == set(corpus.user_index)
        assert {i for _, i in expected} == set(corpus.item_index)
        assert corpus.n_users == 3 and corpus.n_items == 12
        assert corpus.stats.filter_passes == 1
        assert all(len(u.items) == 48 for u in corpus.users)

    def test_cascading_filter_matches_brute_force(self, tmp_corpus_files):
        # An item kept alive only by a user who is himself filtered out must
        # cascade away; the brute-force oracle defines the expected survivors.
        anchors = [f"a{j}" for j in range(11)]
        core = [f"c{k}" for k in range(11)]
        rows = dense_interactions(anchors, core)
        # 'fragile' item is touched 10 times, but only by 'weak' (9 events total
        # elsewhere) and one anchor; dropping 'weak' drops 'fragile' too.
        rows += [("weak", "fragile", 90_000 + t) for t in range(9)]
        rows += [("a0", "fragile", 99_000)]
        meta = [meta_row(i) for i in core + ["fragile"]]
        inter, metap = tmp_corpus_files(rows, meta)
        corpus = ingest(inter, metap)
        expected = brute_force_filter([(u, i) for u, i, _ in rows])
        assert {i for _, i in expected} == set(corpus.item_index)
        assert "fragile" not in corpus.item_index
        assert corpus.stats.filter_passes > 1

    def test_textless_items_dropped(self, tmp_corpus_files):
        items = [f"i{k}" for k in range(11)]
        rows = dense_interactions([f"u{j}" for j in range(11)], items)
        meta = [meta_row(i) for i in items[:-1]]
        meta.append(meta_row(items[-1], title="", features="", description=""))
        inter, metap = tmp_corpus_files(rows, meta)
        corpus = ingest(inter, metap)
        assert items[-1] not in corpus.item_index
        assert corpus.stats.dropped_textless_items == 1

    def test_malformed_tsv_row_reports_line_number(self, tmp_path, tmp_corpus_files):
        inter = tmp_path / "bad.tsv"
        inter.write_text("u0\ti0\t100\nu0\ti0\n", encoding="utf-8")
        _, metap = tmp_corpus_files([], [meta_row("i0")])
        with pytest.raises(ParseError) as err:
            ingest(str(inter), metap)
        assert err.value.line_no == 2

    def test_non_integer_timestamp_is_parse_error(self, tmp_path, tmp_corpus_files):
        inter = tmp_path / "bad.tsv"
        inter.write_text("u0\ti0\tnoon\n", encoding="utf-8")
        _, metap = tmp_corpus_files([], [meta_row("i0")])
        with pytest.raises(ParseError):
            ingest(str(inter), metap)

    def test_duplicate_metadata_id_is_parse_error(self, tmp_corpus_files):
        inter, metap = tmp_corpus_files(
            [("u0", "i0", 1)], [meta_row("i0"), meta_row("i0")])
        with pytest.raises(ParseError):
            ingest(inter, metap)

    def test_sequences_time_ordered_with_stable_ties(self, tmp_corpus_files):
        items = [f"i{k}" for k in range(10)]
        rows = [("u0", items[k], 100) for k in range(10)]  # all tied: file order wins
        rows += dense_interactions([f"pad{j}" for j in range(10)], items)
        inter, metap = tmp_corpus_files(rows, [meta_row(i) for i in items])
        corpus = ingest(inter, metap)
        u0 = corpus.users[corpus.user_index["u0"]]
        assert [corpus.items[i].item_id for i in u0.items] == items

    def test_collapse_duplicates_flag(self, tmp_corpus_files):
        items = [f"i{k}" for k in range(10)]
        rows = []
        ts = 0
        for j in range(11):
            for i in items:
                rows.append((f"u{j}", i, ts)); ts += 1
                rows.append((f"u{j}", i, ts)); ts += 1
        inter, metap = tmp_corpus_files(rows, [meta_row(i) for i in items])
        kept = ingest(inter, metap)
        collapsed = ingest(inter, metap, collapse_duplicates=True)
        assert all(len(u.items) == 20 for u in kept.users)
        assert all(len(u.items) == 10 for u in collapsed.users)
        assert collapsed.stats.collapsed_duplicates == 11 * 10

    def test_refiltering_output_is_fixed_point(self, tmp_path, tmp_corpus_files):
        users = [f"u{j}" for j in range(10)]
        items = [f"i{k}" for k in range(12)]
        rows = dense_interactions(users, items, repeats=1)
        inter, metap = tmp_corpus_files(rows, [meta_row(i) for i in items])
        corpus = ingest(inter, metap)
        # Round-trip the retained corpus through files and re-ingest.
        inter2 = tmp_path / "again.tsv"
        with open(inter2, "w", encoding="utf-8") as fh:
            for u in corpus.users:
                for idx, ts in zip(u.items, u.timestamps):
                    fh.write(f"{u.user_id}\t{corpus.items[idx].item_id}\t{ts}\n")
        again = ingest(str(inter2), metap)
        assert again.to_canonical_json() == corpus.to_canonical_json()
        assert again.stats.filter_passes == 1


class TestSplit:
    def test_four_item_sequence(self):
        result = synthesize_full(SynthConfig(n_items=20, n_users=4, seed=1))
        corpus = result.corpus
        spec = split(corpus)
        for e in spec.entries:
            seq = corpus.users[e.user].items
            assert e.prefix_len == len(seq) - 2
            assert e.val == seq[-2] and e.test == seq[-1]

    def test_explicit_examples(self, tmp_corpus_files):
        # Direct construction: [a,b,c,d] -> prefix [a,b], val c, test d.
        from zrcg.corpus import Corpus, DomainMeta, ItemRecord, UserSequence

        items = [ItemRecord(x, 0, "t") for x in "abcd"]
        users = [
            UserSequence("u4", np.array([0, 1, 2, 3]), np.array([0, 1, 2, 3])),
            UserSequence("u3", np.array([0, 1, 2]), np.array([0, 1, 2])),
            UserSequence("u2", np.array([0, 1]), np.array([0, 1])),
        ]
        corpus = Corpus(items, users, [DomainMeta("A", 4)],
                        {x: i for i, x in enumerate("abcd")},
                        {u.user_id: i for i, u in enumerate(users)}, {"A": 0})
        spec = split(corpus)
        assert spec.skipped == 1
        by_user = {corpus.users[e.user].user_id: e for e in spec.entries}
        e4 = by_user["u4"]
        assert (e4.prefix_len, e4.val, e4.test) == (2, 2, 3)
        e3 = by_user["u3"]
        assert (e3.prefix_len, e3.val, e3.test) == (1, 1, 2)

    def test_count_over_100_users(self):
        result = synthesize_full(SynthConfig(n_items=30, n_users=50, seed=3))
        spec = split(result.corpus)
        assert len(spec.entries) == 100  # 50 users per domain, 2 domains

    def test_partition_property(self):
        result = synthesize_full(SynthConfig(n_items=25, n_users=10, seed=4))
        corpus = result.corpus
        spec = split(corpus)
        for e in spec.entries:
            seq = corpus.users[e.user].items
            rebuilt = np.concatenate([spec.prefix(corpus, e), [e.val, e.test]])
            np.testing.assert_array_equal(rebuilt, seq)


class TestSynthesize:
    def test_zero_bias_centers_close(self):
        cfg = SynthConfig(n_items=400, n_users=2, d_h=32, bias_strength=0.0, seed=5)
        result = synthesize_full(cfg)
        domains = result.corpus.item_domains()
        emb = result.embeddings.astype(np.float64)
        mean_a = emb[domains == 0].mean(axis=0)
        mean_b = emb[domains == 1].mean(axis=0)
        pooled_var = emb.var(axis=0).mean()
        bound = 3.0 * np.sqrt(2.0 * cfg.d_h * pooled_var / cfg.n_items)
        assert np.linalg.norm(mean_a - mean_b) < bound

    def test_same_seed_byte_identical(self):
        cfg = SynthConfig(n_items=30, n_users=10, seed=6)
        a = synthesize_full(cfg)
        b = synthesize_full(cfg)
        assert a.corpus.to_canonical_json() == b.corpus.to_canonical_json()
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
        assert a.interaction_rows == b.interaction_rows

    def test_bias_five_center_distance_dominates(self):
        def center_distance(bias):
            cfg = SynthConfig(n_items=300, n_users=2, d_h=64, bias_strength=bias, seed=7)
            result = synthesize_full(cfg)
            domains = result.corpus.item_domains()
            emb = result.embeddings.astype(np.float64)
            return np.linalg.norm(emb[domains == 0].mean(axis=0) - emb[domains == 1].mean(axis=0))

        assert center_distance(5.0) > 10.0 * center_distance(0.0)

    def test_store_covers_corpus(self):
        corpus, store = synthesize(SynthConfig(n_items=15, n_users=5, seed=8))
        assert store.count == corpus.n_items
        assert all(it.item_id in store.index for it in corpus.items)
        corpus.validate()

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(bias_strength=-1).validate()
        with pytest.raises(ValueError):
            SynthConfig(transition_sharpness=0).validate()


class TestSubsetAndMetadataOnly:
    def test_subset_domains(self):
        result = synthesize_full(SynthConfig(n_items=20, n_users=8, seed=9))
        sub = result.corpus.subset_domains(["A"])
        assert sub.domain_names() == ["A"]
        assert sub.n_items == 20
        assert all(it.item_id.startswith("A_") for it in sub.items)
        assert all(u.user_id.startswith("A_") for u in sub.users)
        sub.validate()

    def test_metadata_only(self, tmp_corpus_files):
        _, metap = tmp_corpus_files([], [meta_row("x1"), meta_row("x2", domain="B")])
        corpus = metadata_only_corpus(metap)
        assert corpus.n_items == 2 and corpus.n_users == 0
        assert corpus.domain_names() == ["A", "B"]

    def test_canonical_roundtrip(self):
        result = synthesize_full(SynthConfig(n_items=10, n_users=4, seed=10))
        text = result.corpus.to_canonical_json()
        again = corpus_mod.Corpus.from_canonical_json(text)
        assert again.to_canonical_json() == text
        assert again.digest() == result.corpus.digest()
