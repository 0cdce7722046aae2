import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqfed.data import (
    CLUSTER_SIZE,
    WITHIN_CLUSTER_MASS,
    InteractionSequence,
    MarkovSource,
    RawInteraction,
    corpus_bytes,
    corpus_from_bytes,
    load_corpus,
    load_csv,
    negative_pool,
    preprocess,
    sample_negative_block,
    sample_negatives,
    save_corpus,
    synth_corpus,
)
from seqfed.errors import CodecError, InputError, PreprocessingError, SchemaError


def raw_user(user, n, start=0):
    return [RawInteraction(user, f"it{k}", start + k) for k in range(n)]


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("user,item,timestamp\nu1,a,1\nu1,b,2\nu2,a,3\n")
        rows = load_csv(p)
        assert len(rows) == 3
        assert rows[1] == RawInteraction("u1", "b", 2)

    def test_empty_file_warns(self, tmp_path, caplog):
        p = tmp_path / "e.csv"
        p.write_text("")
        with caplog.at_level(logging.WARNING):
            assert load_csv(p) == []
        assert "empty" in caplog.text

    def test_bad_timestamp_names_line(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text("user,item,timestamp\nu1,a,1\nu1,b,soon\n")
        with pytest.raises(SchemaError, match=":3:"):
            load_csv(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("user,item\nu1,a\n")
        with pytest.raises(SchemaError, match="timestamp"):
            load_csv(p)

    def test_custom_columns(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("uid,sku,ts\nx,y,5\n")
        assert load_csv(p, "uid", "sku", "ts") == [RawInteraction("x", "y", 5)]

    def test_unreadable(self, tmp_path):
        with pytest.raises(OSError):
            load_csv(tmp_path / "missing.csv")


class TestPreprocess:
    def test_short_user_dropped(self):
        c = preprocess(raw_user("a", 4) + raw_user("b", 5))
        assert c.user_ids == ["b"]

    def test_long_user_truncated(self):
        c = preprocess(raw_user("a", 25))
        s = c.sequences[0]
        assert len(s.items) == 18
        assert c.item_ids[s.items[0]] == "it5"
        assert c.item_ids[s.val_item] == "it23" and c.item_ids[s.test_item] == "it24"

    def test_boundary_five(self):
        s = preprocess(raw_user("a", 5)).sequences[0]
        assert (len(s.items), s.val_item, s.test_item) == (3, 4, 5)

    def test_no_survivors(self):
        with pytest.raises(PreprocessingError):
            preprocess(raw_user("a", 2))

    def test_chronological_sort_with_file_order_ties(self):
        rows = [
            RawInteraction("a", "late", 9),
            RawInteraction("a", "tie1", 1),
            RawInteraction("a", "tie2", 1),
            RawInteraction("a", "mid", 5),
            RawInteraction("a", "early", 0),
        ]
        c = preprocess(rows)
        s = c.sequences[0]
        names = [c.item_ids[i] for i in s.items + [s.val_item, s.test_item]]
        assert names == ["early", "tie1", "tie2", "mid", "late"]

    def test_dense_ids(self):
        c = preprocess(raw_user("a", 6) + raw_user("b", 7, start=100))
        assert c.item_ids[0] == "<pad>"
        assert c.num_items == 7
        for name in c.item_ids[1:]:
            assert c.item_ids[c.item_index(name)] == name
        assert c.user_ids[c.user_index("b")] == "b"

    def test_idempotent(self):
        c = synth_corpus(30, 20, seed=2)
        again = preprocess(c.to_raw())
        c.item_cluster = None
        assert corpus_bytes(again) == corpus_bytes(c)

    def test_trained_items_start_as_items(self):
        s = preprocess(raw_user("a", 6)).sequences[0]
        assert s.trained_items == set(s.items)


class TestNegatives:
    def test_forced(self):
        seq = InteractionSequence(0, [1], 2, 2)
        assert sample_negatives(seq, 0, 1, np.random.default_rng(0), 3) == [3]

    def test_never_interacted(self):
        seq = InteractionSequence(0, [1, 4, 7], 2, 9)
        rng = np.random.default_rng(0)
        draws = sample_negative_block(seq, 10_000, 1, rng, 12)
        assert not set(np.unique(draws)) & seq.interacted
        assert set(np.unique(draws)) == {3, 5, 6, 8, 10, 11, 12}

    def test_grows_trained_items(self):
        seq = InteractionSequence(0, [1, 2], 3, 4)
        out = sample_negatives(seq, 0, 2, np.random.default_rng(1), 10)
        assert len(set(out)) == 2
        assert set(out) <= seq.trained_items
        assert seq.trained_items >= {1, 2}

    def test_infeasible(self):
        seq = InteractionSequence(0, [1, 2], 3, 4)
        with pytest.raises(InputError):
            sample_negatives(seq, 0, 2, np.random.default_rng(0), 5)

    def test_heldout_hidden_pool(self):
        seq = InteractionSequence(0, [1, 2], 3, 4)
        assert negative_pool(seq, 5).tolist() == [5]
        assert negative_pool(seq, 5, heldout_visible=False).tolist() == [3, 4, 5]


class TestSynth:
    def test_deterministic(self):
        assert corpus_bytes(synth_corpus(40, 30, seed=5)) == corpus_bytes(synth_corpus(40, 30, seed=5))

    def test_all_users_survive(self):
        c = synth_corpus(100, 20, seed=1)
        assert c.num_users == 100
        assert all(3 <= len(s.items) <= 18 for s in c.sequences)

    def test_lengths_cover_range(self):
        c = synth_corpus(400, 20, seed=1)
        lengths = {len(s.items) for s in c.sequences}
        assert min(lengths) == 3 and max(lengths) == 18

    def test_within_cluster_frequency(self):
        src = MarkovSource(50, seed=3)
        rng = np.random.default_rng(0)
        walk = np.array(src.sample(100_001, rng))
        same = src.cluster[walk[:-1]] == src.cluster[walk[1:]]
        assert abs(same.mean() - WITHIN_CLUSTER_MASS) < 0.02

    def test_rows_are_distributions(self):
        src = MarkovSource(30, seed=0)
        assert np.allclose(src.transition[1:].sum(axis=1), 1.0)
        assert np.all(np.diag(src.transition)[1:] == 0)
        assert len(set(src.cluster[1:])) == 30 // CLUSTER_SIZE

    def test_needs_ten_items(self):
        with pytest.raises(InputError):
            synth_corpus(5, 9)


class TestCorpusCache:
    def test_roundtrip(self, tmp_path):
        c = synth_corpus(25, 15, seed=9)
        p = tmp_path / "c.bin"
        save_corpus(c, p)
        back = load_corpus(p)
        assert corpus_bytes(back) == corpus_bytes(c)
        assert np.array_equal(back.item_cluster, c.item_cluster)
        assert [s.items for s in back.sequences] == [s.items for s in c.sequences]

    def test_corrupt(self):
        blob = corpus_bytes(synth_corpus(5, 10, seed=0))
        with pytest.raises(CodecError):
            corpus_from_bytes(blob[:-3])
        with pytest.raises(CodecError):
            corpus_from_bytes(b"NOPE" + blob[4:])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 9), st.integers(0, 50)), min_size=5, max_size=80))
def test_preprocess_properties(events):
    raw = [RawInteraction(f"u{u}", f"i{i}", t) for u, i, t in events]
    try:
        c = preprocess(raw)
    except PreprocessingError:
        assert all(sum(1 for e in events if e[0] == u) < 5 for u in range(5))
        return
    for s in c.sequences:
        assert 3 <= len(s.items) <= 18
        assert all(1 <= i <= c.num_items for i in s.items + [s.val_item, s.test_item])
    again = preprocess(c.to_raw())
    assert [s.items for s in again.sequences] == [s.items for s in c.sequences]


class TestDrawPadded:
    def test_short_pool_pads_with_zero(self):
        from seqfed.data import draw_padded

        out = draw_padded(np.array([7]), 4, 3, np.random.default_rng(0))
        assert out.shape == (4, 3)
        assert np.all(out[:, 0] == 7) and np.all(out[:, 1:] == 0)

    def test_empty_pool(self):
        from seqfed.data import draw_padded

        assert np.all(draw_padded(np.array([], dtype=np.int64), 2, 1, np.random.default_rng(0)) == 0)
