import csv
import logging
import math

import numpy as np
import pytest

from seqfed.data import Corpus, InteractionSequence, synth_corpus
from seqfed.evaluation import (
    EvalResult,
    ablation_grid,
    evaluate,
    ndcg_at,
    target_rank,
    write_metrics_csv,
    write_table_csv,
)
from seqfed.models import ModelConfig, build_model, client_preset
from seqfed.protocol import ProtocolConfig


class TestRank:
    def test_first(self):
        assert target_rank(np.array([0.1, 0.9, 0.3]), 2) == 1
        assert ndcg_at(1, 20) == 1.0

    def test_fourth(self):
        assert target_rank(np.array([5.0, 4.0, 3.0, 2.0, 1.0]), 4) == 4
        assert abs(ndcg_at(4, 20) - 0.43067655807339306) < 1e-12

    def test_exclusion(self):
        scores = np.array([5.0, 4.0, 3.0, 2.0])
        assert target_rank(scores, 4, excluded={1, 2}) == 2

    def test_target_competes_even_if_excluded(self):
        assert target_rank(np.array([5.0, 4.0]), 1, excluded={1}) == 1

    def test_ties_smaller_id_first(self):
        scores = np.zeros(6)
        assert target_rank(scores, 4) == 4
        assert target_rank(scores, 4, excluded={1}) == 3

    def test_two_oracles_agree(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scores = rng.integers(0, 5, size=12).astype(float)
            target = int(rng.integers(1, 13))
            excluded = set(rng.choice(np.arange(1, 13), size=4, replace=False).tolist())
            ids = [i for i in range(1, 13) if i not in excluded or i == target]
            order = sorted(ids, key=lambda i: (-scores[i - 1], i))
            assert target_rank(scores, target, excluded) == order.index(target) + 1

    def test_outside_cutoff(self):
        assert ndcg_at(21, 20) == 0.0


def one_user_corpus(items, val, test, num_items):
    return Corpus([InteractionSequence(0, items, val, test)], num_items, ["u"], ["<pad>"] + [f"i{k}" for k in range(1, num_items + 1)])


class TestEvaluate:
    def test_result_bounds_and_readonly(self):
        corpus = synth_corpus(60, 30, seed=1)
        model = build_model(client_preset("sasrec", corpus.num_items), 0)
        before = model.state_vector().copy()
        res = evaluate(model, corpus, k=5)
        assert np.array_equal(before, model.state_vector())
        assert 0 <= res.ndcg_at_k <= res.hr_at_k <= 1
        assert res.num_users == 60

    def test_chance_level(self):
        # random scores: HR@k is about k / (candidates) averaged over users
        corpus = synth_corpus(1000, 60, seed=2)
        rng = np.random.default_rng(0)
        hits, expect, var = 0.0, 0.0, 0.0
        for s in corpus.sequences:
            scores = rng.random(corpus.num_items)
            excluded = set(s.items) | {s.val_item}
            n = corpus.num_items - len(excluded - {s.test_item})
            p = min(1.0, 20 / n)
            hits += target_rank(scores, s.test_item, excluded) <= 20
            expect += p
            var += p * (1 - p)
        assert abs(hits - expect) < 3 * math.sqrt(var)

    def test_val_split_excludes_val_from_context(self):
        corpus = one_user_corpus([1, 2], 3, 4, 6)
        model = build_model(ModelConfig("gru4rec", 4, 4, 1, 5, 6), 0)
        assert evaluate(model, corpus, k=6, split="val").hr_at_k == 1.0
        with pytest.raises(ValueError):
            evaluate(model, corpus, split="train")

    def test_unknown_target_skipped(self, caplog):
        corpus = one_user_corpus([1, 2], 3, 9, 9)
        model = build_model(ModelConfig("gru4rec", 4, 4, 1, 5, 5), 0)
        with caplog.at_level(logging.WARNING):
            res = evaluate(model, corpus, k=5)
        assert res.skipped == 1 and res.num_users == 0
        assert "skipped" in caplog.text

    def test_batched_equals_per_user(self):
        corpus = synth_corpus(40, 25, seed=3)
        model = build_model(client_preset("gru4rec", corpus.num_items), 1)
        batched = evaluate(model, corpus, k=5)
        per_user = evaluate({s.user: model for s in corpus.sequences}, corpus, k=5)
        assert batched.hr_at_k == per_user.hr_at_k
        assert abs(batched.ndcg_at_k - per_user.ndcg_at_k) < 1e-12

    def test_contexts_override(self):
        corpus = synth_corpus(20, 20, seed=0)
        model = build_model(client_preset("sasrec", corpus.num_items), 0)
        same = {s.user: s.items for s in corpus.sequences}
        assert evaluate(model, corpus, k=5, contexts=same) == evaluate(model, corpus, k=5)


class TestGrid:
    def test_one_value_gives_two_rows(self):
        corpus = synth_corpus(12, 15, seed=0)
        cfg = ProtocolConfig(global_rounds=1, subround_size=6, server_dim=8, server_layers=1, client_epochs=1, server_epochs=1)
        rows = ablation_grid(corpus, cfg, "beta", [0.0], k=5)
        assert [r["row"] for r in rows] == ["default", "0.0"]
        assert rows[1]["beta"] == 0.0

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            ablation_grid(None, ProtocolConfig(), "dropout", [1])

    def test_csv_writers(self, tmp_path):
        rows = [{"beta": 0.5, "row": "default", "hr@5": 0.3, "ndcg@5": 0.2, "seeds": 1, "hr_per_seed": [0.3]}]
        write_table_csv(rows, tmp_path / "t.csv", "beta")
        with open(tmp_path / "t.csv") as fh:
            table = list(csv.reader(fh))
        assert table[0][0] == "beta" and "hr_per_seed" not in table[0]
        write_metrics_csv([(EvalResult(0.5, 0.25, 5, 10, "ptf"), 3)], tmp_path / "m.csv")
        with open(tmp_path / "m.csv") as fh:
            assert next(csv.reader(fh)) == ["mode", "round", "k", "hr", "ndcg", "users"]
