import csv
import json

from seqfed.cli import main
from seqfed.data import load_corpus

FAST = {
    "global_rounds": 2,
    "subround_size": 8,
    "server_dim": 8,
    "server_layers": 1,
    "client_epochs": 1,
    "server_epochs": 1,
    "synth_users": 16,
    "synth_items": 12,
    "eval_k": 5,
}


def write_config(tmp_path, **extra):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**FAST, **extra}))
    return p


class TestRun:
    def test_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
        lines = (out / "report.ndjson").read_text().splitlines()
        assert len(lines) == 2 and json.loads(lines[0])["round"] == 0
        with open(out / "comm.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["direction"] for r in rows} == {"up", "down"}
        assert (out / "model.ckpt").stat().st_size > 0
        assert (out / "metrics.csv").read_text().startswith("mode,round,k,hr,ndcg,users")
        assert json.loads(capsys.readouterr().out)["rounds"] == 2

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = str(write_config(tmp_path))
        for name in ("a", "b"):
            assert main(["run", "--config", cfg, "--seed", "3", "--out", str(tmp_path / name)]) == 0
        for f in ("report.ndjson", "model.ckpt", "comm.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_modes(self, tmp_path):
        cfg = str(write_config(tmp_path))
        for mode in ("fedavg", "local"):
            assert main(["run", "--config", cfg, "--mode", mode, "--out", str(tmp_path / mode)]) == 0

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, momentum=0.9)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
        assert "momentum" in capsys.readouterr().err


class TestTools:
    def test_synth_eval_perturb(self, tmp_path, capsys):
        corpus_path = tmp_path / "c.bin"
        assert main(["synth", "--users", "10", "--items", "12", "--seed", "1", "--out", str(corpus_path)]) == 0
        assert load_corpus(corpus_path).num_users == 10
        capsys.readouterr()

        out = tmp_path / "run"
        cfg = write_config(tmp_path, corpus=str(corpus_path))
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        capsys.readouterr()

        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--corpus", str(corpus_path), "--k", "5"]) == 0
        row = json.loads(capsys.readouterr().out)
        assert row["users"] == 10 and 0 <= row["ndcg"] <= row["hr"] <= 1

        assert main(["perturb", "--corpus", str(corpus_path), "--beta", "0.5", "--eps", "1.0"]) == 0
        rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
        corpus = load_corpus(corpus_path)
        assert len(rows) == 10
        for r, s in zip(rows, corpus.sequences):
            assert len(r["items"]) == len(s.items)
            assert len(r["replaced"]) == -(-len(s.items) // 2)
            assert r["bytes"] == 12 + 4 * len(s.items)
