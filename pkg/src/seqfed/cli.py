"""Command line: run | eval | perturb | synth."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .client import perturb_sequence
from .data import load_corpus, save_corpus, synth_corpus
from .errors import ConfigError
from .evaluation import evaluate, write_metrics_csv
from .messages import UploadMessage, encode_upload
from .models import build_model, load_checkpoint, save_checkpoint
from .protocol import MODE_ALIASES, ProtocolConfig, run

log = logging.getLogger("seqfed")


def _corpus_for(cfg: ProtocolConfig):
    if cfg.corpus:
        return load_corpus(cfg.corpus)
    return synth_corpus(cfg.synth_users, cfg.synth_items, seed=cfg.seed, max_len=cfg.max_seq_len)


def write_outputs(result, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.ndjson", "w", encoding="utf-8", newline="\n") as fh:
        for rep in result.reports:
            fh.write(rep.to_json() + "\n")
    with open(out / "comm.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "round", "direction", "user", "bytes"])
        w.writerows(result.ledger.csv_rows())
    write_metrics_csv(result.evaluations, out / "metrics.csv")
    save_checkpoint(result.final_model, out / "model.ckpt")


def cmd_run(args) -> int:
    cfg = ProtocolConfig.from_json(args.config) if args.config else ProtocolConfig()
    overrides = {}
    if args.mode:
        overrides["mode"] = MODE_ALIASES.get(args.mode, args.mode)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = dataclasses.replace(cfg, **overrides).validate()
    corpus = _corpus_for(cfg)
    result = run(corpus, cfg)
    if result.final_model is None:
        # local-only has no global model; keep client 0's for the record
        result.model = result.clients[min(result.clients)].model
    write_outputs(result, Path(args.out))
    last = result.reports[-1].metrics if result.reports else None
    print(json.dumps({"mode": cfg.mode, "rounds": len(result.reports), "metrics": last}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    res = evaluate(model, corpus, k=args.k, split=args.split, mode="checkpoint")
    print(json.dumps(res.as_row(), sort_keys=True))
    return 0


def cmd_perturb(args) -> int:
    """Perturb every training sequence with an untrained client model and
    print the uploads (one JSON object per user)."""
    corpus = load_corpus(args.corpus)
    cfg = ProtocolConfig(seed=args.seed)
    model = build_model(cfg.client_model_config(corpus.num_items), args.seed)
    for seq in corpus.sequences:
        rng = np.random.default_rng([args.seed, seq.user, 0xD9])
        pool = np.array(sorted(seq.trained_items), dtype=np.int64)
        items, positions = perturb_sequence(model, seq.items, pool, args.beta, args.eps, rng)
        msg = UploadMessage(seq.user, 0, items)
        row = {"user": seq.user, "items": list(msg.items), "replaced": positions.tolist(), "bytes": len(encode_upload(msg))}
        print(json.dumps(row))
    return 0


def cmd_synth(args) -> int:
    corpus = synth_corpus(args.users, args.items, seed=args.seed, max_len=args.max_len)
    save_corpus(corpus, args.out)
    print(json.dumps({"users": corpus.num_users, "items": corpus.num_items, "out": str(args.out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqfed", description="Sequence-exchange federated recommender simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a protocol and write report.ndjson, comm.csv, metrics.csv, model.ckpt")
    r.add_argument("--config", type=Path)
    r.add_argument("--mode", choices=sorted(MODE_ALIASES))
    r.add_argument("--seed", type=int)
    r.add_argument("--out", type=Path, default=Path("out"))
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus cache")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--corpus", type=Path, required=True)
    e.add_argument("--k", type=int, default=20)
    e.add_argument("--split", choices=["val", "test"], default="test")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("perturb", help="exponential-mechanism perturbation of a corpus")
    d.add_argument("--corpus", type=Path, required=True)
    d.add_argument("--beta", type=float, required=True)
    d.add_argument("--eps", type=float, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_perturb)

    s = sub.add_parser("synth", help="write a synthetic Markov corpus")
    s.add_argument("--users", type=int, required=True)
    s.add_argument("--items", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-len", type=int, default=20)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
