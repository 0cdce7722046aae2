"""Full-catalogue ranking metrics (HR@k, NDCG@k) and experiment grids."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autograd as ag
from .data import Corpus
from .models import SeqModel, pad_batch

log = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass(frozen=True)
class EvalResult:
    hr_at_k: float
    ndcg_at_k: float
    k: int
    num_users: int
    mode: str = ""
    skipped: int = 0

    def as_row(self, round_: int | None = None) -> dict:
        return {"mode": self.mode, "round": round_, "k": self.k, "hr": self.hr_at_k, "ndcg": self.ndcg_at_k, "users": self.num_users}


def target_rank(scores: np.ndarray, target: int, excluded=()) -> int:
    """1-based rank of ``target`` among items 1..|V| minus ``excluded``.

    ``scores[i]`` belongs to item i+1. The target always competes, even if it
    also appears in ``excluded``. Equal scores rank the smaller id first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    ex = np.asarray(sorted(excluded), dtype=np.int64)
    if ex.size:
        keep[ex - 1] = False
    keep[target - 1] = True
    s = scores[target - 1]
    ids = np.arange(1, len(scores) + 1)
    better = keep & ((scores > s) | ((scores == s) & (ids < target)))
    return 1 + int(better.sum())


def ndcg_at(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def evaluate(
    model,
    corpus: Corpus,
    k: int = 20,
    split: str = "test",
    mode: str = "",
    contexts: Mapping[int, list[int]] | None = None,
) -> EvalResult:
    """Leave-one-out ranking over all items the user has not interacted with.

    ``model`` is a SeqModel, or a mapping user -> SeqModel for per-client
    evaluation. For the test split the validation item is appended to the
    context. ``contexts`` replaces the training part of a user's context (e.g.
    a perturbed upload).
    """
    if split not in ("val", "test"):
        raise ValueError("split must be 'val' or 'test'")
    per_user = isinstance(model, Mapping)
    hits = 0.0
    gains = 0.0
    counted = skipped = 0
    jobs = []
    for seq in corpus.sequences:
        target = seq.test_item if split == "test" else seq.val_item
        m = model[seq.user] if per_user else model
        if not 1 <= target <= m.config.num_items:
            log.warning("user %d: target %d unknown to the model, skipped", seq.user, target)
            skipped += 1
            continue
        base = list(contexts[seq.user]) if contexts is not None and seq.user in contexts else list(seq.items)
        context = base + ([seq.val_item] if split == "test" else [])
        excluded = set(seq.items) | ({seq.val_item} if split == "test" else set()) | set(context)
        jobs.append((m, context[-m.config.max_seq_len :], target, excluded))

    def flush(group):
        nonlocal hits, gains, counted
        m = group[0][0]
        ids, _ = pad_batch([j[1] for j in group])
        lengths = np.array([len(j[1]) for j in group])
        with ag.no_grad():
            states = m.hidden_states(ids).data[np.arange(len(group)), lengths]
            scores = states @ m.item_embeddings.data[1:].T
        for row, (_, _, target, excluded) in enumerate(group):
            rank = target_rank(scores[row], target, excluded)
            hits += float(rank <= k)
            gains += ndcg_at(rank, k)
            counted += 1

    if per_user:
        for job in jobs:
            flush([job])
    else:
        for start in range(0, len(jobs), EVAL_BATCH):
            flush(jobs[start : start + EVAL_BATCH])
    if counted == 0:
        return EvalResult(0.0, 0.0, k, 0, mode, skipped)
    return EvalResult(hits / counted, gains / counted, k, counted, mode, skipped)


# ---------------------------------------------------------------------------
# grids

AXES = {
    "beta": "beta",
    "epsilon": "epsilon",
    "lambda_pc": "lambda_pc",
    "lambda_is": "lambda_is",
    "K": "group_size",
    "sharing": "similarity_sharing",
}


def ablation_grid(corpus: Corpus, cfg, axis: str, values, k: int = 20, seeds=None) -> list[dict]:
    """Run the protocol once per value of one knob (plus the default config).

    Each row holds the knob value, seed-averaged HR@k / NDCG@k of the server
    model, and the per-seed HR values. The first row is the default config.
    """
    from .protocol import run_ptf

    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {sorted(AXES)}")
    field_name = AXES[axis]
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for label, value in [("default", getattr(cfg, field_name))] + [(str(v), v) for v in values]:
        hrs, ndcgs = [], []
        for seed in seeds:
            run_cfg = replace(cfg, **{field_name: value, "seed": seed, "eval_every": 0})
            result = run_ptf(corpus, run_cfg)
            res = evaluate(result.server.model, corpus, k=k, mode="ptf")
            hrs.append(res.hr_at_k)
            ndcgs.append(res.ndcg_at_k)
        rows.append(
            {
                axis: value,
                "row": label,
                f"hr@{k}": float(np.mean(hrs)),
                f"ndcg@{k}": float(np.mean(ndcgs)),
                "seeds": len(seeds),
                "hr_per_seed": hrs,
            }
        )
    return rows


def write_table_csv(rows: list[dict], path, axis: str) -> None:
    cols = [axis] + [c for c in rows[0] if c not in (axis, "hr_per_seed")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


def write_metrics_csv(results: list[tuple[EvalResult, int | None]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["mode", "round", "k", "hr", "ndcg", "users"])
        w.writeheader()
        for res, round_ in results:
            w.writerow(res.as_row(round_))
