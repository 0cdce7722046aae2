"""Server side: denoising training on perturbed uploads, similar-user groups
and soft-labelled knowledge downloads. Model parameters never leave here;
the only outbound type is ``DownloadMessage``."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import draw_from_pool, draw_padded
from .errors import InputError, ProtocolError
from .messages import DownloadMessage, SoftLabeledSequence, UploadMessage
from .models import SeqModel, pad_batch, sequence_rec_loss

HISTORY = 2


@dataclass
class ServerConfig:
    epochs: int = 2
    lr: float = 0.05
    lambda_pc: float = 0.01
    lambda_is: float = 0.01
    group_size: int = 5
    temperature: float = 1.0
    num_negatives: int = 1
    batch_size: int = 1024
    similarity_sharing: bool = True


@dataclass
class ServerState:
    model: SeqModel
    rng: np.random.Generator
    config: ServerConfig = field(default_factory=ServerConfig)
    upload_history: dict[int, deque] = field(default_factory=dict)
    similar_groups: dict[int, list[int]] = field(default_factory=dict)

    def ingest(self, uploads: list[UploadMessage]) -> None:
        for msg in sorted(uploads, key=lambda m: m.user):
            hist = self.upload_history.setdefault(msg.user, deque(maxlen=HISTORY))
            if hist and hist[-1].round == msg.round:
                hist[-1] = msg
            else:
                hist.append(msg)

    def previous_upload(self, user: int, round_: int) -> UploadMessage | None:
        """The user's most recent upload from a round before ``round_``."""
        for msg in reversed(self.upload_history.get(user, ())):
            if msg.round < round_:
                return msg
        return None


def seq_repr(model: SeqModel, items) -> Tensor:
    """Sequence representation: the state after the final item."""
    return model.encode(items)[len(items) - 1]


def _last_states(states: Tensor, lengths: np.ndarray) -> Tensor:
    return states[np.arange(len(lengths)), lengths]


# ---------------------------------------------------------------------------
# groups


def build_similar_groups(model: SeqModel, uploads: list[UploadMessage], k: int) -> dict[int, list[int]]:
    """Top-k other uploaders by cosine similarity of their final items' embeddings.

    Ties go to the smaller user id. A lone uploader gets an empty group.
    """
    if k < 0:
        raise InputError("group size must be non-negative")
    uploads = sorted(uploads, key=lambda m: m.user)
    users = np.array([m.user for m in uploads], dtype=np.int64)
    finals = np.array([m.items[-1] for m in uploads], dtype=np.int64)
    table = model.item_embeddings.data
    sims = ag.cosine_matrix(table[finals], table[finals]).data
    groups = {}
    for i, u in enumerate(users):
        others = np.flatnonzero(users != u)
        order = np.lexsort((users[others], -sims[i, others]))
        groups[int(u)] = [int(users[others[j]]) for j in order[:k]]
    return groups


# ---------------------------------------------------------------------------
# contrastive terms


def pc_loss_from_reprs(prev: Tensor, cur: Tensor, negatives: Tensor | None, temperature: float = 1.0) -> Tensor:
    """-log softmax weight of (prev, cur) against (cur, negative_j) pairs.

    ``prev``/``cur`` are [d]; ``negatives`` is [n, d] (may be None or empty).
    """
    pos = ag.mul(ag.cosine_sim(prev, cur), 1.0 / temperature)
    if negatives is None or negatives.shape[0] == 0:
        return ag.mul(pos, 0.0)
    neg = ag.mul(ag.reshape(ag.cosine_matrix(ag.reshape(cur, (1, -1)), negatives), (-1,)), 1.0 / temperature)
    logits = ag.concat([ag.reshape(pos, (1,)), neg])
    return ag.sub(ag.logsumexp(logits, axis=0), pos)


def is_loss_from_reprs(cur: Tensor, positives: Tensor | None, negatives: Tensor | None, temperature: float = 1.0) -> Tensor:
    """-log of the similarity mass on group members vs all candidates."""
    if positives is None or positives.shape[0] == 0:
        return ag.mul(ag.tsum(cur), 0.0)
    row = ag.reshape(cur, (1, -1))
    pos = ag.mul(ag.reshape(ag.cosine_matrix(row, positives), (-1,)), 1.0 / temperature)
    if negatives is None or negatives.shape[0] == 0:
        return ag.mul(ag.tsum(pos), 0.0)
    neg = ag.mul(ag.reshape(ag.cosine_matrix(row, negatives), (-1,)), 1.0 / temperature)
    return ag.sub(ag.logsumexp(ag.concat([pos, neg]), axis=0), ag.logsumexp(pos, axis=0))


def group_masks(users: list[int], groups: dict[int, list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """(positive, negative) masks over the batch: members of U_i, and everyone
    else except i. Group members outside the batch are ignored."""
    index = {u: i for i, u in enumerate(users)}
    n = len(users)
    pos = np.zeros((n, n), dtype=bool)
    for i, u in enumerate(users):
        for v in groups.get(u, ()):
            j = index.get(v)
            if j is not None and j != i:
                pos[i, j] = True
    neg = ~pos & ~np.eye(n, dtype=bool)
    return pos, neg


def contrastive_terms(
    cur: Tensor,
    prev: Tensor | None,
    has_prev: np.ndarray,
    pos_mask: np.ndarray,
    neg_mask: np.ndarray,
    temperature: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Summed preference-consistency and intention-similarity losses for a batch.

    ``cur`` [n, d] are this round's representations; ``prev`` [m, d] the
    previous-round ones for the rows where ``has_prev`` is True.
    """
    sims = ag.mul(ag.cosine_matrix(cur, cur), 1.0 / temperature)
    zero = Tensor(0.0)

    pc = zero
    rows = np.flatnonzero(has_prev)
    if prev is not None and len(rows):
        cur_rows = cur[rows]
        # diagonal of cos(prev_i, cur_i)
        pair = ag.tsum(ag.mul(ag.cosine_matrix(prev, cur_rows), np.eye(len(rows))), axis=1)
        pair = ag.mul(pair, 1.0 / temperature)
        logits = ag.concat([ag.reshape(pair, (-1, 1)), sims[rows]], axis=1)
        mask = np.concatenate([np.ones((len(rows), 1), dtype=bool), neg_mask[rows]], axis=1)
        pc = ag.tsum(ag.sub(ag.logsumexp(logits, axis=1, mask=mask), pair))

    is_ = zero
    rows = np.flatnonzero(pos_mask.any(axis=1) & neg_mask.any(axis=1))
    if len(rows):
        s = sims[rows]
        total = ag.logsumexp(s, axis=1, mask=pos_mask[rows] | neg_mask[rows])
        own = ag.logsumexp(s, axis=1, mask=pos_mask[rows])
        is_ = ag.tsum(ag.sub(total, own))
    return pc, is_


def _upload_negatives(uploads: list[UploadMessage], width: int, k: int, num_items: int, rng) -> np.ndarray:
    """Negatives drawn from items that do not appear in each uploaded sequence."""
    out = np.zeros((len(uploads), width, k), dtype=np.int64)
    for row, msg in enumerate(uploads):
        present = np.zeros(num_items + 1, dtype=bool)
        present[0] = True
        present[list(msg.items)] = True
        pool = np.flatnonzero(~present)
        out[row, : len(msg.items)] = draw_padded(pool, len(msg.items), k, rng)
    return out


def server_objective(
    model: SeqModel,
    uploads: list[UploadMessage],
    previous: list[UploadMessage | None],
    negatives: np.ndarray,
    groups: dict[int, list[int]],
    lambda_pc: float,
    lambda_is: float,
    temperature: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """rec + lambda_pc * pc + lambda_is * is for one batch of uploads."""
    ids, _ = pad_batch([m.items for m in uploads])
    rec, states = sequence_rec_loss(model, ids, negatives)
    lengths = np.array([len(m.items) for m in uploads])
    cur = _last_states(states, lengths)
    has_prev = np.array([p is not None for p in previous], dtype=bool)
    prev = None
    if lambda_pc and has_prev.any():
        prev_msgs = [p for p in previous if p is not None]
        pids, _ = pad_batch([p.items for p in prev_msgs])
        pstates = model.hidden_states(pids)
        prev = _last_states(pstates, np.array([len(p.items) for p in prev_msgs]))
    total = rec
    parts = {"rec": rec.item(), "pc": 0.0, "is": 0.0}
    if lambda_pc or lambda_is:
        pos_mask, neg_mask = group_masks([m.user for m in uploads], groups)
        pc, is_ = contrastive_terms(cur, prev, has_prev, pos_mask, neg_mask, temperature)
        parts["pc"], parts["is"] = pc.item(), is_.item()
        if lambda_pc:
            total = ag.add(total, ag.mul(pc, lambda_pc))
        if lambda_is:
            total = ag.add(total, ag.mul(is_, lambda_is))
    return total, parts


def pc_loss(state: ServerState, user: int, uploads: list[UploadMessage]) -> Tensor:
    """Preference-consistency loss of one uploader under the current model."""
    by_user = {m.user: m for m in uploads}
    cur_msg = by_user[user]
    prev_msg = state.previous_upload(user, cur_msg.round)
    if prev_msg is None:
        return Tensor(0.0)
    group = set(state.similar_groups.get(user, ()))
    negs = [m for u, m in sorted(by_user.items()) if u != user and u not in group]
    model = state.model
    cur = seq_repr(model, cur_msg.items)
    neg = ag.concat([ag.reshape(seq_repr(model, m.items), (1, -1)) for m in negs]) if negs else None
    return pc_loss_from_reprs(seq_repr(model, prev_msg.items), cur, neg, state.config.temperature)


def is_loss(state: ServerState, user: int, uploads: list[UploadMessage]) -> Tensor:
    """Intention-similarity loss of one uploader under the current model."""
    by_user = {m.user: m for m in uploads}
    group = [u for u in state.similar_groups.get(user, ()) if u in by_user and u != user]
    negs = [u for u in sorted(by_user) if u != user and u not in group]
    model = state.model

    def stack(us):
        return ag.concat([ag.reshape(seq_repr(model, by_user[u].items), (1, -1)) for u in us]) if us else None

    return is_loss_from_reprs(seq_repr(model, by_user[user].items), stack(group), stack(negs), state.config.temperature)


def server_train(state: ServerState, uploads: list[UploadMessage]) -> dict[str, float]:
    """Ingest a subround's uploads and run the configured SGD epochs.

    Returns the loss terms summed over the batches of the final epoch.
    """
    if not uploads:
        raise ProtocolError("server_train needs at least one upload")
    cfg = state.config
    uploads = sorted(uploads, key=lambda m: m.user)
    state.ingest(uploads)
    state.similar_groups = build_similar_groups(state.model, uploads, cfg.group_size)
    previous = [state.previous_upload(m.user, m.round) for m in uploads]
    opt = ag.SGD(state.model.parameters(), cfg.lr)
    num_items = state.model.config.num_items
    parts = {"rec": 0.0, "pc": 0.0, "is": 0.0}
    for _ in range(cfg.epochs):
        order = state.rng.permutation(len(uploads)) if len(uploads) > cfg.batch_size else np.arange(len(uploads))
        parts = {"rec": 0.0, "pc": 0.0, "is": 0.0}
        for start in range(0, len(uploads), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            batch = [uploads[i] for i in idx]
            width = max(len(m.items) for m in batch)
            negatives = _upload_negatives(batch, width, cfg.num_negatives, num_items, state.rng)
            opt.zero_grad()
            loss, batch_parts = server_objective(
                state.model,
                batch,
                [previous[i] for i in idx],
                negatives,
                state.similar_groups,
                cfg.lambda_pc,
                cfg.lambda_is,
                cfg.temperature,
            )
            # per-sequence mean keeps the step size independent of the batch size
            ag.backward(ag.mul(loss, 1.0 / len(batch)))
            opt.step()
            for key in parts:
                parts[key] += batch_parts[key]
    state.similar_groups = build_similar_groups(state.model, uploads, cfg.group_size)
    return parts


# ---------------------------------------------------------------------------
# knowledge sharing and inference


def sharing_pool(state: ServerState, user: int, uploads: list[UploadMessage]) -> list[UploadMessage]:
    """Uploads a download for ``user`` may be drawn from.

    The similar-user group when sharing by similarity and the group is
    non-empty; otherwise every other uploader (the user's own upload only if
    nobody else uploaded).
    """
    by_user = {m.user: m for m in uploads}
    if state.config.similarity_sharing:
        group = [by_user[u] for u in state.similar_groups.get(user, ()) if u in by_user and u != user]
        if group:
            return group
    others = [m for u, m in sorted(by_user.items()) if u != user]
    if not others and user in by_user:
        return [by_user[user]]
    return others


def soft_label(model: SeqModel, items, num_negatives: int, rng: np.random.Generator) -> SoftLabeledSequence:
    """Candidate sets {item_t} + negatives absent from ``items``, scored by the
    model conditioned on items[:t]."""
    items = np.asarray(items, dtype=np.int64)
    num_items = model.config.num_items
    present = np.zeros(num_items + 1, dtype=bool)
    present[0] = True
    present[items] = True
    pool = np.flatnonzero(~present)
    # a sequence covering the whole catalogue leaves fewer negatives to offer
    negatives = draw_from_pool(pool, len(items), min(num_negatives, len(pool)), rng)
    cands = np.concatenate([items[:, None], negatives], axis=1)
    with ag.no_grad():
        states = model.hidden_states(items[None, :])[0, : len(items)]
        scores = model.candidate_scores(states, cands).data
    return SoftLabeledSequence(cands, scores)


def build_download(state: ServerState, user: int, uploads: list[UploadMessage], num_negatives: int, round_: int) -> DownloadMessage:
    if not uploads:
        raise ProtocolError("no uploads this round")
    pool = sharing_pool(state, user, uploads)
    source = pool[int(state.rng.integers(0, len(pool)))]
    return DownloadMessage(user, round_, soft_label(state.model, source.items, num_negatives, state.rng))


def rank_items(scores: np.ndarray, exclude=(), k: int | None = None) -> list[int]:
    """Item ids (1-based) by descending score, ties to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(1, len(scores) + 1)
    keep = np.ones(len(scores), dtype=bool)
    ex = np.asarray([i for i in exclude if 1 <= i <= len(scores)], dtype=np.int64)
    keep[ex - 1] = False
    ids, sc = ids[keep], scores[keep]
    order = np.lexsort((ids, -sc))
    ranked = ids[order]
    return [int(i) for i in (ranked if k is None else ranked[:k])]


def recommend(state: ServerState, query: UploadMessage, k: int = 20) -> list[int]:
    """Top-k items for a (perturbed) query sequence, excluding its own items."""
    model = state.model
    items = list(query.items)[-model.config.max_seq_len :]
    with ag.no_grad():
        scores = model.score_all(seq_repr(model, items)).data
    return rank_items(scores, exclude=set(items), k=k)
