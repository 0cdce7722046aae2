"""Client side: local training on private plus server-shared data, and
sequence perturbation with the exponential mechanism before upload."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import InteractionSequence, sample_negative_block
from .errors import InputError, ProtocolError
from .messages import SoftLabeledSequence, UploadMessage
from .models import SeqModel, pad_batch, rec_loss, soft_label_loss


def client_rng(seed: int, user: int, round_: int) -> np.random.Generator:
    """Per-(seed, user, round) stream: reproducible, but fresh noise every round."""
    return np.random.default_rng([seed, user, round_, 0xC1])


@dataclass
class ClientState:
    user: int
    model: SeqModel
    private_data: InteractionSequence
    num_items: int
    rng: np.random.Generator
    shared_data: list[SoftLabeledSequence] = field(default_factory=list)
    max_shared: int = 1
    trained_since_upload: bool = False

    @classmethod
    def create(cls, seq: InteractionSequence, model: SeqModel, num_items: int, seed: int = 0, max_shared: int = 1) -> "ClientState":
        # private copy so the corpus stays immutable
        own = dataclasses.replace(seq, items=list(seq.items), trained_items=set(seq.trained_items))
        return cls(seq.user, model, own, num_items, client_rng(seed, seq.user, 0), max_shared=max_shared)

    def receive(self, payloads: list[SoftLabeledSequence]) -> None:
        """Replace the shared set with the newest download(s)."""
        self.shared_data = list(payloads)[-self.max_shared :] if self.max_shared else []

    @property
    def candidate_pool(self) -> np.ndarray:
        """Sorted trained-item set; the generation candidates."""
        return np.array(sorted(self.private_data.trained_items), dtype=np.int64)


def local_loss(state: ClientState, negatives: np.ndarray, soft_kind: str = "bce") -> ag.Tensor:
    """Rec loss on the private sequence plus distillation on shared sequences.

    All sequences go through the encoder as one padded batch.
    """
    model = state.model
    private = state.private_data.items
    seqs = [private] + [s.sequence for s in state.shared_data]
    ids, _ = pad_batch(seqs)
    states = model.hidden_states(ids)
    T = len(private)
    cands = np.concatenate([np.asarray(private)[:, None], negatives], axis=1)
    scores = model.candidate_scores(states[0, :T], cands)
    loss = rec_loss(scores[:, 0], scores[:, 1:], neg_mask=negatives > 0)
    for row, shared in enumerate(state.shared_data, start=1):
        pred = model.candidate_scores(states[row, : len(shared)], shared.items)
        loss = ag.add(loss, soft_label_loss(pred, shared.scores, kind=soft_kind))
    return loss


def client_train(
    state: ClientState,
    epochs: int = 5,
    lr: float = 0.05,
    num_negatives: int = 1,
    soft_kind: str = "bce",
) -> list[float]:
    """Full-batch SGD, one step per epoch, fresh negatives every epoch.

    Returns the loss seen at each step.
    """
    opt = ag.SGD(state.model.parameters(), lr)
    T = len(state.private_data)
    losses = []
    for _ in range(epochs):
        negatives = sample_negative_block(
            state.private_data, T, num_negatives, state.rng, state.num_items, heldout_visible=False, allow_short=True
        )
        opt.zero_grad()
        loss = local_loss(state, negatives, soft_kind)
        ag.backward(loss)
        opt.step()
        losses.append(loss.item())
    state.trained_since_upload = True
    return losses


# ---------------------------------------------------------------------------
# exponential mechanism


def exp_mech_probabilities(scores, epsilon: float, sensitivity: float = 1.0) -> np.ndarray:
    """P(j) proportional to exp(epsilon * score_j / (2 * sensitivity))."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise InputError("exponential mechanism needs a non-empty score vector")
    if epsilon <= 0 or sensitivity <= 0:
        raise InputError("epsilon and sensitivity must be positive")
    return ag.softmax_row(scores * (epsilon / (2.0 * sensitivity))).data


def exp_mech_sample(scores, epsilon: float, sensitivity: float, rng: np.random.Generator) -> int:
    probs = exp_mech_probabilities(scores, epsilon, sensitivity)
    idx = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    return min(idx, len(probs) - 1)


def utility_scores(model: SeqModel, prefix, pool: np.ndarray) -> np.ndarray:
    """Sigmoid-clamped scores of ``pool`` items given ``prefix``; range (0, 1)."""
    with ag.no_grad():
        state = model.prefix_state(prefix)
        raw = model.candidate_scores(state, pool).data
    return ag._sigmoid(raw)


def prefix_scores(state: ClientState, prefix) -> np.ndarray:
    """Utility of every item in ``state.candidate_pool`` after ``prefix``."""
    return utility_scores(state.model, prefix, state.candidate_pool)


def replaced_count(beta: float, length: int) -> int:
    return min(length, math.ceil(beta * length - 1e-9))


def perturb_sequence(
    model: SeqModel,
    items,
    pool: np.ndarray,
    beta: float,
    epsilon: float,
    rng: np.random.Generator,
    sensitivity: float = 1.0,
) -> tuple[list[int], np.ndarray]:
    """Replace ceil(beta*T) random positions, left to right, with items drawn
    by the exponential mechanism conditioned on the already-perturbed prefix.

    Returns (new sequence, replaced positions).
    """
    if not 0.0 <= beta <= 1.0:
        raise InputError("beta must lie in [0, 1]")
    seq = [int(i) for i in items]
    m = replaced_count(beta, len(seq))
    if m == 0:
        return seq, np.zeros(0, dtype=np.int64)
    if len(pool) == 0:
        raise InputError("empty candidate pool")
    positions = np.sort(rng.choice(len(seq), size=m, replace=False))
    for t in positions:
        utility = utility_scores(model, seq[:t], pool)
        seq[t] = int(pool[exp_mech_sample(utility, epsilon, sensitivity, rng)])
    return seq, positions


def build_upload(
    state: ClientState,
    round_: int,
    beta: float = 0.5,
    epsilon: float = 1.0,
    sensitivity: float = 1.0,
) -> UploadMessage:
    """The perturbed private sequence; (epsilon * ceil(beta*T))-DP over replaced positions."""
    if not state.trained_since_upload:
        raise ProtocolError(f"client {state.user} must train before uploading")
    items, _ = perturb_sequence(
        state.model, state.private_data.items, state.candidate_pool, beta, epsilon, state.rng, sensitivity
    )
    state.trained_since_upload = False
    return UploadMessage(state.user, round_, items)


def privacy_cost(beta: float, epsilon: float, length: int) -> float:
    """Sequential-composition budget of one upload."""
    return epsilon * replaced_count(beta, length)
