"""Small ID-based next-item models: a GRU recurrent encoder and a causal
self-attention encoder, behind one interface.

Both encoders read ``[START, v1, ..., vT]`` and return T+1 hidden states.
State 0 is the learned start state (it predicts v1); state t summarises
v1..vt and predicts v(t+1). Item id 0 is padding; batches are right-padded,
so real positions never see pads.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CodecError, ConfigError, InputError

Arch = Literal["gru4rec", "sasrec"]
ARCH_TAGS = {"gru4rec": 0, "sasrec": 1}
CHECKPOINT_MAGIC = b"SQMD"
CHECKPOINT_VERSION = 1
INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    arch: Arch
    embed_dim: int
    hidden_dim: int
    num_layers: int
    max_seq_len: int
    num_items: int

    def __post_init__(self):
        if self.arch not in ARCH_TAGS:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        for name in ("embed_dim", "hidden_dim", "num_layers", "max_seq_len", "num_items"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.hidden_dim != self.embed_dim:
            raise ConfigError("hidden_dim must equal embed_dim: scores are e^T V")

    def with_items(self, num_items: int) -> "ModelConfig":
        return replace(self, num_items=num_items)


def client_preset(arch: Arch = "sasrec", num_items: int = 1, max_seq_len: int = 20) -> ModelConfig:
    return ModelConfig(arch, 8, 8, 1, max_seq_len, num_items)


def server_preset(arch: Arch = "sasrec", num_items: int = 1, max_seq_len: int = 20, dim: int = 32) -> ModelConfig:
    return ModelConfig(arch, dim, dim, 2, max_seq_len, num_items)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; both block types hold 6d^2 + 6d weights."""
    d, layers = cfg.embed_dim, cfg.num_layers
    shared = (cfg.num_items + 1) * d + d
    blocks = layers * (6 * d * d + 6 * d)
    if cfg.arch == "gru4rec":
        return shared + blocks
    return shared + (cfg.max_seq_len + 1) * d + blocks + 2 * d


class SeqModel:
    """Parameters and forward pass shared by both encoders."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        self.params: dict[str, Tensor] = {}
        table = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(config.num_items + 1, d))
        table[0] = 0.0
        self._add("item_embeddings", table)
        self._add("start_embedding", rng.uniform(-INIT_SCALE, INIT_SCALE, size=d))
        self._init_encoder(rng)

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def _init_encoder(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _encode_embedded(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    # -- bookkeeping

    @property
    def item_embeddings(self) -> Tensor:
        return self.params["item_embeddings"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_vector(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def load_state_vector(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_parameters():
            raise InputError(f"expected {self.num_parameters()} values, got {flat.size}")
        offset = 0
        for p in self.params.values():
            n = p.data.size
            p.data[...] = flat[offset : offset + n].reshape(p.data.shape)
            offset += n

    def clone(self) -> "SeqModel":
        other = build_model(self.config, self.seed)
        other.load_state_vector(self.state_vector())
        return other

    # -- forward

    def check_ids(self, ids: np.ndarray, allow_padding: bool = True) -> None:
        lo = 0 if allow_padding else 1
        if ids.size and (ids.min() < lo or ids.max() > self.config.num_items):
            raise InputError(f"item id out of range [{lo}, {self.config.num_items}]")

    def hidden_states(self, ids) -> Tensor:
        """States [B, T+1, d] for right-padded item ids [B, T]."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] > self.config.max_seq_len:
            raise InputError(f"sequence longer than max_seq_len={self.config.max_seq_len}")
        self.check_ids(ids)
        B = ids.shape[0]
        emb = ag.take(self.item_embeddings, ids, padding_idx=0)
        start = ag.reshape(self.params["start_embedding"], (1, 1, -1))
        start = ag.mul(start, np.ones((B, 1, 1)))
        x = ag.concat([start, emb], axis=1)
        return self._encode_embedded(x)

    def encode(self, seq) -> Tensor:
        """Per-step states e^1..e^T [T, d] for one unpadded sequence."""
        seq = np.asarray(seq, dtype=np.int64)
        if seq.ndim != 1 or not 1 <= len(seq) <= self.config.max_seq_len:
            raise InputError(f"sequence length must be in [1, {self.config.max_seq_len}]")
        self.check_ids(seq, allow_padding=False)
        return self.hidden_states(seq[None, :])[0, 1:]

    def start_state(self) -> Tensor:
        """The conditioning state used to score the first position."""
        return self.hidden_states(np.zeros((1, 0), dtype=np.int64))[0, 0]

    def prefix_state(self, prefix) -> Tensor:
        """State after ``prefix`` (the start state when empty)."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if len(prefix) == 0:
            return self.start_state()
        return self.encode(prefix)[len(prefix) - 1]

    def score_all(self, e) -> Tensor:
        """Scores of items 1..|V| (entry i is item i+1)."""
        e = e if isinstance(e, Tensor) else Tensor(e)
        d = self.config.embed_dim
        if e.shape[-1] != d:
            raise ConfigError(f"state width {e.shape[-1]} != embedding width {d}")
        table = self.item_embeddings[1:]
        if e.ndim == 1:
            return ag.reshape(ag.matmul(ag.reshape(e, (1, d)), ag.transpose(table)), (-1,))
        return ag.matmul(e, ag.transpose(table))

    def candidate_scores(self, states: Tensor, candidates) -> Tensor:
        """Scores [..., C] of candidate item ids [..., C] under states [..., d]."""
        return ag.gather_dot(states, self.item_embeddings, candidates, padding_idx=0)


class GRU4Rec(SeqModel):
    """Stacked GRU layers; the layer output at each step is the latent vector."""

    def _init_encoder(self, rng):
        d = self.config.embed_dim
        for layer in range(self.config.num_layers):
            self._add(f"gru{layer}.w_in", rng.uniform(-INIT_SCALE, INIT_SCALE, size=(d, 3 * d)))
            self._add(f"gru{layer}.b_in", np.zeros(3 * d))
            self._add(f"gru{layer}.w_rec", rng.uniform(-INIT_SCALE, INIT_SCALE, size=(d, 3 * d)))
            self._add(f"gru{layer}.b_rec", np.zeros(3 * d))

    def _encode_embedded(self, x):
        p = self.params
        for layer in range(self.config.num_layers):
            gx = ag.add(ag.matmul(x, p[f"gru{layer}.w_in"]), p[f"gru{layer}.b_in"])
            x = ag.gru(gx, p[f"gru{layer}.w_rec"], p[f"gru{layer}.b_rec"])
        return x


class SASRec(SeqModel):
    """Pre-norm single-head causal transformer with learned positions."""

    def _init_encoder(self, rng):
        d = self.config.embed_dim
        u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)  # noqa: E731
        self._add("pos_embeddings", u(self.config.max_seq_len + 1, d))
        for b in range(self.config.num_layers):
            self._add(f"blk{b}.ln1_g", np.ones(d))
            self._add(f"blk{b}.ln1_b", np.zeros(d))
            for name in ("wq", "wk", "wv", "wo"):
                self._add(f"blk{b}.{name}", u(d, d))
            self._add(f"blk{b}.ln2_g", np.ones(d))
            self._add(f"blk{b}.ln2_b", np.zeros(d))
            self._add(f"blk{b}.ff1_w", u(d, d))
            self._add(f"blk{b}.ff1_b", np.zeros(d))
            self._add(f"blk{b}.ff2_w", u(d, d))
            self._add(f"blk{b}.ff2_b", np.zeros(d))
        self._add("final_ln_g", np.ones(d))
        self._add("final_ln_b", np.zeros(d))

    def _encode_embedded(self, x):
        p = self.params
        T1 = x.shape[1]
        d = self.config.embed_dim
        x = ag.add(x, p["pos_embeddings"][:T1])
        causal = np.tril(np.ones((T1, T1), dtype=bool))
        scale = 1.0 / math.sqrt(d)
        for b in range(self.config.num_layers):
            h = ag.layer_norm(x, p[f"blk{b}.ln1_g"], p[f"blk{b}.ln1_b"])
            q = ag.matmul(h, p[f"blk{b}.wq"])
            k = ag.matmul(h, p[f"blk{b}.wk"])
            v = ag.matmul(h, p[f"blk{b}.wv"])
            att = ag.softmax(ag.mul(ag.matmul(q, ag.transpose(k)), scale), axis=-1, mask=causal)
            x = ag.add(x, ag.matmul(ag.matmul(att, v), p[f"blk{b}.wo"]))
            h = ag.layer_norm(x, p[f"blk{b}.ln2_g"], p[f"blk{b}.ln2_b"])
            f = ag.relu(ag.add(ag.matmul(h, p[f"blk{b}.ff1_w"]), p[f"blk{b}.ff1_b"]))
            x = ag.add(x, ag.add(ag.matmul(f, p[f"blk{b}.ff2_w"]), p[f"blk{b}.ff2_b"]))
        return ag.layer_norm(x, p["final_ln_g"], p["final_ln_b"])


def build_model(config: ModelConfig, seed: int = 0) -> SeqModel:
    return {"gru4rec": GRU4Rec, "sasrec": SASRec}[config.arch](config, seed)


# ---------------------------------------------------------------------------
# objectives


def rec_loss(pos_scores, neg_scores, mask=None, neg_mask=None) -> Tensor:
    """Negative log-likelihood of positives vs sampled negatives, summed over steps.

    ``pos_scores`` is [N] (or [..., N]) and ``neg_scores`` [N, k]; ``mask``
    (same shape as ``pos_scores``) drops padded steps, ``neg_mask`` (same
    shape as ``neg_scores``) drops empty negative slots.
    """
    pos = pos_scores if isinstance(pos_scores, Tensor) else Tensor(pos_scores)
    neg = neg_scores if isinstance(neg_scores, Tensor) else Tensor(neg_scores)
    if pos.data.size == 0:
        raise InputError("rec_loss needs at least one step")
    if neg.shape[:-1] != pos.shape:
        raise InputError(f"need one negative list per positive: {pos.shape} vs {neg.shape}")
    neg_terms = ag.log_sigmoid(ag.mul(neg, -1.0))
    if neg_mask is not None:
        neg_terms = ag.mul(neg_terms, np.asarray(neg_mask, dtype=np.float64))
    per_step = ag.add(ag.log_sigmoid(pos), ag.tsum(neg_terms, axis=-1))
    if mask is not None:
        per_step = ag.mul(per_step, np.asarray(mask, dtype=np.float64))
    return ag.mul(ag.tsum(per_step), -1.0)


def soft_label_loss(pred_scores, soft_labels, mask=None, kind: str = "bce") -> Tensor:
    """Distillation loss towards server soft labels.

    ``bce``: binary cross-entropy between sigmoid(pred) and sigmoid(label),
    summed over candidates. ``mse``: squared error on raw scores.
    """
    pred = pred_scores if isinstance(pred_scores, Tensor) else Tensor(pred_scores)
    labels = np.asarray(soft_labels.data if isinstance(soft_labels, Tensor) else soft_labels, dtype=np.float64)
    if pred.shape != labels.shape:
        raise InputError(f"prediction/label shapes differ: {pred.shape} vs {labels.shape}")
    if kind == "bce":
        target = ag._sigmoid(labels)
        terms = ag.add(ag.mul(ag.log_sigmoid(pred), target), ag.mul(ag.log_sigmoid(ag.mul(pred, -1.0)), 1.0 - target))
        terms = ag.mul(terms, -1.0)
    elif kind == "mse":
        diff = ag.sub(pred, labels)
        terms = ag.mul(diff, diff)
    else:
        raise ConfigError(f"unknown soft-label loss {kind!r}")
    if mask is not None:
        terms = ag.mul(terms, np.asarray(mask, dtype=np.float64))
    return ag.tsum(terms)


def pad_batch(seqs, width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad item sequences with 0; returns (ids [B, T], mask [B, T])."""
    width = max((len(s) for s in seqs), default=0) if width is None else width
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids > 0


def sequence_rec_loss(model: SeqModel, ids: np.ndarray, negatives: np.ndarray) -> tuple[Tensor, Tensor]:
    """Log-sigmoid next-item loss for padded ``ids`` [B, T] with ``negatives`` [B, T, k].

    Returns (loss, hidden states) so callers can reuse the states.
    """
    states = model.hidden_states(ids)
    T = ids.shape[1]
    step_states = states[:, :T]
    cands = np.concatenate([ids[..., None], negatives], axis=-1)
    scores = model.candidate_scores(step_states, cands)
    loss = rec_loss(scores[..., 0], scores[..., 1:], mask=ids > 0, neg_mask=negatives > 0)
    return loss, states


# ---------------------------------------------------------------------------
# checkpoints

_HEADER = struct.Struct("<4sIII" + "I" * 5)


def checkpoint_bytes(model: SeqModel) -> bytes:
    """magic, version, arch tag, config ints (u32 LE), then float64 LE parameters."""
    c = model.config
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            ARCH_TAGS[c.arch],
            len(model.params),
            c.embed_dim,
            c.hidden_dim,
            c.num_layers,
            c.max_seq_len,
            c.num_items,
        )
    )
    buf.write(model.state_vector().astype("<f8").tobytes())
    return buf.getvalue()


def checkpoint_size(config: ModelConfig) -> int:
    return _HEADER.size + 8 * expected_param_count(config)


def model_from_bytes(blob: bytes) -> SeqModel:
    if len(blob) < _HEADER.size:
        raise CodecError("checkpoint truncated")
    magic, version, tag, nparams, d, h, layers, max_len, items = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CodecError("not a model checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CodecError(f"unsupported checkpoint version {version}")
    arch = {v: k for k, v in ARCH_TAGS.items()}.get(tag)
    if arch is None:
        raise CodecError(f"unknown architecture tag {tag}")
    model = build_model(ModelConfig(arch, d, h, layers, max_len, items))
    if len(model.params) != nparams:
        raise CodecError("parameter tensor count mismatch")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    if body.size != model.num_parameters():
        raise CodecError("checkpoint body has the wrong length")
    model.load_state_vector(body)
    return model


def save_checkpoint(model: SeqModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> SeqModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
