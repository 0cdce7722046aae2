"""Round orchestration: the sequence-exchange protocol, a parameter-averaging
baseline, a no-federation control, and byte accounting for all three."""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import autograd as ag
from .client import ClientState, build_upload, client_rng, client_train
from .data import Corpus, sample_negative_block
from .errors import ConfigError
from .evaluation import EvalResult, evaluate
from .messages import DownloadMessage, UploadMessage, encode_download, encode_upload
from .models import ModelConfig, SeqModel, build_model, checkpoint_bytes, rec_loss
from .server import ServerConfig, ServerState, build_download, server_train

log = logging.getLogger(__name__)

Mode = Literal["ptf", "fedavg", "local"]
MODE_ALIASES = {"ptf": "ptf", "fedavg": "fedavg", "fedavg-baseline": "fedavg", "local": "local", "local-only": "local"}


@dataclass(frozen=True)
class ProtocolConfig:
    global_rounds: int = 20
    subround_size: int = 64
    client_arch: str = "sasrec"
    client_dim: int = 8
    client_layers: int = 1
    server_arch: str = "sasrec"
    server_dim: int = 32
    server_layers: int = 2
    max_seq_len: int = 20
    beta: float = 0.5
    epsilon: float = 1.0
    sensitivity: float = 1.0
    lambda_pc: float = 0.01
    lambda_is: float = 0.01
    group_size: int = 5
    temperature: float = 1.0
    similarity_sharing: bool = True
    shared_sequences: int = 1
    lr_client: float = 0.05
    lr_server: float = 0.2
    client_epochs: int = 5
    server_epochs: int = 2
    num_negatives: int = 1
    server_batch_size: int = 1024
    soft_label_loss: str = "bce"
    eval_every: int = 0
    eval_k: int = 20
    seed: int = 0
    mode: str = "ptf"
    corpus: str | None = None
    synth_users: int = 200
    synth_items: int = 50

    def validate(self) -> "ProtocolConfig":
        if self.mode not in MODE_ALIASES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name in ("lr_client", "lr_server", "sensitivity", "temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.beta > 0 and not self.epsilon > 0:
            raise ConfigError("epsilon must be positive when beta > 0")
        for name in ("global_rounds", "client_epochs", "server_epochs", "num_negatives", "eval_every", "group_size", "shared_sequences"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("subround_size", "server_batch_size", "eval_k", "client_dim", "server_dim", "client_layers", "server_layers", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lambda_pc < 0 or self.lambda_is < 0:
            raise ConfigError("contrastive weights must be non-negative")
        if self.soft_label_loss not in ("bce", "mse"):
            raise ConfigError("soft_label_loss must be 'bce' or 'mse'")
        if self.num_negatives > 254:
            raise ConfigError("at most 254 negatives per step fit the download codec")
        return self

    def client_model_config(self, num_items: int) -> ModelConfig:
        return ModelConfig(self.client_arch, self.client_dim, self.client_dim, self.client_layers, self.max_seq_len, num_items)

    def server_model_config(self, num_items: int) -> ModelConfig:
        return ModelConfig(self.server_arch, self.server_dim, self.server_dim, self.server_layers, self.max_seq_len, num_items)

    def server_config(self) -> ServerConfig:
        return ServerConfig(
            epochs=self.server_epochs,
            lr=self.lr_server,
            lambda_pc=self.lambda_pc,
            lambda_is=self.lambda_is,
            group_size=self.group_size,
            temperature=self.temperature,
            num_negatives=self.num_negatives,
            batch_size=self.server_batch_size,
            similarity_sharing=self.similarity_sharing,
        )

    @classmethod
    def from_dict(cls, values: dict) -> "ProtocolConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**values).validate()

    @classmethod
    def from_json(cls, path) -> "ProtocolConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FULL_SCALE = ProtocolConfig(subround_size=256)


# ---------------------------------------------------------------------------
# accounting


@dataclass
class CommLedger:
    """Every message that crossed the wire, by round, direction and user."""

    mode: str
    entries: list[tuple[int, str, int, int]] = field(default_factory=list)  # (round, direction, user, bytes)
    messages: list | None = None

    def record(self, round_: int, direction: str, user: int, nbytes: int, message=None) -> None:
        self.entries.append((round_, direction, user, nbytes))
        if self.messages is not None:
            self.messages.append(message)

    def total(self, direction: str | None = None, round_: int | None = None) -> int:
        return sum(b for r, d, _, b in self.entries if (direction is None or d == direction) and (round_ is None or r == round_))

    def per_client(self, direction: str) -> dict[int, int]:
        out: dict[int, int] = {}
        for _, d, u, b in self.entries:
            if d == direction:
                out[u] = out.get(u, 0) + b
        return out

    def csv_rows(self) -> list[tuple]:
        return [(self.mode, r, d, u, b) for r, d, u, b in self.entries]


def comm_summary(*ledgers: CommLedger) -> dict:
    """Average bytes per client per round, by mode and direction.

    With both a fedavg and a ptf ledger, also the fedavg/ptf ratios.
    """
    out: dict = {}
    for ledger in ledgers:
        row = {}
        for direction in ("up", "down"):
            counts = [(r, u) for r, d, u, _ in ledger.entries if d == direction]
            pairs = len(set(counts))
            row[direction] = ledger.total(direction) / pairs if pairs else 0.0
        out[ledger.mode] = row
    if "fedavg" in out and "ptf" in out:
        out["ratio"] = {
            d: (out["fedavg"][d] / out["ptf"][d]) if out["ptf"][d] else float("inf") for d in ("up", "down")
        }
    return out


@dataclass
class RoundReport:
    round: int
    subrounds: list[list[int]]
    client_loss: float | None = None
    server_loss: dict[str, float] | None = None
    bytes_up: int = 0
    bytes_down: int = 0
    metrics: dict[str, dict] | None = None

    @property
    def users(self) -> list[int]:
        return [u for sub in self.subrounds for u in sub]

    def to_json(self) -> str:
        body = dataclasses.asdict(self)
        body["users"] = self.users
        return json.dumps(body, sort_keys=True, separators=(",", ":"))


@dataclass
class RunResult:
    mode: str
    reports: list[RoundReport]
    ledger: CommLedger
    server: ServerState | None = None
    model: SeqModel | None = None
    clients: dict[int, ClientState] | None = None
    evaluations: list[tuple[EvalResult, int]] = field(default_factory=list)

    @property
    def final_model(self) -> SeqModel | None:
        return self.server.model if self.server is not None else self.model


def schedule(num_users: int, round_: int, seed: int, subround_size: int) -> list[list[int]]:
    """Shuffle the client queue and cut it into subrounds."""
    order = np.random.default_rng([seed, round_, 0x5C]).permutation(num_users)
    return [[int(u) for u in order[i : i + subround_size]] for i in range(0, num_users, subround_size)]


def _model_seed(seed: int, *tag: int) -> int:
    return int(np.random.default_rng([seed, *tag]).integers(0, 2**31 - 1))


def _make_clients(corpus: Corpus, cfg: ProtocolConfig) -> dict[int, ClientState]:
    mcfg = cfg.client_model_config(corpus.num_items)
    return {
        s.user: ClientState.create(s, build_model(mcfg, _model_seed(cfg.seed, 1, s.user)), corpus.num_items, cfg.seed, cfg.shared_sequences)
        for s in corpus.sequences
    }


def _maybe_eval(cfg: ProtocolConfig, round_: int, corpus: Corpus, fn) -> dict | None:
    last = round_ == cfg.global_rounds - 1
    if not last and not (cfg.eval_every and (round_ + 1) % cfg.eval_every == 0):
        return None
    return fn()


# ---------------------------------------------------------------------------
# protocols


def run_ptf(corpus: Corpus, cfg: ProtocolConfig, keep_messages: bool = False) -> RunResult:
    """Sequence-exchange training.

    Per global round the client queue is shuffled and walked in subrounds. In
    a subround each client trains locally and uploads a perturbed sequence;
    the server trains on the (user-sorted) uploads, then sends each uploader
    one soft-labelled sequence.
    """
    cfg.validate()
    if cfg.beta == 0:
        warnings.warn("beta=0 uploads raw sequences: privacy is off", stacklevel=2)
    clients = _make_clients(corpus, cfg)
    server = ServerState(
        build_model(cfg.server_model_config(corpus.num_items), _model_seed(cfg.seed, 2)),
        np.random.default_rng([cfg.seed, 0x5E]),
        cfg.server_config(),
    )
    ledger = CommLedger("ptf", messages=[] if keep_messages else None)
    result = RunResult("ptf", [], ledger, server=server, clients=clients)
    for rnd in range(cfg.global_rounds):
        subrounds = schedule(corpus.num_users, rnd, cfg.seed, cfg.subround_size)
        client_losses = []
        server_parts = {"rec": 0.0, "pc": 0.0, "is": 0.0}
        for sub_idx, sub in enumerate(subrounds):
            uploads: list[UploadMessage] = []
            for user in sorted(sub):
                state = clients[user]
                state.rng = client_rng(cfg.seed, user, rnd)
                losses = client_train(state, cfg.client_epochs, cfg.lr_client, cfg.num_negatives, cfg.soft_label_loss)
                if losses:
                    client_losses.append(losses[-1])
                else:
                    state.trained_since_upload = True
                msg = build_upload(state, rnd, cfg.beta, cfg.epsilon, cfg.sensitivity)
                ledger.record(rnd, "up", user, len(encode_upload(msg)), msg)
                uploads.append(msg)
            server.rng = np.random.default_rng([cfg.seed, rnd, sub_idx, 0x5E])
            parts = server_train(server, uploads)
            for key in server_parts:
                server_parts[key] += parts[key]
            for msg in uploads:
                downloads: list[DownloadMessage] = []
                for _ in range(cfg.shared_sequences):
                    down = build_download(server, msg.user, uploads, cfg.num_negatives, rnd)
                    ledger.record(rnd, "down", msg.user, len(encode_download(down)), down)
                    downloads.append(down)
                clients[msg.user].receive([d.payload for d in downloads])
        metrics = _maybe_eval(cfg, rnd, corpus, lambda: _ptf_metrics(server, clients, corpus, cfg, rnd, result))
        result.reports.append(
            RoundReport(
                rnd,
                subrounds,
                float(np.mean(client_losses)) if client_losses else None,
                server_parts,
                ledger.total("up", rnd),
                ledger.total("down", rnd),
                metrics,
            )
        )
    return result


def _ptf_metrics(server, clients, corpus, cfg, rnd, result) -> dict:
    oracle = evaluate(server.model, corpus, k=cfg.eval_k, mode="ptf")
    # inference with the privacy-preserving query: the user's latest upload
    queries = {u: list(h[-1].items) for u, h in server.upload_history.items() if h}
    private = evaluate(server.model, corpus, k=cfg.eval_k, mode="ptf-private", contexts=queries)
    result.evaluations += [(oracle, rnd), (private, rnd)]
    return {"ptf": oracle.as_row(rnd), "ptf-private": private.as_row(rnd)}


def local_step(model: SeqModel, seq, negatives: np.ndarray, opt: ag.SGD) -> float:
    ids = np.asarray(seq.items, dtype=np.int64)[None, :]
    states = model.hidden_states(ids)
    T = ids.shape[1]
    cands = np.concatenate([ids[0, :, None], negatives], axis=1)
    scores = model.candidate_scores(states[0, :T], cands)
    loss = rec_loss(scores[:, 0], scores[:, 1:], neg_mask=negatives > 0)
    opt.zero_grad()
    ag.backward(loss)
    opt.step()
    return loss.item()


def average_parameters(vectors: list[np.ndarray]) -> np.ndarray:
    """Uniform FedAvg aggregation."""
    return np.mean(np.stack(vectors), axis=0)


def run_fedavg_baseline(corpus: Corpus, cfg: ProtocolConfig, keep_messages: bool = False) -> RunResult:
    """Parameter-transmission baseline: every client trains a copy of the
    server-preset model, the server averages the returned parameters."""
    cfg.validate()
    global_model = build_model(cfg.server_model_config(corpus.num_items), _model_seed(cfg.seed, 2))
    seqs = {s.user: dataclasses.replace(s, items=list(s.items), trained_items=set(s.trained_items)) for s in corpus.sequences}
    ledger = CommLedger("fedavg", messages=[] if keep_messages else None)
    result = RunResult("fedavg", [], ledger, model=global_model)
    for rnd in range(cfg.global_rounds):
        subrounds = schedule(corpus.num_users, rnd, cfg.seed, cfg.subround_size)
        losses = []
        for sub in subrounds:
            broadcast = checkpoint_bytes(global_model)
            vectors = []
            for user in sorted(sub):
                ledger.record(rnd, "down", user, len(broadcast), broadcast if keep_messages else None)
                local = global_model.clone()
                opt = ag.SGD(local.parameters(), cfg.lr_client)
                rng = client_rng(cfg.seed, user, rnd)
                loss = None
                for _ in range(cfg.client_epochs):
                    negs = sample_negative_block(
                        seqs[user], len(seqs[user]), cfg.num_negatives, rng, corpus.num_items, heldout_visible=False, allow_short=True
                    )
                    loss = local_step(local, seqs[user], negs, opt)
                if loss is not None:
                    losses.append(loss)
                blob = checkpoint_bytes(local)
                ledger.record(rnd, "up", user, len(blob), blob if keep_messages else None)
                vectors.append(local.state_vector())
            global_model.load_state_vector(average_parameters(vectors))
        metrics = _maybe_eval(cfg, rnd, corpus, lambda: _single_metrics(global_model, corpus, cfg, rnd, "fedavg", result))
        result.reports.append(
            RoundReport(rnd, subrounds, float(np.mean(losses)) if losses else None, None, ledger.total("up", rnd), ledger.total("down", rnd), metrics)
        )
    return result


def _single_metrics(model, corpus, cfg, rnd, mode, result) -> dict:
    res = evaluate(model, corpus, k=cfg.eval_k, mode=mode)
    result.evaluations.append((res, rnd))
    return {mode: res.as_row(rnd)}


def run_local_only(corpus: Corpus, cfg: ProtocolConfig) -> RunResult:
    """Each client trains its own model on its own sequence; no communication."""
    cfg.validate()
    clients = _make_clients(corpus, cfg)
    ledger = CommLedger("local")
    result = RunResult("local", [], ledger, clients=clients)
    for rnd in range(cfg.global_rounds):
        subrounds = schedule(corpus.num_users, rnd, cfg.seed, cfg.subround_size)
        losses = []
        for user in sorted(clients):
            state = clients[user]
            state.rng = client_rng(cfg.seed, user, rnd)
            out = client_train(state, cfg.client_epochs, cfg.lr_client, cfg.num_negatives, cfg.soft_label_loss)
            if out:
                losses.append(out[-1])
        models = {u: c.model for u, c in clients.items()}
        metrics = _maybe_eval(cfg, rnd, corpus, lambda: _single_metrics(models, corpus, cfg, rnd, "local", result))
        result.reports.append(RoundReport(rnd, subrounds, float(np.mean(losses)) if losses else None, None, 0, 0, metrics))
    return result


def local_only_baseline(corpus: Corpus, cfg: ProtocolConfig) -> EvalResult:
    result = run_local_only(corpus, cfg)
    models = {u: c.model for u, c in result.clients.items()}
    return evaluate(models, corpus, k=cfg.eval_k, mode="local")


def run(corpus: Corpus, cfg: ProtocolConfig, keep_messages: bool = False) -> RunResult:
    mode = MODE_ALIASES[cfg.validate().mode]
    if mode == "ptf":
        return run_ptf(corpus, cfg, keep_messages)
    if mode == "fedavg":
        return run_fedavg_baseline(corpus, cfg, keep_messages)
    return run_local_only(corpus, cfg)
