"""Interaction logs: CSV ingestion, leave-last-two preprocessing, a planted
Markov-chain synthetic source, negative sampling and a binary corpus cache."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CodecError, InputError, PreprocessingError, SchemaError

log = logging.getLogger(__name__)

CORPUS_MAGIC = b"SQCP"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class InteractionSequence:
    """One user's log after preprocessing.

    ``items`` is the training part; ``val_item`` and ``test_item`` are the last
    two interactions. ``trained_items`` starts as set(items) and grows as
    negatives are drawn for local training.
    """

    user: int
    items: list[int]
    val_item: int
    test_item: int
    trained_items: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.trained_items |= set(self.items)

    @property
    def interacted(self) -> set[int]:
        return set(self.items) | {self.val_item, self.test_item}

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Corpus:
    sequences: list[InteractionSequence]
    num_items: int
    user_ids: list[str]
    item_ids: list[str]  # index 0 is the padding placeholder
    item_cluster: np.ndarray | None = None  # synthetic corpora only

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    def user_index(self, raw: str) -> int:
        return self.user_ids.index(raw)

    def item_index(self, raw: str) -> int:
        return self.item_ids.index(raw, 1)

    def to_raw(self) -> list[RawInteraction]:
        """Re-serialise as raw interactions with increasing timestamps."""
        rows = []
        for seq in self.sequences:
            full = seq.items + [seq.val_item, seq.test_item]
            rows.extend(RawInteraction(self.user_ids[seq.user], self.item_ids[i], t) for t, i in enumerate(full))
        return rows


# ---------------------------------------------------------------------------
# ingestion


def load_csv(path, user_col: str = "user", item_col: str = "item", time_col: str = "timestamp") -> list[RawInteraction]:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            log.warning("%s is empty", path)
            return []
        missing = [c for c in (user_col, item_col, time_col) if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for row in reader:
            line = reader.line_num
            user, item, stamp = row.get(user_col), row.get(item_col), row.get(time_col)
            if user is None or item is None or stamp is None:
                raise SchemaError(f"{path}:{line}: row has too few fields")
            try:
                ts = int(stamp)
            except ValueError:
                raise SchemaError(f"{path}:{line}: timestamp {stamp!r} is not an integer") from None
            rows.append(RawInteraction(user, item, ts))
    if not rows:
        log.warning("%s has a header but no rows", path)
    return rows


def preprocess(raw: Iterable[RawInteraction], min_len: int = 5, max_len: int = 20) -> Corpus:
    """Group by user, sort by time (file order breaks ties), drop short users,
    keep the newest ``max_len`` interactions, hold out the last two.

    Dense user ids follow first appearance in the input; dense item ids follow
    first appearance when walking kept users in that order.
    """
    if min_len < 3:
        raise InputError("min_len must leave at least one training item")
    by_user: dict[str, list[tuple[int, int, str]]] = {}
    for pos, r in enumerate(raw):
        by_user.setdefault(r.user_id, []).append((r.timestamp, pos, r.item_id))
    user_ids: list[str] = []
    item_ids: list[str] = ["<pad>"]
    item_lookup: dict[str, int] = {}
    sequences = []
    for user, events in by_user.items():
        if len(events) < min_len:
            continue
        events.sort()
        kept = [item for _, _, item in events[-max_len:]]
        dense = []
        for item in kept:
            if item not in item_lookup:
                item_lookup[item] = len(item_ids)
                item_ids.append(item)
            dense.append(item_lookup[item])
        sequences.append(InteractionSequence(len(user_ids), dense[:-2], dense[-2], dense[-1]))
        user_ids.append(user)
    if not sequences:
        raise PreprocessingError(f"no user has at least {min_len} interactions")
    return Corpus(sequences, len(item_ids) - 1, user_ids, item_ids)


# ---------------------------------------------------------------------------
# negatives


def negative_pool(seq: InteractionSequence, num_items: int, heldout_visible: bool = True) -> np.ndarray:
    """Items the user never interacted with (train, val and test excluded).

    With ``heldout_visible=False`` only the training items are excluded: a
    trainer that cannot see its own held-out interactions must not avoid them,
    or they end up as the only items never pushed down.
    """
    pool = np.ones(num_items + 1, dtype=bool)
    pool[0] = False
    pool[list(seq.interacted if heldout_visible else seq.items)] = False
    return np.flatnonzero(pool)


def sample_negatives(seq: InteractionSequence, t: int, k: int, rng: np.random.Generator, num_items: int) -> list[int]:
    """``k`` distinct uniform non-interacted items for step ``t``; recorded in ``trained_items``.

    Draws do not depend on ``t``; the argument keeps per-step call sites explicit.
    """
    out = sample_negative_block(seq, 1, k, rng, num_items)[0]
    return [int(i) for i in out]


def sample_negative_block(
    seq: InteractionSequence,
    steps: int,
    k: int,
    rng: np.random.Generator,
    num_items: int,
    heldout_visible: bool = True,
    allow_short: bool = False,
) -> np.ndarray:
    """Negatives for ``steps`` consecutive steps at once, shape [steps, k].

    ``allow_short`` pads with id 0 instead of raising when the pool holds
    fewer than ``k`` items (callers mask those slots).
    """
    pool = negative_pool(seq, num_items, heldout_visible)
    out = draw_padded(pool, steps, k, rng) if allow_short else draw_from_pool(pool, steps, k, rng)
    seq.trained_items.update(int(i) for i in np.unique(out) if i)
    return out


def draw_from_pool(pool: np.ndarray, steps: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k < 0:
        raise InputError("negative count must be non-negative")
    if k > len(pool) or (k > 0 and len(pool) == 0):
        raise InputError(f"cannot draw {k} distinct negatives from a pool of {len(pool)}")
    if k == 0:
        return np.zeros((steps, 0), dtype=np.int64)
    if k == 1:
        return pool[rng.integers(0, len(pool), size=(steps, 1))]
    return np.stack([rng.choice(pool, size=k, replace=False) for _ in range(steps)]) if steps else np.zeros((0, k), dtype=np.int64)


def draw_padded(pool: np.ndarray, steps: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Like ``draw_from_pool`` but a short pool leaves trailing 0 slots."""
    avail = min(k, len(pool))
    out = np.zeros((steps, k), dtype=np.int64)
    out[:, :avail] = draw_from_pool(pool, steps, avail, rng)
    return out


# ---------------------------------------------------------------------------
# synthetic source

WITHIN_CLUSTER_MASS = 0.8
CLUSTER_SIZE = 10
DIRICHLET_ALPHA = 0.5


@dataclass
class MarkovSource:
    """First-order chain over items 1..n with planted clusters.

    From item i the next item falls inside i's cluster with probability
    ``WITHIN_CLUSTER_MASS``; the within-cluster and outside shares are each
    spread by a row-specific Dirichlet draw. Self-transitions are excluded.
    """

    num_items: int
    seed: int
    transition: np.ndarray = field(init=False, repr=False)
    cluster: np.ndarray = field(init=False, repr=False)
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_items < 10:
            raise InputError("synthetic corpora need at least 10 items")
        rng = np.random.default_rng([self.seed, 0x5EED])
        n = self.num_items
        n_clusters = max(2, n // CLUSTER_SIZE)
        cluster = np.zeros(n + 1, dtype=np.int64)
        cluster[1:] = rng.permutation(np.arange(n) % n_clusters)
        P = np.zeros((n + 1, n + 1))
        for i in range(1, n + 1):
            inside = np.flatnonzero(cluster == cluster[i])
            inside = inside[(inside != i) & (inside != 0)]
            outside = np.flatnonzero(cluster != cluster[i])
            outside = outside[outside != 0]
            P[i, inside] = WITHIN_CLUSTER_MASS * rng.dirichlet(np.full(len(inside), DIRICHLET_ALPHA))
            P[i, outside] = (1.0 - WITHIN_CLUSTER_MASS) * rng.dirichlet(np.full(len(outside), DIRICHLET_ALPHA))
        self.transition = P
        self.cluster = cluster
        self._cum = np.cumsum(P, axis=1)

    def sample(self, length: int, rng: np.random.Generator) -> list[int]:
        cum = self._cum
        cur = int(rng.integers(1, self.num_items + 1))
        out = [cur]
        for u in rng.random(length - 1):
            cur = int(min(np.searchsorted(cum[cur], u, side="right"), self.num_items))
            out.append(cur)
        return out


def synth_corpus(num_users: int, num_items: int, markov_order: int = 1, seed: int = 0, max_len: int = 20) -> Corpus:
    """Users drawn from a ``MarkovSource``; raw lengths uniform in [5, max_len + 2]."""
    if markov_order != 1:
        raise InputError("only first-order chains are generated")
    source = MarkovSource(num_items, seed)
    rng = np.random.default_rng([seed, 0xC0])
    raw = []
    for u in range(num_users):
        length = int(rng.integers(5, max_len + 3))
        raw.extend(RawInteraction(f"u{u}", f"i{i}", t) for t, i in enumerate(source.sample(length, rng)))
    corpus = preprocess(raw, min_len=5, max_len=max_len)
    # dense ids are a relabelling of the generator's ids; carry clusters across
    cluster = np.zeros(corpus.num_items + 1, dtype=np.int64)
    for dense, name in enumerate(corpus.item_ids[1:], start=1):
        cluster[dense] = source.cluster[int(name[1:])]
    corpus.item_cluster = cluster
    return corpus


# ---------------------------------------------------------------------------
# binary cache: u32 little-endian throughout


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def corpus_bytes(corpus: Corpus) -> bytes:
    parts = [CORPUS_MAGIC, struct.pack("<IIII", CORPUS_VERSION, corpus.num_users, corpus.num_items, int(corpus.item_cluster is not None))]
    for name in corpus.user_ids:
        parts.append(_pack_str(name))
    for name in corpus.item_ids[1:]:
        parts.append(_pack_str(name))
    for seq in corpus.sequences:
        parts.append(struct.pack(f"<I{len(seq.items)}I", len(seq.items), *seq.items))
        parts.append(struct.pack("<II", seq.val_item, seq.test_item))
    if corpus.item_cluster is not None:
        parts.append(corpus.item_cluster.astype("<u4").tobytes())
    return b"".join(parts)


def corpus_from_bytes(blob: bytes) -> Corpus:
    if blob[:4] != CORPUS_MAGIC:
        raise CodecError("not a corpus cache")
    try:
        version, n_users, n_items, has_cluster = struct.unpack_from("<IIII", blob, 4)
        if version != CORPUS_VERSION:
            raise CodecError(f"unsupported corpus version {version}")
        off = 20

        def read_str():
            nonlocal off
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            s = blob[off : off + n].decode("utf-8")
            off += n
            return s

        users = [read_str() for _ in range(n_users)]
        items = ["<pad>"] + [read_str() for _ in range(n_items)]
        seqs = []
        for u in range(n_users):
            (n,) = struct.unpack_from("<I", blob, off)
            body = list(struct.unpack_from(f"<{n + 2}I", blob, off + 4))
            off += 4 + 4 * (n + 2)
            seqs.append(InteractionSequence(u, body[:n], body[n], body[n + 1]))
        cluster = None
        if has_cluster:
            cluster = np.frombuffer(blob, dtype="<u4", count=n_items + 1, offset=off).astype(np.int64)
            off += 4 * (n_items + 1)
    except (struct.error, ValueError) as exc:
        raise CodecError(f"corpus cache truncated: {exc}") from None
    if off != len(blob):
        raise CodecError("trailing bytes in corpus cache")
    return Corpus(seqs, n_items, users, items, cluster)


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus_bytes(corpus))


def load_corpus(path) -> Corpus:
    return corpus_from_bytes(Path(path).read_bytes())
