"""The only two message types that cross the client/server boundary, and
their bit-exact little-endian wire encodings.

Upload:   0x50, version, user u32, round u32, length u16, item ids u32 each.
Download: 0x51, version, user u32, round u32, step count u16, then per step a
          candidate count u8 followed by (item u32, score f64) pairs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodecError

UPLOAD_MAGIC = 0x50
DOWNLOAD_MAGIC = 0x51
WIRE_VERSION = 1

_HEAD = struct.Struct("<BBIIH")


@dataclass(frozen=True)
class UploadMessage:
    user: int
    round: int
    items: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))


@dataclass(frozen=True)
class SoftLabeledSequence:
    """Per-step candidate sets; candidate 0 of each step is the sequence item."""

    items: np.ndarray  # [T, C] int64
    scores: np.ndarray  # [T, C] float64

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        if items.ndim != 2 or items.shape != scores.shape:
            raise ValueError("candidate ids and scores must share a [steps, candidates] shape")
        if not np.isfinite(scores).all():
            raise ValueError("soft labels must be finite")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "scores", scores)

    @property
    def steps(self) -> list[list[tuple[int, float]]]:
        return [list(zip(map(int, r), map(float, s))) for r, s in zip(self.items, self.scores)]

    @property
    def sequence(self) -> list[int]:
        return [int(i) for i in self.items[:, 0]]

    def __len__(self) -> int:
        return self.items.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SoftLabeledSequence):
            return NotImplemented
        return np.array_equal(self.items, other.items) and np.array_equal(self.scores, other.scores)


@dataclass(frozen=True, eq=False)
class DownloadMessage:
    user: int
    round: int
    payload: SoftLabeledSequence

    def __eq__(self, other):
        if not isinstance(other, DownloadMessage):
            return NotImplemented
        return (self.user, self.round) == (other.user, other.round) and self.payload == other.payload


def upload_size(length: int) -> int:
    return _HEAD.size + 4 * length


def encode_upload(msg: UploadMessage) -> bytes:
    n = len(msg.items)
    return _HEAD.pack(UPLOAD_MAGIC, WIRE_VERSION, msg.user, msg.round, n) + struct.pack(f"<{n}I", *msg.items)


def decode_upload(blob: bytes) -> UploadMessage:
    try:
        magic, version, user, rnd, n = _HEAD.unpack_from(blob)
    except struct.error:
        raise CodecError("upload truncated") from None
    if magic != UPLOAD_MAGIC or version != WIRE_VERSION:
        raise CodecError("not an upload message")
    if len(blob) != upload_size(n):
        raise CodecError("upload length field disagrees with payload")
    return UploadMessage(user, rnd, struct.unpack_from(f"<{n}I", blob, _HEAD.size))


def encode_download(msg: DownloadMessage) -> bytes:
    items, scores = msg.payload.items, msg.payload.scores
    parts = [_HEAD.pack(DOWNLOAD_MAGIC, WIRE_VERSION, msg.user, msg.round, items.shape[0])]
    rec = np.empty(items.shape[1], dtype=[("item", "<u4"), ("score", "<f8")])
    for row_items, row_scores in zip(items, scores):
        if len(row_items) > 255:
            raise CodecError("at most 255 candidates per step")
        rec["item"], rec["score"] = row_items, row_scores
        parts.append(struct.pack("<B", len(row_items)))
        parts.append(rec.tobytes())
    return b"".join(parts)


def download_size(steps: int, candidates: int) -> int:
    return _HEAD.size + steps * (1 + 12 * candidates)


def decode_download(blob: bytes) -> DownloadMessage:
    try:
        magic, version, user, rnd, steps = _HEAD.unpack_from(blob)
    except struct.error:
        raise CodecError("download truncated") from None
    if magic != DOWNLOAD_MAGIC or version != WIRE_VERSION:
        raise CodecError("not a download message")
    off = _HEAD.size
    items, scores = [], []
    dtype = np.dtype([("item", "<u4"), ("score", "<f8")])
    for _ in range(steps):
        if off >= len(blob):
            raise CodecError("download truncated")
        c = blob[off]
        off += 1
        if off + 12 * c > len(blob):
            raise CodecError("download truncated")
        rec = np.frombuffer(blob, dtype=dtype, count=c, offset=off)
        off += 12 * c
        items.append(rec["item"].astype(np.int64))
        scores.append(rec["score"].astype(np.float64))
    if off != len(blob):
        raise CodecError("trailing bytes in download")
    width = len(items[0]) if items else 0
    payload = SoftLabeledSequence(np.array(items).reshape(steps, width), np.array(scores).reshape(steps, width))
    return DownloadMessage(user, rnd, payload)
