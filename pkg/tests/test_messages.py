import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqfed.errors import CodecError
from seqfed.messages import (
    DownloadMessage,
    SoftLabeledSequence,
    UploadMessage,
    decode_download,
    decode_upload,
    download_size,
    encode_download,
    encode_upload,
    upload_size,
)


class TestUpload:
    def test_layout(self):
        blob = encode_upload(UploadMessage(7, 3, [1, 2, 300]))
        assert blob == struct.pack("<BBIIH3I", 0x50, 1, 7, 3, 3, 1, 2, 300)

    def test_size_formula(self):
        assert upload_size(20) == 92
        assert len(encode_upload(UploadMessage(0, 0, range(1, 21)))) == 92

    def test_roundtrip(self):
        msg = UploadMessage(12, 4, [5, 5, 9])
        assert decode_upload(encode_upload(msg)) == msg

    def test_rejects_garbage(self):
        blob = encode_upload(UploadMessage(1, 1, [1, 2]))
        with pytest.raises(CodecError):
            decode_upload(blob[:-1])
        with pytest.raises(CodecError):
            decode_upload(b"\x51" + blob[1:])
        with pytest.raises(CodecError):
            decode_upload(b"\x50")


class TestDownload:
    def payload(self):
        return SoftLabeledSequence([[3, 7], [4, 1]], [[0.5, -1.25], [2.0, 0.0]])

    def test_layout(self):
        blob = encode_download(DownloadMessage(2, 5, self.payload()))
        expect = struct.pack("<BBIIH", 0x51, 1, 2, 5, 2)
        expect += struct.pack("<B", 2) + struct.pack("<IdId", 3, 0.5, 7, -1.25)
        expect += struct.pack("<B", 2) + struct.pack("<IdId", 4, 2.0, 1, 0.0)
        assert blob == expect
        assert len(blob) == download_size(2, 2)

    def test_roundtrip(self):
        msg = DownloadMessage(2, 5, self.payload())
        assert decode_download(encode_download(msg)) == msg

    def test_single_candidate_steps(self):
        msg = DownloadMessage(0, 0, SoftLabeledSequence([[3], [4]], [[0.1], [0.2]]))
        assert decode_download(encode_download(msg)) == msg

    def test_truncated(self):
        blob = encode_download(DownloadMessage(2, 5, self.payload()))
        for cut in (3, 13, 20, len(blob) - 1):
            with pytest.raises(CodecError):
                decode_download(blob[:cut])
        with pytest.raises(CodecError):
            decode_download(blob + b"\x00")

    def test_zero_steps(self):
        msg = DownloadMessage(1, 1, SoftLabeledSequence(np.zeros((0, 2)), np.zeros((0, 2))))
        assert len(decode_download(encode_download(msg)).payload) == 0

    def test_non_finite_scores_rejected(self):
        with pytest.raises(ValueError):
            SoftLabeledSequence([[1, 2]], [[0.0, np.nan]])

    def test_views(self):
        p = self.payload()
        assert p.sequence == [3, 4]
        assert p.steps[0] == [(3, 0.5), (7, -1.25)]
        assert len(p) == 2


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**32 - 1),
    st.lists(st.integers(1, 2**32 - 1), max_size=40),
)
def test_upload_roundtrip_property(user, rnd, items):
    msg = UploadMessage(user, rnd, items)
    blob = encode_upload(msg)
    assert len(blob) == upload_size(len(items))
    assert decode_upload(blob) == msg


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 6), st.integers(0, 2**31))
def test_download_roundtrip_property(steps, width, seed):
    rng = np.random.default_rng(seed)
    items = rng.integers(1, 1000, size=(steps, width))
    scores = rng.normal(scale=10, size=(steps, width))
    msg = DownloadMessage(seed % 97, seed % 13, SoftLabeledSequence(items, scores))
    blob = encode_download(msg)
    assert len(blob) == download_size(steps, width)
    assert decode_download(blob) == msg
