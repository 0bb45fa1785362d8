"""
Tests for the tensor checkpoint format
"""

import struct

import numpy as np
import pytest

from near.core.errors import FormatError
from near.infra.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    strip_prefix,
    with_prefix,
)


class TestCheckpointFormat:
    """NEARCKPT 레코드"""

    def test_save_and_load(self, tmp_path):
        tensors = {
            "a.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
            "optim/step": np.array(7.0),
        }
        path = tmp_path / "nested" / "model.ckpt"
        save_checkpoint(str(path), tensors)
        loaded = load_checkpoint(str(path))
        assert list(loaded) == list(tensors)
        np.testing.assert_array_equal(loaded["a.weight"], tensors["a.weight"])
        assert loaded["optim/step"].shape == ()
        assert float(loaded["optim/step"]) == 7.0

    def test_record_layout(self):
        blob = encode_checkpoint({"w": np.array([1.5], dtype=np.float32)})
        assert blob[:8] == b"NEARCKPT"
        assert struct.unpack_from("<I", blob, 8) == (1,)
        assert struct.unpack_from("<I", blob, 12) == (1,)
        assert blob[16:17] == b"w"
        assert struct.unpack_from("<IQ", blob, 17) == (1, 1)
        assert struct.unpack_from("<f", blob, 29) == (1.5,)

    def test_float64_values_are_stored_as_f32(self):
        loaded = decode_checkpoint(encode_checkpoint({"x": np.array([0.1], dtype=np.float64)}))
        assert loaded["x"].dtype == np.float32

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            decode_checkpoint(b"NOTACKPT\x01\x00\x00\x00")

    def test_unsupported_version(self):
        with pytest.raises(FormatError, match="version"):
            decode_checkpoint(b"NEARCKPT" + struct.pack("<I", 9))

    def test_truncated_payload(self):
        blob = encode_checkpoint({"w": np.zeros(4, dtype=np.float32)})
        with pytest.raises(FormatError, match="Truncated"):
            decode_checkpoint(blob[:-2])

    def test_truncated_header(self):
        blob = encode_checkpoint({"weights": np.zeros(4, dtype=np.float32)})
        with pytest.raises(FormatError, match="Truncated"):
            decode_checkpoint(blob[:18])


class TestPrefixes:
    """하위 모듈별 이름 공간"""

    def test_prefix_round_trip(self):
        state = with_prefix("tokenizer/", {"a": np.zeros(1), "b": np.ones(1)})
        state["decoder/c"] = np.zeros(1)
        assert set(strip_prefix("tokenizer/", state)) == {"a", "b"}
