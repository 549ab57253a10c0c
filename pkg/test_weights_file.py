"""
Tests for the binary weights snapshot format
"""

import struct

import numpy as np
import pytest

from conftest import TINY_SPEC
from src.utils.backbone import init_weights
from src.utils.tensor import Tensor
from src.utils.weights_file import (
    MAGIC,
    WeightsFormatError,
    decode_weights,
    encode_weights,
    export_weights,
    import_weights,
    weights_digest,
)


@pytest.fixture
def weights():
    return init_weights(TINY_SPEC, seed=7)


def with_heads(weights):
    weights.heads = {
        "head0.weight": Tensor(np.arange(16.0).reshape(2, 8)),
        "head0.bias": Tensor(np.array([0.5, -0.5])),
    }
    return weights


class TestRoundTrip:

    def test_decode_restores_every_tensor(self, weights):
        restored = decode_weights(encode_weights(weights))
        assert restored.spec == weights.spec
        assert list(restored.tensors) == list(weights.tensors)
        for name, tensor in weights.tensors.items():
            np.testing.assert_array_equal(restored.tensors[name].data, tensor.data)
        assert restored.heads == {}

    def test_float32_kept(self, weights):
        for name, tensor in weights.tensors.items():
            weights.tensors[name] = Tensor(tensor.data.astype(np.float32))
        restored = decode_weights(encode_weights(weights))
        assert all(t.dtype == np.float32 for t in restored.tensors.values())

    def test_heads_only_on_request(self, weights):
        weights = with_heads(weights)
        assert decode_weights(encode_weights(weights)).heads == {}
        restored = decode_weights(encode_weights(weights, include_heads=True))
        np.testing.assert_array_equal(restored.heads["head0.weight"].data, weights.heads["head0.weight"].data)

    def test_file_round_trip(self, weights, tmp_path):
        path = export_weights(weights, tmp_path / "nested" / "phi.tsaw")
        assert path.read_bytes()[:4] == MAGIC
        assert weights_digest(import_weights(path)) == weights_digest(weights)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            import_weights(tmp_path / "absent.tsaw")


class TestCorruption:

    def test_bad_magic(self, weights):
        buffer = b"NOPE" + encode_weights(weights)[4:]
        with pytest.raises(WeightsFormatError, match="magic"):
            decode_weights(buffer)

    def test_unsupported_version(self, weights):
        buffer = encode_weights(weights)
        buffer = buffer[:4] + struct.pack("<I", 2) + buffer[8:]
        with pytest.raises(WeightsFormatError, match="version 2"):
            decode_weights(buffer)

    @pytest.mark.parametrize("keep", [2, 10, 200, -2])
    def test_truncated(self, weights, keep):
        buffer = encode_weights(weights)
        with pytest.raises(WeightsFormatError, match="[Tt]runcated"):
            decode_weights(buffer[:keep])

    def test_truncation_reports_offset(self, weights):
        buffer = encode_weights(weights)
        with pytest.raises(WeightsFormatError, match="at offset"):
            decode_weights(buffer[:len(buffer) // 2])

    def test_payload_bit_flip_fails_crc(self, weights):
        buffer = bytearray(encode_weights(weights))
        buffer[-5] ^= 0x01
        with pytest.raises(WeightsFormatError, match="CRC32 mismatch"):
            decode_weights(bytes(buffer))

    def test_trailing_bytes(self, weights):
        with pytest.raises(WeightsFormatError, match="trailing"):
            decode_weights(encode_weights(weights) + b"\x00")

    def test_shapes_disagree_with_spec(self, weights):
        weights.tensors["stem.conv"] = Tensor(np.zeros((4, 3, 1, 1)))
        with pytest.raises(WeightsFormatError, match="disagree"):
            decode_weights(encode_weights(weights))


class TestDigest:

    def test_stable(self, weights):
        assert weights_digest(weights) == weights_digest(init_weights(TINY_SPEC, seed=7))

    def test_changes_with_values(self, weights):
        before = weights_digest(weights)
        weights.tensors["stem.bn.beta"].data[0] += 1e-9
        assert weights_digest(weights) != before

    def test_ignores_heads(self, weights):
        before = weights_digest(weights)
        assert weights_digest(with_heads(weights)) == before
