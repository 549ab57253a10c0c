"""
Weights File Module
Little-endian binary snapshot format for backbone weights (TSAW v1).

Layout:
    magic "TSAW" | u32 version | u32 descriptor length | JSON spec descriptor
    body: u32 record count, then per record
        u32 name length | utf-8 name | u8 dtype tag | u32 rank | u32 extents... | raw payload
    u32 CRC32 of the body
"""

import hashlib
import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from src.utils.backbone import BackboneSpec, BackboneWeights
from src.utils.tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"TSAW"
FORMAT_VERSION = 1

# dtype tag -> little-endian numpy dtype
DTYPE_TAGS = {
    1: np.dtype("<f8"),
    2: np.dtype("<f4"),
}
TAG_FOR_DTYPE = {dt.newbyteorder("="): tag for tag, dt in DTYPE_TAGS.items()}


class WeightsFormatError(ValueError):
    """Raised for unreadable or inconsistent weights files"""


def _dtype_tag(array: np.ndarray) -> int:
    key = array.dtype.newbyteorder("=")
    if key not in TAG_FOR_DTYPE:
        raise WeightsFormatError(f"Unsupported dtype for export: {array.dtype}")
    return TAG_FOR_DTYPE[key]


def encode_body(tensors: Dict[str, Tensor]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(tensor.data)
        tag = _dtype_tag(data)
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BI", tag, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.astype(DTYPE_TAGS[tag], copy=False).tobytes(order="C"))
    return b"".join(chunks)


def encode_weights(weights: BackboneWeights, include_heads: bool = False) -> bytes:
    """Serialize phi (and optionally the pretraining heads) to bytes"""
    tensors = dict(weights.tensors)
    if include_heads:
        tensors.update(weights.heads)
    descriptor = json.dumps(weights.spec.to_dict(), sort_keys=True).encode("utf-8")
    body = encode_body(tensors)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(descriptor)) + descriptor
    return header + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    """Cursor over a byte buffer that reports the failing offset"""

    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if n < 0 or end > len(self.buffer):
            raise WeightsFormatError(
                f"Truncated weights file: need {n} bytes for {what} at offset {self.offset}, "
                f"only {len(self.buffer) - self.offset} left"
            )
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weights(buffer: bytes) -> BackboneWeights:
    """Parse bytes produced by encode_weights"""
    reader = _Reader(buffer)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise WeightsFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}")
    version, desc_len = reader.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"Unsupported weights format version {version} (reader is v{FORMAT_VERSION})")
    try:
        spec = BackboneSpec.from_dict(json.loads(reader.take(desc_len, "spec descriptor").decode("utf-8")))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, WeightsFormatError):
            raise
        raise WeightsFormatError(f"Malformed spec descriptor: {exc}") from exc

    body_start = reader.offset
    if len(buffer) - body_start < 4:
        raise WeightsFormatError("Truncated weights file: missing body")
    (count,) = reader.unpack("<I", "record count")
    records: Dict[str, Tensor] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<I", f"record {index} name length")
        name = reader.take(name_len, f"record {index} name").decode("utf-8")
        tag, rank = reader.unpack("<BI", f"record '{name}' header")
        if tag not in DTYPE_TAGS:
            raise WeightsFormatError(f"Unknown dtype tag {tag} for record '{name}'")
        shape = reader.unpack(f"<{rank}I", f"record '{name}' extents")
        dtype = DTYPE_TAGS[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(n_bytes, f"record '{name}' payload")
        array = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if name in records:
            raise WeightsFormatError(f"Duplicate record '{name}'")
        records[name] = Tensor(array, dtype=array.dtype)
    body_end = reader.offset
    (crc,) = reader.unpack("<I", "CRC32")
    if reader.offset != len(buffer):
        raise WeightsFormatError(f"{len(buffer) - reader.offset} trailing bytes after CRC32")
    actual = zlib.crc32(buffer[body_start:body_end]) & 0xFFFFFFFF
    if crc != actual:
        raise WeightsFormatError(f"CRC32 mismatch: stored {crc:#010x}, computed {actual:#010x}")

    heads = {name: t for name, t in records.items() if name.startswith("head")}
    tensors = {name: t for name, t in records.items() if not name.startswith("head")}
    weights = BackboneWeights(spec, tensors, heads=heads)
    try:
        weights.check_shapes()
    except ShapeError as exc:
        raise WeightsFormatError(f"Weights disagree with embedded spec: {exc}") from exc
    return weights


def export_weights(weights: BackboneWeights, path: Union[str, Path], include_heads: bool = False) -> Path:
    """
    Write a weights snapshot. Meta-test snapshots (the default) omit heads.

    Args:
        weights: Backbone weights to write
        path: Destination file
        include_heads: Also store the pretraining heads psi_k

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_weights(weights, include_heads=include_heads)
    path.write_bytes(payload)
    logger.info("Wrote %s (%d bytes, %d tensors)", path, len(payload), len(weights.tensors))
    return path


def import_weights(path: Union[str, Path]) -> BackboneWeights:
    """Read a weights snapshot written by export_weights"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Weights file not found: {path}")
    weights = decode_weights(path.read_bytes())
    logger.info("Loaded %s (%s, %d tensors)", path, weights.spec.name, len(weights.tensors))
    return weights


def weights_digest(weights: BackboneWeights) -> str:
    """SHA-256 of the canonical encoding of phi"""
    return hashlib.sha256(encode_weights(weights)).hexdigest()
