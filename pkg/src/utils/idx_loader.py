"""
IDX Loader Utility
Reads MNIST-format (IDX) image/label files into Datasets and downloads the
archives into the data root with a local cache.
"""

import gzip
import logging
import os
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import requests

from src.utils.episodes import Dataset, fit_to_backbone

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "TSA_DATA_DIR"
DEFAULT_DATA_DIR = Path("data")
DOWNLOAD_TIMEOUT = 60

# Remote archives, stored locally as {data_root}/{name}/{part}.idx.gz
IDX_SOURCES = {
    "mnist": {
        "train-images": "https://storage.googleapis.com/cvdf-datasets/mnist/train-images-idx3-ubyte.gz",
        "train-labels": "https://storage.googleapis.com/cvdf-datasets/mnist/train-labels-idx1-ubyte.gz",
        "test-images": "https://storage.googleapis.com/cvdf-datasets/mnist/t10k-images-idx3-ubyte.gz",
        "test-labels": "https://storage.googleapis.com/cvdf-datasets/mnist/t10k-labels-idx1-ubyte.gz",
    },
    "fashion-mnist": {
        "train-images": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/train-images-idx3-ubyte.gz",
        "train-labels": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/train-labels-idx1-ubyte.gz",
        "test-images": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/t10k-images-idx3-ubyte.gz",
        "test-labels": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/t10k-labels-idx1-ubyte.gz",
    },
}


class IdxFormatError(ValueError):
    """Raised for malformed IDX files"""


def resolve_data_dir(data_dir: Optional[Union[str, Path]] = None) -> Path:
    """CLI flag, then TSA_DATA_DIR, then ./data"""
    if data_dir:
        return Path(data_dir)
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else DEFAULT_DATA_DIR


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def parse_idx_images(buffer: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse an IDX3 image buffer into a (N, rows, cols) uint8 array"""
    if len(buffer) < 16:
        raise IdxFormatError(f"{source}: image header needs 16 bytes, file has {len(buffer)}")
    magic, count, rows, cols = struct.unpack(">IIII", buffer[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{source}: magic {magic:#010x} is not the image magic {IMAGE_MAGIC:#010x}")
    expected = count * rows * cols
    payload = len(buffer) - 16
    if payload != expected:
        raise IdxFormatError(f"{source}: header declares {count}x{rows}x{cols} = {expected} pixel bytes, "
                             f"payload has {payload}")
    return np.frombuffer(buffer, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def parse_idx_labels(buffer: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse an IDX1 label buffer into a (N,) uint8 array"""
    if len(buffer) < 8:
        raise IdxFormatError(f"{source}: label header needs 8 bytes, file has {len(buffer)}")
    magic, count = struct.unpack(">II", buffer[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{source}: magic {magic:#010x} is not the label magic {LABEL_MAGIC:#010x}")
    payload = len(buffer) - 8
    if payload != count:
        raise IdxFormatError(f"{source}: header declares {count} labels, payload has {payload} bytes")
    return np.frombuffer(buffer, dtype=np.uint8, offset=8).copy()


def read_idx_pair(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    images = parse_idx_images(_read_bytes(images_path), str(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path), str(labels_path))
    if len(images) != len(labels):
        raise IdxFormatError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    return images, labels


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path], name: str = "idx",
             domain_id: int = 0, split: str = "test", seen: bool = False) -> Dataset:
    """
    Load an IDX image/label pair as a Dataset.

    Args:
        images_path: IDX3 image file (optionally .gz)
        labels_path: IDX1 label file (optionally .gz)
        name: Dataset name
        domain_id: Domain identifier
        split: Split that receives every class
        seen: Whether the domain was used for pretraining

    Returns:
        Dataset of (N, 1, rows, cols) images scaled to [0, 1]
    """
    images, labels = read_idx_pair(images_path, labels_path)
    classes = np.unique(labels).astype(np.int64)
    logger.info("Loaded %d images (%dx%d) from %s", len(images), images.shape[1], images.shape[2], images_path)
    return Dataset(
        name=name,
        domain_id=domain_id,
        images=images[:, None, :, :].astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        splits={split: classes},
        seen=seen,
    )


def find_idx_file(directory: Path, part: str) -> Path:
    for candidate in (f"{part}.idx", f"{part}.idx.gz"):
        path = directory / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"No {part}.idx or {part}.idx.gz in {directory}")


def load_idx_directory(name: str, data_dir: Optional[Union[str, Path]] = None, part: str = "test",
                       resolution: int = 32, channels: int = 3, domain_id: int = 0) -> Dataset:
    """Load {data_root}/{name}/{part}-images.idx + labels, fitted to the backbone input"""
    directory = resolve_data_dir(data_dir) / name
    dataset = load_idx(find_idx_file(directory, f"{part}-images"), find_idx_file(directory, f"{part}-labels"),
                       name=name, domain_id=domain_id)
    return fit_to_backbone(dataset, resolution, channels)


def fetch_idx_dataset(name: str, data_dir: Optional[Union[str, Path]] = None,
                      force: bool = False) -> Dict[str, Path]:
    """
    Download the IDX archives of a known dataset into {data_root}/{name}/.

    Files already present are reused unless `force` is set.

    Returns:
        Mapping part -> local path
    """
    if name not in IDX_SOURCES:
        raise ValueError(f"Unknown IDX dataset '{name}', expected one of {sorted(IDX_SOURCES)}")
    directory = resolve_data_dir(data_dir) / name
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for part, url in IDX_SOURCES[name].items():
        target = directory / f"{part}.idx.gz"
        paths[part] = target
        if target.exists() and not force:
            logger.info("Using cached %s", target)
            continue
        logger.info("Downloading %s", url)
        response = requests.get(url, timeout=DOWNLOAD_TIMEOUT)
        response.raise_for_status()
        partial = target.with_suffix(".part")
        partial.write_bytes(response.content)
        partial.replace(target)
        logger.info("Saved %s (%d bytes)", target, len(response.content))
    return paths
