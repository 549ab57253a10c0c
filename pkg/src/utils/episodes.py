"""
Episodes Module
Datasets with disjoint class splits, synthetic multi-domain generation with
controllable shift, and the few-shot episode samplers.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
PROTOCOLS = ("varying", "vw5shot", "5way1shot")

# Episode composition
QUERY_PER_CLASS = 10
MIN_WAY = 5
MAX_WAY = 20
MAX_SHOTS = 10
FIXED_SHOTS = 5

SHIFT_MAX_CONDITION = 100.0

# Synthetic generation defaults
SYNTHETIC_RESOLUTION = 32
SYNTHETIC_CHANNELS = 3
SYNTHETIC_NOISE = 0.05
BLOBS_PER_CLASS = (3, 6)
BLOB_SIGMA = (2.0, 6.0)
INSTANCE_SHIFT = 1

FAMILIES = ("identity", "channel_mix", "rotation", "texture", "noise")


class EpisodeError(ValueError):
    """Raised when a dataset cannot supply the requested episode"""


@dataclass
class Dataset:
    """
    Images (N, C, H, W) with pixels in [0, 1] and integer class labels.

    `splits` maps train/val/test to disjoint arrays of class ids. Channel
    mean/std come from the train split (all images if it is empty).
    """
    name: str
    domain_id: int
    images: np.ndarray
    labels: np.ndarray
    splits: Dict[str, np.ndarray]
    seen: bool = True
    channel_mean: np.ndarray = field(init=False)
    channel_std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise EpisodeError(f"{self.name}: images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise EpisodeError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        self.splits = {s: np.asarray(self.splits.get(s, []), dtype=np.int64) for s in SPLITS}
        seen_classes: Dict[int, str] = {}
        for split, classes in self.splits.items():
            for c in classes.tolist():
                if c in seen_classes:
                    raise EpisodeError(f"{self.name}: class {c} is in both {seen_classes[c]} and {split}")
                seen_classes[c] = split

        train = self.split_indices("train")
        source = self.images[train] if len(train) else self.images
        self.channel_mean = source.mean(axis=(0, 2, 3))
        std = source.std(axis=(0, 2, 3))
        self.channel_std = np.where(std > 0, std, 1.0)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def group(self) -> str:
        return "seen" if self.seen else "unseen"

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise EpisodeError(f"Unknown split '{split}', expected one of {SPLITS}")
        return np.flatnonzero(np.isin(self.labels, self.splits[split]))

    def class_indices(self, split: str) -> Dict[int, np.ndarray]:
        idx = self.split_indices(split)
        return {int(c): idx[self.labels[idx] == c] for c in np.sort(self.splits[split])}

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.channel_mean.reshape(1, -1, 1, 1)) / self.channel_std.reshape(1, -1, 1, 1)

    def split_arrays(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        """Normalized images and labels of one split"""
        idx = self.split_indices(split)
        return self.normalize(self.images[idx]), self.labels[idx]


def fit_to_backbone(dataset: Dataset, resolution: int, channels: int = 3) -> Dataset:
    """Centre-pad (or centre-crop) to `resolution` and tile grey images to `channels`"""
    images = dataset.images
    n, c, h, w = images.shape
    if c not in (1, channels):
        raise EpisodeError(f"{dataset.name}: cannot map {c} channels onto {channels}")
    if h != resolution or w != resolution:
        out = np.zeros((n, c, resolution, resolution))
        ch, cw = min(h, resolution), min(w, resolution)
        src_t, src_l = (h - ch) // 2, (w - cw) // 2
        dst_t, dst_l = (resolution - ch) // 2, (resolution - cw) // 2
        out[:, :, dst_t:dst_t + ch, dst_l:dst_l + cw] = images[:, :, src_t:src_t + ch, src_l:src_l + cw]
        images = out
    if c == 1 and channels > 1:
        images = np.repeat(images, channels, axis=1)
    return Dataset(dataset.name, dataset.domain_id, images, dataset.labels, dataset.splits, dataset.seen)


@dataclass
class SyntheticDomainSpec:
    """
    One synthetic domain: prototypes from `prototype_seed`, then a family
    transformation.

    Families and their params:
        identity    -
        channel_mix matrix (C x C)
        rotation    angle_range (lo, hi) in degrees, drawn per image
        texture     amplitude, frequency (cycles per image)
        noise       sigma (extra additive noise)
    """
    name: str
    family: str = "identity"
    params: Dict = field(default_factory=dict)
    seen: bool = True
    prototype_seed: int = 0
    n_classes: int = 30
    images_per_class: int = 30
    split_fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    noise: float = SYNTHETIC_NOISE
    resolution: int = SYNTHETIC_RESOLUTION

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"{self.name}: unknown family '{self.family}', expected one of {FAMILIES}")
        if self.n_classes < 2:
            raise ValueError(f"{self.name}: needs at least 2 classes, got {self.n_classes}")
        if self.images_per_class < 1:
            raise ValueError(f"{self.name}: needs at least 1 image per class")

    def param_range(self) -> Optional[Tuple[float, float]]:
        """Scalar parameter interval used for the seen/unseen disjointness check"""
        if self.family == "rotation":
            lo, hi = self.params["angle_range"]
            return float(lo), float(hi)
        if self.family == "texture":
            f = float(self.params["frequency"])
            return f, f
        if self.family == "noise":
            s = float(self.params["sigma"])
            return s, s
        return None


def check_unseen_disjoint(specs: Sequence[SyntheticDomainSpec]) -> None:
    """Unseen transformation parameters must not overlap any seen domain's"""
    seen = [s for s in specs if s.seen]
    for unseen in (s for s in specs if not s.seen):
        for other in seen:
            if other.family != unseen.family:
                continue
            if unseen.family == "channel_mix":
                if np.allclose(np.asarray(unseen.params["matrix"]), np.asarray(other.params["matrix"])):
                    raise ValueError(f"Unseen domain '{unseen.name}' reuses the mixing matrix of '{other.name}'")
                continue
            a, b = unseen.param_range(), other.param_range()
            if a is not None and a[0] <= b[1] and b[0] <= a[1]:
                raise ValueError(f"Unseen domain '{unseen.name}' overlaps seen domain '{other.name}' "
                                 f"({unseen.family} range {a} vs {b})")


def render_prototypes(n_classes: int, rng: np.random.Generator, resolution: int = SYNTHETIC_RESOLUTION,
                      channels: int = SYNTHETIC_CHANNELS) -> np.ndarray:
    """Each class is a mixture of 3-6 coloured Gaussian blobs"""
    grid = np.arange(resolution, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    prototypes = np.zeros((n_classes, channels, resolution, resolution))
    for k in range(n_classes):
        for _ in range(rng.integers(BLOBS_PER_CLASS[0], BLOBS_PER_CLASS[1] + 1)):
            cy, cx = rng.uniform(4, resolution - 4, size=2)
            sigma = rng.uniform(*BLOB_SIGMA)
            colour = rng.uniform(0.0, 1.0, size=channels)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            prototypes[k] += colour[:, None, None] * blob[None]
        prototypes[k] /= max(prototypes[k].max(), 1e-12)
    return prototypes


def mix_channels(images: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a C x C matrix to every pixel's channel vector"""
    return np.einsum("ij,njhw->nihw", np.asarray(matrix, dtype=np.float64), images)


def _apply_family(images: np.ndarray, spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.family == "identity":
        return images
    if spec.family == "channel_mix":
        return mix_channels(images, spec.params["matrix"])
    if spec.family == "rotation":
        lo, hi = spec.params["angle_range"]
        angles = rng.uniform(lo, hi, size=len(images))
        return np.stack([
            ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
            for img, angle in zip(images, angles)
        ])
    if spec.family == "texture":
        res = images.shape[-1]
        grid = np.arange(res) / res
        phase = rng.uniform(0, 2 * np.pi, size=images.shape[1])
        freq = float(spec.params["frequency"])
        wave = np.sin(2 * np.pi * freq * (grid[:, None] + grid[None, :])[None] + phase[:, None, None])
        return images + float(spec.params.get("amplitude", 0.3)) * wave[None]
    return images + rng.normal(0.0, float(spec.params["sigma"]), size=images.shape)


def _split_classes(n_classes: int, fractions: Tuple[float, float, float],
                   rng: np.random.Generator) -> Dict[str, np.ndarray]:
    order = rng.permutation(n_classes)
    total = float(sum(fractions))
    n_train = int(round(n_classes * fractions[0] / total))
    n_val = int(round(n_classes * fractions[1] / total))
    n_val = min(n_val, n_classes - n_train)
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


def gen_synthetic_domains(specs: Sequence[SyntheticDomainSpec], seed: int = 0) -> List[Dataset]:
    """
    Render one Dataset per domain spec.

    Prototypes, instance jitter and instance noise depend only on
    (seed, prototype_seed), so two domains sharing a prototype seed differ
    exactly by their family transformation. Noise is added before the
    transformation.
    """
    if not specs:
        raise ValueError("gen_synthetic_domains needs at least one domain spec")
    check_unseen_disjoint(specs)
    datasets = []
    for domain_id, spec in enumerate(specs):
        proto_rng = np.random.default_rng([seed, spec.prototype_seed, 0])
        instance_rng = np.random.default_rng([seed, spec.prototype_seed, 1])
        transform_rng = np.random.default_rng([seed, spec.prototype_seed, 2])

        prototypes = render_prototypes(spec.n_classes, proto_rng, spec.resolution)
        splits = _split_classes(spec.n_classes, spec.split_fractions, proto_rng)

        labels = np.repeat(np.arange(spec.n_classes), spec.images_per_class)
        base = prototypes[labels]
        shifts = instance_rng.integers(-INSTANCE_SHIFT, INSTANCE_SHIFT + 1, size=(len(labels), 2))
        gains = instance_rng.uniform(0.9, 1.1, size=len(labels))
        jittered = np.stack([
            np.roll(img, (int(dy), int(dx)), axis=(1, 2)) * g
            for img, (dy, dx), g in zip(base, shifts, gains)
        ])
        noisy = jittered + instance_rng.normal(0.0, spec.noise, size=jittered.shape)
        images = _apply_family(noisy, spec, transform_rng)

        datasets.append(Dataset(spec.name, domain_id, images, labels, splits, spec.seen))
        logger.debug("Generated domain %s (%s): %d images, %d classes",
                     spec.name, spec.family, len(images), spec.n_classes)
    return datasets


def default_domain_suite(n_classes: int = 30, images_per_class: int = 30) -> List[SyntheticDomainSpec]:
    """Four seen domains and three unseen ones with disjoint parameters"""
    common = dict(n_classes=n_classes, images_per_class=images_per_class)
    unseen_split = (0.0, 0.0, 1.0)
    swap = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]
    warm = [[0.9, 0.1, 0.0], [0.1, 0.8, 0.1], [0.0, 0.2, 0.8]]
    return [
        SyntheticDomainSpec("plain", "identity", {}, True, 0, **common),
        SyntheticDomainSpec("warm", "channel_mix", {"matrix": warm}, True, 1, **common),
        SyntheticDomainSpec("tilted", "rotation", {"angle_range": (0.0, 30.0)}, True, 2, **common),
        SyntheticDomainSpec("striped", "texture", {"frequency": 2.0, "amplitude": 0.3}, True, 3, **common),
        SyntheticDomainSpec("swapped", "channel_mix", {"matrix": swap}, False, 4,
                            split_fractions=unseen_split, **common),
        SyntheticDomainSpec("upturned", "rotation", {"angle_range": (60.0, 90.0)}, False, 5,
                            split_fractions=unseen_split, **common),
        SyntheticDomainSpec("grainy", "noise", {"sigma": 0.3}, False, 6,
                            split_fractions=unseen_split, **common),
    ]


@dataclass
class Episode:
    """Support and query sets with labels remapped to [0, way)"""
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    way: int
    shots: List[int]
    domain_id: int
    episode_index: int = 0
    dataset_name: str = ""
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    support_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    query_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def episode_rng(seed: int, domain_id: int, episode_index: int) -> np.random.Generator:
    """Per-episode generator; independent of scheduling order"""
    return np.random.default_rng([seed, domain_id, episode_index])


def sample_episode(dataset: Dataset, protocol: str, rng: np.random.Generator,
                   split: str = "test", episode_index: int = 0) -> Episode:
    """
    Draw one episode.

    Args:
        dataset: Source dataset
        protocol: "varying" | "vw5shot" | "5way1shot"
        rng: Generator that fully determines the draw
        split: Class split to draw from
        episode_index: Recorded on the episode

    Returns:
        Episode with normalized images
    """
    if protocol not in PROTOCOLS:
        raise EpisodeError(f"Unknown protocol '{protocol}', expected one of {PROTOCOLS}")
    per_class = dataset.class_indices(split)
    classes = np.array(sorted(per_class), dtype=np.int64)
    if len(classes) < MIN_WAY:
        raise EpisodeError(f"{dataset.name}/{split} has {len(classes)} classes; "
                           f"protocol {protocol} needs at least {MIN_WAY}")

    if protocol == "5way1shot":
        way = MIN_WAY
    else:
        way = int(rng.integers(MIN_WAY, min(MAX_WAY, len(classes)) + 1))
    chosen = np.sort(rng.choice(classes, size=way, replace=False))
    if protocol == "varying":
        shots = rng.integers(1, MAX_SHOTS + 1, size=way).tolist()
    elif protocol == "vw5shot":
        shots = [FIXED_SHOTS] * way
    else:
        shots = [1] * way

    support_idx, query_idx, support_lab, query_lab = [], [], [], []
    for label, (cls, n_shot) in enumerate(zip(chosen, shots)):
        pool = per_class[int(cls)]
        needed = n_shot + QUERY_PER_CLASS
        if len(pool) < needed:
            raise EpisodeError(f"{dataset.name}: class {cls} has {len(pool)} images in {split}, "
                               f"needs {needed} ({n_shot} shots + {QUERY_PER_CLASS} queries)")
        picked = rng.permutation(pool)[:needed]
        support_idx.extend(picked[:n_shot])
        query_idx.extend(picked[n_shot:])
        support_lab.extend([label] * n_shot)
        query_lab.extend([label] * QUERY_PER_CLASS)

    support_idx = np.asarray(support_idx, dtype=np.int64)
    query_idx = np.asarray(query_idx, dtype=np.int64)
    return Episode(
        support_images=dataset.normalize(dataset.images[support_idx]),
        support_labels=np.asarray(support_lab, dtype=np.int64),
        query_images=dataset.normalize(dataset.images[query_idx]),
        query_labels=np.asarray(query_lab, dtype=np.int64),
        way=way,
        shots=[int(s) for s in shots],
        domain_id=dataset.domain_id,
        episode_index=episode_index,
        dataset_name=dataset.name,
        classes=chosen,
        support_index=support_idx,
        query_index=query_idx,
    )


def make_channel_shift_episode(base: Dataset, mixing: np.ndarray, protocol: str,
                               rng: np.random.Generator, split: str = "test",
                               episode_index: int = 0) -> Episode:
    """
    Sample an episode and mix the channels of every (normalized) pixel by M.

    Raises:
        EpisodeError: If M is not square over the image channels or is
            ill-conditioned (condition number >= 100)
    """
    mixing = np.asarray(mixing, dtype=np.float64)
    channels = base.images.shape[1]
    if mixing.shape != (channels, channels):
        raise EpisodeError(f"Mixing matrix must be {channels}x{channels}, got {mixing.shape}")
    cond = np.linalg.cond(mixing)
    if not np.isfinite(cond) or cond >= SHIFT_MAX_CONDITION:
        raise EpisodeError(f"Mixing matrix is singular or ill-conditioned (condition number {cond:.3g})")
    episode = sample_episode(base, protocol, rng, split, episode_index)
    episode.support_images = mix_channels(episode.support_images, mixing)
    episode.query_images = mix_channels(episode.query_images, mixing)
    return episode


def random_mixing_matrix(rng: np.random.Generator, channels: int = 3,
                         max_condition: float = 10.0) -> np.ndarray:
    """Random well-conditioned channel mixing matrix"""
    while True:
        q, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
        scales = rng.uniform(1.0, np.sqrt(max_condition), size=channels)
        m = q * scales[None, :]
        if np.linalg.cond(m) < max_condition:
            return m
