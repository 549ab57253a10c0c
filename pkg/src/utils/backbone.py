"""
Backbone Module
Task-agnostic ResNet feature extractor: architecture specs, layer-site
enumeration, forward pass with optional adapter hooks, vanilla multi-domain
pretraining and parameter accounting.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.tensor import (
    GradTape,
    SGDState,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    batchnorm_inference,
    batchnorm_train,
    conv2d,
    cosine_annealing_lr,
    global_avg_pool,
    matmul,
    relu,
    sgd_momentum_step,
    softmax_cross_entropy,
    transpose,
)

logger = logging.getLogger(__name__)

# Site roles
ROLE_STEM = "stem"
ROLE_MAIN = "main"
ROLE_DOWNSAMPLE = "downsample"

BN_FIELDS = ("mean", "var", "gamma", "beta")

# A hook receives (block input h, conv output) and returns the adapted output
AdapterHook = Callable[[Tensor, Tensor], Tensor]


@dataclass(frozen=True)
class BackboneSpec:
    """Shape of a small ResNet with basic blocks"""
    stem_channels: int
    stage_channels: Tuple[int, ...]
    blocks_per_stage: int
    input_resolution: int
    in_channels: int = 3
    stem_kernel: int = 3
    stem_stride: int = 1
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not self.stage_channels:
            raise ValueError("BackboneSpec needs at least one stage")
        if self.blocks_per_stage < 1:
            raise ValueError("BackboneSpec needs at least one block per stage")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "stem_channels": self.stem_channels,
            "stage_channels": list(self.stage_channels),
            "blocks_per_stage": self.blocks_per_stage,
            "input_resolution": self.input_resolution,
            "in_channels": self.in_channels,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackboneSpec":
        return cls(
            stem_channels=int(data["stem_channels"]),
            stage_channels=tuple(data["stage_channels"]),
            blocks_per_stage=int(data["blocks_per_stage"]),
            input_resolution=int(data["input_resolution"]),
            in_channels=int(data.get("in_channels", 3)),
            stem_kernel=int(data.get("stem_kernel", 3)),
            stem_stride=int(data.get("stem_stride", 1)),
            name=str(data.get("name", "custom")),
        )


# Desk-scale default: 32x32 input, d = 128
RESNET_S = BackboneSpec(
    stem_channels=16,
    stage_channels=(16, 32, 64, 128),
    blocks_per_stage=2,
    input_resolution=32,
    name="resnet-s",
)

# Architecture replica used only for parameter accounting (not trained; the
# max-pool after the stem carries no parameters and is not modelled)
RESNET18_REPLICA = BackboneSpec(
    stem_channels=64,
    stage_channels=(64, 128, 256, 512),
    blocks_per_stage=2,
    input_resolution=84,
    stem_kernel=7,
    stem_stride=2,
    name="resnet18-replica",
)

BACKBONE_PRESETS = {
    RESNET_S.name: RESNET_S,
    RESNET18_REPLICA.name: RESNET18_REPLICA,
}


@dataclass(frozen=True)
class LayerSite:
    """One convolution of the backbone (stage/block numbering is 1-based)"""
    stage: int
    block: int
    conv_index: int
    c_in: int
    c_out: int
    role: str
    kernel: int
    stride: int

    @property
    def name(self) -> str:
        if self.role == ROLE_STEM:
            return "stem.conv"
        if self.role == ROLE_DOWNSAMPLE:
            return f"stage{self.stage}.block{self.block}.down.conv"
        return f"stage{self.stage}.block{self.block}.conv{self.conv_index}"

    @property
    def bn_prefix(self) -> str:
        if self.role == ROLE_STEM:
            return "stem.bn"
        if self.role == ROLE_DOWNSAMPLE:
            return f"stage{self.stage}.block{self.block}.down.bn"
        return f"stage{self.stage}.block{self.block}.bn{self.conv_index}"

    @property
    def param_count(self) -> int:
        return self.c_out * self.c_in * self.kernel * self.kernel


def enumerate_sites(spec: BackboneSpec) -> List[LayerSite]:
    """
    List every convolution of the backbone in forward order.

    Within a block the order is conv1, conv2, then the 1x1 downsample if the
    block changes stride or channel count.
    """
    sites = [LayerSite(0, 0, 0, spec.in_channels, spec.stem_channels, ROLE_STEM,
                       spec.stem_kernel, spec.stem_stride)]
    c_prev = spec.stem_channels
    for s, c_out in enumerate(spec.stage_channels, start=1):
        for b in range(1, spec.blocks_per_stage + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            sites.append(LayerSite(s, b, 1, c_prev, c_out, ROLE_MAIN, 3, stride))
            sites.append(LayerSite(s, b, 2, c_out, c_out, ROLE_MAIN, 3, 1))
            if stride != 1 or c_prev != c_out:
                sites.append(LayerSite(s, b, 0, c_prev, c_out, ROLE_DOWNSAMPLE, 1, stride))
            c_prev = c_out
    return sites


def main_path_sites(spec: BackboneSpec, stages: Optional[Sequence[int]] = None) -> List[LayerSite]:
    """Main-path 3x3 convolutions, optionally restricted to some stages"""
    return [
        site for site in enumerate_sites(spec)
        if site.role == ROLE_MAIN and (stages is None or site.stage in stages)
    ]


@dataclass
class BackboneWeights:
    """
    Named tensors of a backbone (phi) plus optional per-domain heads (psi_k).

    Heads only exist after pretraining and are never part of a meta-test
    snapshot.
    """
    spec: BackboneSpec
    tensors: Dict[str, Tensor]
    heads: Dict[str, Tensor] = field(default_factory=dict)
    history: List[float] = field(default_factory=list)

    def learnable_names(self) -> List[str]:
        """Convolution kernels and batch-norm affine parameters"""
        return [name for name in self.tensors
                if not (name.endswith(".mean") or name.endswith(".var"))]

    def learnable(self) -> List[Tensor]:
        return [self.tensors[name] for name in self.learnable_names()]

    def clone(self, trainable: bool = False) -> "BackboneWeights":
        """Deep copy of phi; learnable tensors get requires_grad=trainable"""
        learnable = set(self.learnable_names())
        tensors = {
            name: t.copy(requires_grad=trainable and name in learnable)
            for name, t in self.tensors.items()
        }
        return BackboneWeights(self.spec, tensors)

    def meta_test_snapshot(self) -> "BackboneWeights":
        """Frozen copy without the pretraining heads"""
        return self.clone(trainable=False)

    def check_shapes(self) -> None:
        expected = expected_shapes(self.spec)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"Backbone tensors do not match spec (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")


def expected_shapes(spec: BackboneSpec) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for site in enumerate_sites(spec):
        shapes[site.name] = (site.c_out, site.c_in, site.kernel, site.kernel)
        for part in BN_FIELDS:
            shapes[f"{site.bn_prefix}.{part}"] = (site.c_out,)
    return shapes


def init_weights(spec: BackboneSpec, seed: int = 0) -> BackboneWeights:
    """He-normal kernels, unit BN scale, zero BN shift, neutral statistics"""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for site in enumerate_sites(spec):
        fan_in = site.c_in * site.kernel * site.kernel
        kernel = rng.standard_normal((site.c_out, site.c_in, site.kernel, site.kernel))
        tensors[site.name] = Tensor(kernel * np.sqrt(2.0 / fan_in))
        tensors[f"{site.bn_prefix}.mean"] = Tensor(np.zeros(site.c_out))
        tensors[f"{site.bn_prefix}.var"] = Tensor(np.ones(site.c_out))
        tensors[f"{site.bn_prefix}.gamma"] = Tensor(np.ones(site.c_out))
        tensors[f"{site.bn_prefix}.beta"] = Tensor(np.zeros(site.c_out))
    return BackboneWeights(spec, tensors)


def _conv_bn(weights: BackboneWeights, site: LayerSite, x: Tensor,
             adapters: Optional[Mapping[str, AdapterHook]], train: bool) -> Tensor:
    t = weights.tensors
    y = conv2d(x, t[site.name], stride=site.stride, padding=site.kernel // 2)
    if adapters and site.name in adapters:
        y = adapters[site.name](x, y)
    prefix = site.bn_prefix
    if train:
        return batchnorm_train(y, t[f"{prefix}.mean"], t[f"{prefix}.var"],
                               t[f"{prefix}.gamma"], t[f"{prefix}.beta"])
    return batchnorm_inference(y, t[f"{prefix}.mean"], t[f"{prefix}.var"],
                               t[f"{prefix}.gamma"], t[f"{prefix}.beta"])


def forward_features(weights: BackboneWeights, images: Union[Tensor, np.ndarray],
                     adapters: Optional[Mapping[str, AdapterHook]] = None,
                     train: bool = False) -> Tensor:
    """
    Embed a batch of images with f_phi (optionally adapted).

    Args:
        weights: Backbone weights
        images: NCHW batch at the spec's input resolution
        adapters: Optional mapping from main-path site name to adapter hook
        train: Use batch statistics (pretraining) instead of stored ones

    Returns:
        Tensor of shape (N, d)
    """
    spec = weights.spec
    x = as_tensor(images)
    res = spec.input_resolution
    if x.ndim != 4 or x.shape[1] != spec.in_channels or x.shape[2:] != (res, res):
        raise ShapeError(
            f"Expected images of shape (N, {spec.in_channels}, {res}, {res}), got {x.shape}"
        )
    sites = enumerate_sites(spec)
    if adapters:
        known = {s.name for s in sites if s.role == ROLE_MAIN}
        unknown = sorted(set(adapters) - known)
        if unknown:
            raise ShapeError(f"Adapters reference unknown main-path sites: {unknown}")

    h = relu(_conv_bn(weights, sites[0], x, adapters, train))
    by_block: Dict[Tuple[int, int], List[LayerSite]] = {}
    for site in sites[1:]:
        by_block.setdefault((site.stage, site.block), []).append(site)

    for key in sorted(by_block):
        block_sites = by_block[key]
        conv1, conv2 = block_sites[0], block_sites[1]
        out = relu(_conv_bn(weights, conv1, h, adapters, train))
        out = _conv_bn(weights, conv2, out, adapters, train)
        shortcut = h
        if len(block_sites) == 3:
            shortcut = _conv_bn(weights, block_sites[2], h, None, train)
        h = relu(add(out, shortcut))

    return global_avg_pool(h)


@dataclass
class PretrainConfig:
    """SGD + cosine annealing settings for multi-domain pretraining"""
    steps: int = 2000
    batch_size: int = 32
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 7e-4
    anneal_every: Optional[int] = None
    log_every: int = 50


def head_logits(weights: BackboneWeights, domain_index: int, features: Tensor) -> Tensor:
    """Logits of the pretraining head psi_k"""
    w = weights.heads[f"head{domain_index}.weight"]
    b = weights.heads[f"head{domain_index}.bias"]
    return add(matmul(features, transpose(w)), b)


def pretrain_mdl(datasets: Sequence, spec: BackboneSpec = RESNET_S,
                 config: Optional[PretrainConfig] = None, seed: int = 0) -> BackboneWeights:
    """
    Jointly train phi and one linear head per domain on the training splits.

    Each step draws one batch per domain (round-robin over all K domains) and
    minimizes the plain sum of the per-domain mean cross-entropies. K = 1 is
    single-domain learning.

    Args:
        datasets: Domain datasets (objects exposing `name` and `split_arrays`)
        spec: Backbone architecture
        config: Optimizer settings
        seed: Seed for initialization and batch sampling

    Returns:
        Trained BackboneWeights with heads retained for inspection
    """
    config = config or PretrainConfig()
    if not datasets:
        raise ValueError("pretrain_mdl needs at least one domain")

    domains = []
    for ds in datasets:
        images, labels = ds.split_arrays("train")
        if len(images) == 0:
            raise ValueError(f"Domain '{ds.name}' has no training images")
        classes, local = np.unique(labels, return_inverse=True)
        if len(classes) < 2:
            raise ValueError(f"Domain '{ds.name}' needs at least 2 training classes, has {len(classes)}")
        domains.append((ds.name, images, local.astype(np.int64), len(classes)))

    weights = init_weights(spec, seed).clone(trainable=True)
    rng = np.random.default_rng(seed)
    heads: Dict[str, Tensor] = {}
    for k, (_, _, _, n_classes) in enumerate(domains):
        scale = 1.0 / np.sqrt(spec.feature_dim)
        heads[f"head{k}.weight"] = Tensor(rng.standard_normal((n_classes, spec.feature_dim)) * scale,
                                          requires_grad=True)
        heads[f"head{k}.bias"] = Tensor(np.zeros(n_classes), requires_grad=True)
    weights.heads = heads

    params = weights.learnable() + list(heads.values())
    state = SGDState.for_params(params, momentum=config.momentum, weight_decay=config.weight_decay)
    period = config.anneal_every or config.steps
    logger.info("Pretraining %s on %d domain(s) for %d steps", spec.name, len(domains), config.steps)

    for step in range(config.steps):
        lr = cosine_annealing_lr(config.lr, step, period)
        for p in params:
            p.zero_grad()
        with GradTape() as tape:
            total = None
            for k, (_, images, labels, _) in enumerate(domains):
                take = min(config.batch_size, len(images))
                idx = np.sort(rng.choice(len(images), size=take, replace=False))
                feats = forward_features(weights, images[idx], train=True)
                loss_k = softmax_cross_entropy(head_logits(weights, k, feats), labels[idx])
                total = loss_k if total is None else add(total, loss_k)
            tape.backward(total, params)
        sgd_momentum_step(params, [p.grad for p in params], state, lr)
        weights.history.append(total.item())
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d/%d  loss %.4f  lr %.5f", step, config.steps, total.item(), lr)

    for t in list(weights.tensors.values()) + list(heads.values()):
        t.requires_grad = False
        t.grad = None
    return weights


def domain_accuracy(weights: BackboneWeights, domain_index: int, images: np.ndarray,
                    labels: np.ndarray, batch_size: int = 256) -> float:
    """Accuracy of head psi_k on a labelled batch (inference-mode BN)"""
    correct = 0
    for start in range(0, len(images), batch_size):
        feats = forward_features(weights, images[start:start + batch_size])
        pred = head_logits(weights, domain_index, feats).data.argmax(axis=1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / max(len(images), 1)


def count_parameters(source: Union[BackboneWeights, BackboneSpec], adapter_config=None) -> Dict:
    """
    Exact parameter accounting for a backbone and an optional adapter config.

    Returns:
        Dict with backbone_params (all convolution weights), backbone_bn_params,
        adapter_params (alpha sites plus beta) and fraction = adapter/backbone
    """
    spec = source.spec if isinstance(source, BackboneWeights) else source
    sites = enumerate_sites(spec)
    conv_params = sum(site.param_count for site in sites)
    bn_params = sum(2 * site.c_out for site in sites)
    adapter_params = 0
    if adapter_config is not None:
        from src.utils.adapters import adapter_parameter_count
        adapter_params = adapter_parameter_count(spec, adapter_config)
    return {
        "backbone_params": conv_params,
        "backbone_bn_params": bn_params,
        "adapter_params": adapter_params,
        "fraction": adapter_params / conv_params,
    }
