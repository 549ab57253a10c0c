"""
Adapters Module
Task-specific adapters attached to a frozen backbone: serial / residual
connections, matrix / channelwise / decomposed forms, the pre-classifier
alignment beta, and the TaskModel that bundles them.
"""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.backbone import (
    AdapterHook,
    BackboneSpec,
    BackboneWeights,
    LayerSite,
    forward_features,
    main_path_sites,
)
from src.utils.tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    conv2d,
    hadamard,
    matmul,
    reshape,
    transpose,
)

logger = logging.getLogger(__name__)

CONNECTIONS = ("serial", "residual")
FORMS = ("matrix", "channelwise", "decomposed")
INITS = ("identity", "random")

# Scale of the residual identity initialization
DEFAULT_DELTA = 1e-4
DEFAULT_RANDOM_SCALE = 1e-2

# Table-style method codes
CONNECTION_CODES = {"S": "serial", "R": "residual"}
FORM_CODES = {"M": "matrix", "CW": "channelwise"}
NO_ADAPTER_CODE = "none"

_CODE_PATTERN = re.compile(
    r"^Ad-(?P<conn>[SR])-(?P<form>M|CW)(?P<suffix>(?:-DN\d+|-PA)*)$"
)


class AdapterConfigError(ValueError):
    """Raised when an adapter configuration cannot be attached"""


def parse_attachment(value: Union[str, Sequence[int]]) -> Union[str, Tuple[int, ...]]:
    """
    Normalize an attachment set.

    Accepts "all", "block-all", "block4", "block3,4", "3,4" or a sequence of
    1-based stage indices.
    """
    if isinstance(value, str):
        text = value.strip().lower()
        if text in ("all", "block-all", "blocks-all"):
            return "all"
        if text.startswith("block"):
            text = text[len("block"):]
        try:
            stages = []
            for part in (p.strip() for p in text.split(",")):
                if "-" in part:
                    lo, hi = part.split("-", 1)
                    stages.extend(range(int(lo), int(hi) + 1))
                elif part:
                    stages.append(int(part))
            stages = tuple(stages)
        except ValueError as exc:
            raise AdapterConfigError(f"Cannot parse attachment '{value}'") from exc
    else:
        stages = tuple(int(s) for s in value)
    if not stages or any(s < 1 for s in stages):
        raise AdapterConfigError(f"Attachment needs stage indices >= 1, got {value!r}")
    return tuple(sorted(set(stages)))


@dataclass(frozen=True)
class AdapterConfig:
    """
    Full description of an adapter topology.

    `enabled=False` means no alpha sites at all (beta may still be present).
    `decompose_stages` restricts the decomposed form to some stages; the other
    attached stages then use the plain matrix form.
    """
    connection: str = "residual"
    form: str = "matrix"
    divisor: Optional[int] = None
    attachment: Union[str, Tuple[int, ...]] = "all"
    decompose_stages: Optional[Tuple[int, ...]] = None
    init: str = "identity"
    delta: float = DEFAULT_DELTA
    scale: float = DEFAULT_RANDOM_SCALE
    include_pa: bool = False
    enabled: bool = True
    strict: bool = True

    def __post_init__(self):
        if self.connection not in CONNECTIONS:
            raise AdapterConfigError(f"Unknown connection '{self.connection}', expected one of {CONNECTIONS}")
        if self.form not in FORMS:
            raise AdapterConfigError(f"Unknown form '{self.form}', expected one of {FORMS}")
        if self.init not in INITS:
            raise AdapterConfigError(f"Unknown init '{self.init}', expected one of {INITS}")
        object.__setattr__(self, "attachment", parse_attachment(self.attachment))
        if self.form == "decomposed":
            if self.divisor is None or self.divisor < 2:
                raise AdapterConfigError(f"Decomposed form needs divisor N >= 2, got {self.divisor}")
        elif self.divisor is not None:
            raise AdapterConfigError(f"Divisor N is only meaningful for the decomposed form (form={self.form})")
        if self.decompose_stages is not None:
            if self.form != "decomposed":
                raise AdapterConfigError("decompose_stages requires form='decomposed'")
            object.__setattr__(self, "decompose_stages", parse_attachment(self.decompose_stages))
        if self.delta < 0:
            raise AdapterConfigError(f"delta must be non-negative, got {self.delta}")

    @property
    def code(self) -> str:
        return format_code(self)

    def to_dict(self) -> Dict:
        return {
            "connection": self.connection,
            "form": self.form,
            "divisor": self.divisor,
            "attachment": self.attachment if self.attachment == "all" else list(self.attachment),
            "decompose_stages": None if self.decompose_stages is None else list(self.decompose_stages),
            "init": self.init,
            "delta": self.delta,
            "scale": self.scale,
            "include_pa": self.include_pa,
            "enabled": self.enabled,
            "strict": self.strict,
        }


def parse_code(code: str, **overrides) -> AdapterConfig:
    """
    Build an AdapterConfig from a method code.

    Examples: "Ad-R-M", "Ad-S-CW", "Ad-R-M-PA", "Ad-R-M-DN8-PA", "none",
    "none-PA" (beta only). Keyword overrides set the remaining fields.
    """
    text = code.strip()
    if text.lower().startswith(NO_ADAPTER_CODE):
        rest = text[len(NO_ADAPTER_CODE):]
        if rest not in ("", "-PA"):
            raise AdapterConfigError(f"Cannot parse adapter code '{code}'")
        return AdapterConfig(enabled=False, include_pa=rest == "-PA", **overrides)

    match = _CODE_PATTERN.match(text)
    if not match:
        raise AdapterConfigError(f"Cannot parse adapter code '{code}'")
    suffixes = [s for s in match.group("suffix").split("-") if s]
    include_pa = "PA" in suffixes
    divisors = [int(s[2:]) for s in suffixes if s.startswith("DN")]
    if len(divisors) > 1 or suffixes.count("PA") > 1:
        raise AdapterConfigError(f"Repeated suffix in adapter code '{code}'")
    form = FORM_CODES[match.group("form")]
    if divisors:
        if form != "matrix":
            raise AdapterConfigError(f"Decomposition applies to the matrix form only: '{code}'")
        form = "decomposed"
    params = dict(
        connection=CONNECTION_CODES[match.group("conn")],
        form=form,
        divisor=divisors[0] if divisors else None,
        include_pa=include_pa,
    )
    params.update(overrides)
    return AdapterConfig(**params)


def format_code(config: AdapterConfig) -> str:
    if not config.enabled:
        return NO_ADAPTER_CODE + ("-PA" if config.include_pa else "")
    conn = "R" if config.connection == "residual" else "S"
    form = "CW" if config.form == "channelwise" else "M"
    code = f"Ad-{conn}-{form}"
    if config.form == "decomposed":
        code += f"-DN{config.divisor}"
    if config.include_pa:
        code += "-PA"
    return code


def bottleneck_size(c_out: int, divisor: int) -> int:
    """B = ceil(C_out / N)"""
    return max(1, math.ceil(c_out / divisor))


@dataclass
class AdapterSite:
    """Trainable alpha (or V, gamma) attached to one main-path conv"""
    site: LayerSite
    connection: str
    form: str
    params: Dict[str, Tensor]

    @property
    def name(self) -> str:
        return self.site.name

    @property
    def adapter_in(self) -> int:
        """Channels the adapter reads: h for residual, conv output for serial"""
        return self.site.c_in if self.connection == "residual" else self.site.c_out

    def tensors(self) -> List[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "AdapterSite":
        return AdapterSite(self.site, self.connection, self.form,
                           {k: t.copy(requires_grad=True) for k, t in self.params.items()})


def _plan_sites(spec: BackboneSpec, config: AdapterConfig) -> List[Tuple[LayerSite, str]]:
    """Resolve the attached sites and the form each one uses"""
    if not config.enabled:
        return []
    stages = None if config.attachment == "all" else config.attachment
    for group in (stages, config.decompose_stages):
        if group is not None:
            bad = [s for s in group if s > spec.num_stages]
            if bad:
                raise AdapterConfigError(f"Stages {bad} do not exist in {spec.name} ({spec.num_stages} stages)")

    plan = []
    for site in main_path_sites(spec, stages):
        form = config.form
        if form == "decomposed" and config.decompose_stages is not None \
                and site.stage not in config.decompose_stages:
            form = "matrix"
        if form == "channelwise" and config.connection == "residual" and site.c_in != site.c_out:
            message = (f"Residual channelwise adapter is illegal at {site.name} "
                       f"(C_in={site.c_in} != C_out={site.c_out})")
            if config.strict:
                raise AdapterConfigError(message)
            logger.info("%s; skipping site", message)
            continue
        plan.append((site, form))
    return plan


def _site_param_count(site: LayerSite, connection: str, form: str, divisor: Optional[int]) -> int:
    c_in = site.c_in if connection == "residual" else site.c_out
    if form == "matrix":
        return site.c_out * c_in
    if form == "channelwise":
        return site.c_out
    return (site.c_out + c_in) * bottleneck_size(site.c_out, divisor)


def adapter_parameter_count(spec: BackboneSpec, config: AdapterConfig) -> int:
    """Closed-form trainable count: alpha sites plus d*d for beta"""
    total = sum(_site_param_count(site, config.connection, form, config.divisor)
                for site, form in _plan_sites(spec, config))
    if config.include_pa:
        total += spec.feature_dim ** 2
    return total


def _init_site_params(site: LayerSite, connection: str, form: str, config: AdapterConfig,
                      rng: np.random.Generator) -> Dict[str, Tensor]:
    c_out = site.c_out
    c_in = site.c_in if connection == "residual" else c_out
    residual = connection == "residual"
    random_init = config.init == "random"

    def noise(shape):
        return rng.standard_normal(shape) * config.scale if random_init else np.zeros(shape)

    if form == "matrix":
        base = config.delta * np.eye(c_out, c_in) if residual else np.eye(c_out)
        if residual and random_init:
            base = np.zeros((c_out, c_in))
        return {"alpha": Tensor(base + noise((c_out, c_in)), requires_grad=True)}

    if form == "channelwise":
        base = np.full(c_out, config.delta) if residual else np.ones(c_out)
        if residual and random_init:
            base = np.zeros(c_out)
        return {"alpha": Tensor(base + noise(c_out), requires_grad=True)}

    b = bottleneck_size(c_out, config.divisor)
    if residual:
        if random_init:
            v = rng.standard_normal((c_out, b)) * config.scale
            g = rng.standard_normal((c_in, b)) * config.scale
        else:
            v = config.delta * np.eye(c_out, b)
            g = np.eye(c_in, b)
    else:
        v = np.eye(c_out, b) + noise((c_out, b))
        g = np.eye(c_in, b) + noise((c_in, b))
    return {"V": Tensor(v, requires_grad=True), "gamma": Tensor(g, requires_grad=True)}


def effective_matrix(site: AdapterSite) -> Tensor:
    """
    The 1x1 kernel the site applies, as a (C_out, C_adapter_in) matrix.

    For the decomposed form this is V gamma^T.
    """
    if site.form == "decomposed":
        return matmul(site.params["V"], transpose(site.params["gamma"]))
    if site.form == "matrix":
        return site.params["alpha"]
    raise AdapterConfigError(f"{site.name}: channelwise adapters have no matrix form")


def _strided(h: Tensor, stride: int) -> Tensor:
    """Spatial subsampling h[:, :, ::s, ::s], expressed as an identity 1x1 conv"""
    if stride == 1:
        return h
    c = h.shape[1]
    return conv2d(h, np.eye(c).reshape(c, c, 1, 1), stride=stride)


def apply_adapter(h: Tensor, conv_out: Tensor, site: AdapterSite,
                  connection: Optional[str] = None, form: Optional[str] = None) -> Tensor:
    """
    Adapt the output of the wrapped convolution.

    Args:
        h: Input of the wrapped conv (N, C_in, H, W)
        conv_out: Output of the wrapped conv (N, C_out, H', W')
        site: Adapter parameters
        connection: Overrides site.connection when given
        form: Overrides site.form when given

    Returns:
        Tensor shaped like conv_out
    """
    connection = connection or site.connection
    form = form or site.form
    h, conv_out = as_tensor(h), as_tensor(conv_out)
    c_out = conv_out.shape[1]

    if form == "channelwise":
        alpha = site.params["alpha"]
        if alpha.shape != (c_out,):
            raise ShapeError(f"{site.name}: channelwise alpha {alpha.shape} does not match {c_out} channels")
        scale = reshape(alpha, (1, c_out, 1, 1))
        if connection == "serial":
            return hadamard(conv_out, scale)
        branch = _strided(h, site.site.stride)
        if branch.shape != conv_out.shape:
            raise ShapeError(f"{site.name}: residual branch {branch.shape} does not match conv output {conv_out.shape}")
        return add(hadamard(branch, scale), conv_out)

    matrix = effective_matrix(replace(site, form=form))
    kernel = reshape(matrix, (matrix.shape[0], matrix.shape[1], 1, 1))
    if connection == "serial":
        return conv2d(conv_out, kernel)
    branch = conv2d(h, kernel, stride=site.site.stride)
    if branch.shape != conv_out.shape:
        raise ShapeError(f"{site.name}: residual branch {branch.shape} does not match conv output {conv_out.shape}")
    return add(branch, conv_out)


def pre_classifier_align(z: Tensor, beta: Tensor) -> Tensor:
    """z' = z beta^T for every row of z"""
    z, beta = as_tensor(z), as_tensor(beta)
    if beta.ndim != 2 or beta.shape[0] != beta.shape[1]:
        raise ShapeError(f"beta must be square, got {beta.shape}")
    if z.ndim != 2 or z.shape[1] != beta.shape[0]:
        raise ShapeError(f"Features {z.shape} do not match beta {beta.shape}")
    return matmul(z, transpose(beta))


@dataclass
class TaskModel:
    """Frozen phi plus trainable theta = {alpha sites} + optional beta"""
    backbone: BackboneWeights
    config: AdapterConfig
    sites: Dict[str, AdapterSite] = field(default_factory=dict)
    beta: Optional[Tensor] = None
    head: str = "ncc"
    fitted_head: Optional[object] = None

    def hooks(self) -> Dict[str, AdapterHook]:
        return {
            name: (lambda h, y, s=site: apply_adapter(h, y, s))
            for name, site in self.sites.items()
        }

    def alpha_parameters(self) -> List[Tensor]:
        return [t for site in self.sites.values() for t in site.tensors()]

    def beta_parameters(self) -> List[Tensor]:
        return [self.beta] if self.beta is not None else []

    def trainable_parameters(self) -> List[Tensor]:
        return self.alpha_parameters() + self.beta_parameters()

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable_parameters())

    def features(self, images) -> Tensor:
        """Adapted backbone features before beta"""
        return forward_features(self.backbone, images, adapters=self.hooks() or None)

    def embed(self, images) -> Tensor:
        """Adapted and aligned embeddings fed to the classifier"""
        z = self.features(images)
        if self.beta is not None:
            z = pre_classifier_align(z, self.beta)
        return z

    def clone(self) -> "TaskModel":
        """Copy of theta sharing the same (read-only) backbone"""
        return TaskModel(
            backbone=self.backbone,
            config=self.config,
            sites={name: site.copy() for name, site in self.sites.items()},
            beta=None if self.beta is None else self.beta.copy(requires_grad=True),
            head=self.head,
            fitted_head=self.fitted_head,
        )


def attach(backbone: BackboneWeights, config: AdapterConfig, seed: int = 0,
           head: str = "ncc") -> TaskModel:
    """
    Attach freshly initialized adapters to a frozen backbone.

    Args:
        backbone: Meta-test backbone snapshot (left untouched)
        config: Adapter topology
        seed: Seed for random initialization
        head: Classifier head descriptor carried by the task model

    Returns:
        TaskModel with one AdapterSite per selected main-path conv

    Raises:
        AdapterConfigError: If the config is illegal for the backbone
    """
    rng = np.random.default_rng(seed)
    sites: Dict[str, AdapterSite] = {}
    for layer_site, form in _plan_sites(backbone.spec, config):
        params = _init_site_params(layer_site, config.connection, form, config, rng)
        sites[layer_site.name] = AdapterSite(layer_site, config.connection, form, params)
    if config.connection == "serial" and config.form == "decomposed" and config.enabled:
        logger.warning("Serial decomposed adapters start as a rank-B projection, not the identity")
    beta = Tensor(np.eye(backbone.spec.feature_dim), requires_grad=True) if config.include_pa else None
    model = TaskModel(backbone, config, sites, beta, head)
    logger.debug("Attached %s: %d sites, %d trainable params", config.code, len(sites), model.trainable_count())
    return model
