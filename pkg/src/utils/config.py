"""
Run Configuration
YAML run files parsed into dataclasses, with command-line overrides.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml

from src.utils.adaptation import AdaptConfig
from src.utils.adapters import AdapterConfig, AdapterConfigError, adapter_parameter_count, parse_code
from src.utils.backbone import BACKBONE_PRESETS, BackboneSpec, PretrainConfig
from src.utils.episodes import PROTOCOLS, SPLITS, SyntheticDomainSpec, default_domain_suite
from src.utils.idx_loader import IDX_SOURCES

logger = logging.getLogger(__name__)

DEFAULT_EPISODES = 600
DEFAULT_METHOD = "Ad-R-M-PA"
IDX_PREFIX = "idx:"

# Keys accepted at the top level of a run file
RUN_KEYS = {
    "backbone", "weights", "adapter", "head", "adapt", "protocol", "datasets", "synthetic",
    "episodes", "seed", "workers", "out", "data_dir", "split", "pretrain",
}
ADAPTER_KEYS = {"code", "attachment", "decompose_stages", "init", "delta", "scale", "strict"}


class ConfigError(ValueError):
    """Raised for invalid run configurations"""


@dataclass
class SyntheticSuiteConfig:
    """Size and seed of the built-in synthetic domain suite"""
    n_classes: int = 30
    images_per_class: int = 30
    seed: int = 0

    def domain_specs(self) -> List[SyntheticDomainSpec]:
        return default_domain_suite(self.n_classes, self.images_per_class)

    def to_dict(self) -> Dict:
        return {"n_classes": self.n_classes, "images_per_class": self.images_per_class, "seed": self.seed}


@dataclass
class RunConfig:
    """Everything needed to reproduce one evaluation run"""
    backbone: str = "resnet-s"
    weights: Optional[str] = None
    adapter: AdapterConfig = field(default_factory=lambda: parse_code(DEFAULT_METHOD))
    head: str = "ncc"
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    protocol: str = "varying"
    datasets: List[str] = field(default_factory=list)
    synthetic: SyntheticSuiteConfig = field(default_factory=SyntheticSuiteConfig)
    episodes: int = DEFAULT_EPISODES
    seed: int = 0
    workers: int = 1
    out: Optional[str] = None
    data_dir: Optional[str] = None
    split: str = "test"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    @property
    def backbone_spec(self) -> BackboneSpec:
        return BACKBONE_PRESETS[self.backbone]

    @property
    def method(self) -> str:
        return self.adapter.code

    def to_dict(self) -> Dict:
        return {
            "backbone": self.backbone,
            "weights": self.weights,
            "adapter": {"code": self.adapter.code, **{k: v for k, v in self.adapter.to_dict().items()
                                                     if k in ADAPTER_KEYS}},
            "head": self.head,
            "adapt": self.adapt.to_dict(),
            "protocol": self.protocol,
            "datasets": list(self.datasets),
            "synthetic": self.synthetic.to_dict(),
            "episodes": self.episodes,
            "seed": self.seed,
            "workers": self.workers,
            "out": self.out,
            "data_dir": self.data_dir,
            "split": self.split,
            "pretrain": dict(vars(self.pretrain)),
        }


def synthetic_names(suite: SyntheticSuiteConfig) -> List[str]:
    return [spec.name for spec in suite.domain_specs()]


def parse_adapter(value: Union[None, str, Mapping]) -> AdapterConfig:
    """Adapter entry: a method code or a mapping with `code` plus field overrides"""
    if value is None:
        return parse_code(DEFAULT_METHOD)
    if isinstance(value, str):
        return parse_code(value)
    unknown = set(value) - ADAPTER_KEYS
    if unknown:
        raise ConfigError(f"Unknown adapter keys: {sorted(unknown)}")
    overrides = {k: v for k, v in value.items() if k != "code"}
    for key in ("decompose_stages", "attachment"):
        if isinstance(overrides.get(key), list):
            overrides[key] = tuple(overrides[key])
    return parse_code(value.get("code", DEFAULT_METHOD), **overrides)


def _dataclass_from(cls, data: Optional[Mapping], name: str):
    data = dict(data or {})
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"Invalid '{name}' section: {exc}") from exc


def build_run_config(raw: Mapping[str, Any]) -> RunConfig:
    """Validate a parsed run mapping and build the RunConfig"""
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise ConfigError(f"Unknown run configuration keys: {sorted(unknown)}")
    try:
        adapter = parse_adapter(raw.get("adapter"))
    except AdapterConfigError as exc:
        raise ConfigError(str(exc)) from exc

    adapt_section = dict(raw.get("adapt") or {})
    if "head" in raw:
        adapt_section["head"] = raw["head"]
    # The run seed also seeds adapter init unless adapt.seed is given
    if "seed" in raw:
        adapt_section.setdefault("seed", int(raw["seed"]))
    try:
        adapt = _dataclass_from(AdaptConfig, adapt_section, "adapt")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    config = RunConfig(
        backbone=raw.get("backbone", "resnet-s"),
        weights=raw.get("weights"),
        adapter=adapter,
        head=adapt.head,
        adapt=adapt,
        protocol=raw.get("protocol", "varying"),
        datasets=list(raw.get("datasets") or []),
        synthetic=_dataclass_from(SyntheticSuiteConfig, raw.get("synthetic"), "synthetic"),
        episodes=int(raw.get("episodes", DEFAULT_EPISODES)),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
        out=raw.get("out"),
        data_dir=raw.get("data_dir"),
        split=raw.get("split", "test"),
        pretrain=_dataclass_from(PretrainConfig, raw.get("pretrain"), "pretrain"),
    )
    validate_run_config(config)
    return config


def validate_run_config(config: RunConfig) -> None:
    if config.backbone not in BACKBONE_PRESETS:
        raise ConfigError(f"Unknown backbone '{config.backbone}', expected one of {sorted(BACKBONE_PRESETS)}")
    if config.protocol not in PROTOCOLS:
        raise ConfigError(f"Unknown protocol '{config.protocol}', expected one of {PROTOCOLS}")
    if config.split not in SPLITS:
        raise ConfigError(f"Unknown split '{config.split}', expected one of {SPLITS}")
    if config.episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {config.episodes}")
    if config.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {config.workers}")
    known = set(synthetic_names(config.synthetic))
    for name in config.datasets:
        if name.startswith(IDX_PREFIX):
            if name[len(IDX_PREFIX):] not in IDX_SOURCES:
                raise ConfigError(f"Unknown IDX dataset '{name}'")
        elif name not in known:
            raise ConfigError(f"Unknown dataset '{name}', expected one of {sorted(known)} or idx:<name>")
    try:
        adapter_parameter_count(config.backbone_spec, config.adapter)
    except AdapterConfigError as exc:
        raise ConfigError(f"Adapter {config.adapter.code} is illegal for {config.backbone}: {exc}") from exc


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Read a YAML run file (or defaults when no path is given)"""
    if path is None:
        return build_run_config({})
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    logger.debug("Loaded run config %s", path)
    return build_run_config(raw)


def apply_overrides(config: RunConfig, seed: Optional[int] = None, episodes: Optional[int] = None,
                    workers: Optional[int] = None, out: Optional[str] = None,
                    data_dir: Optional[str] = None) -> RunConfig:
    """Command-line flags win over the file"""
    updates = {
        key: value for key, value in
        dict(seed=seed, episodes=episodes, workers=workers, out=out, data_dir=data_dir).items()
        if value is not None
    }
    if "seed" in updates:
        updates["adapt"] = replace(config.adapt, seed=updates["seed"])
    updated = replace(config, **updates)
    validate_run_config(updated)
    return updated
