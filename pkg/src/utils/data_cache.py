"""
Centralized Data Cache
Builds each dataset once per process and shares it across runs and workers
"""

import logging
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

from src.utils.config import ConfigError, SyntheticSuiteConfig
from src.utils.episodes import Dataset, gen_synthetic_domains
from src.utils.idx_loader import load_idx_directory

logger = logging.getLogger(__name__)


@lru_cache(maxsize=4)
def get_synthetic_suite(n_classes: int, images_per_class: int, seed: int) -> Tuple[Dataset, ...]:
    """
    Generate the default synthetic domain suite once per (size, seed)

    Returns:
        Tuple of datasets, seen domains first
    """
    specs = SyntheticSuiteConfig(n_classes, images_per_class, seed).domain_specs()
    logger.info("Generating %d synthetic domains (%d classes x %d images, seed %d)",
                len(specs), n_classes, images_per_class, seed)
    return tuple(gen_synthetic_domains(specs, seed))


@lru_cache(maxsize=8)
def get_idx_dataset(name: str, data_dir: Optional[str], resolution: int, domain_id: int) -> Dataset:
    return load_idx_directory(name, data_dir, resolution=resolution, domain_id=domain_id)


def get_datasets(names: Sequence[str], suite, data_dir: Optional[str] = None,
                 resolution: int = 32) -> List[Dataset]:
    """
    Resolve dataset names against the synthetic suite and IDX data root.

    Args:
        names: Synthetic domain names or "idx:<name>"; empty means every
            synthetic domain
        suite: SyntheticSuiteConfig
        data_dir: Data root override
        resolution: Backbone input resolution for IDX datasets

    Returns:
        Datasets in the requested order
    """
    synthetic = get_synthetic_suite(suite.n_classes, suite.images_per_class, suite.seed)
    by_name = {ds.name: ds for ds in synthetic}
    if not names:
        return list(synthetic)
    datasets = []
    for name in names:
        if name.startswith("idx:"):
            domain_id = len(synthetic) + len(datasets)
            datasets.append(get_idx_dataset(name[4:], data_dir, resolution, domain_id))
        elif name in by_name:
            datasets.append(by_name[name])
        else:
            raise ConfigError(f"Unknown dataset '{name}', expected one of {sorted(by_name)} or idx:<name>")
    return datasets


def clear_cache() -> None:
    get_synthetic_suite.cache_clear()
    get_idx_dataset.cache_clear()
