"""
Experiment Harness
Runs episodic evaluations over datasets with a worker pool, builds JSON run
reports and long-form CSV ablation grids.
"""

import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.utils.adaptation import evaluate_episode, finetune_baseline, predict
from src.utils.adapters import AdapterConfig, AdapterConfigError, attach, parse_attachment, parse_code
from src.utils.backbone import BackboneWeights, count_parameters, init_weights
from src.utils.config import RunConfig, validate_run_config
from src.utils.data_cache import get_datasets
from src.utils.episodes import Dataset, episode_rng, sample_episode
from src.utils.statistics import accuracy_digest, summarize
from src.utils.weights_file import import_weights

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
MAX_FAILURE_RATE = 0.01

CSV_COLUMNS = [
    "method", "dataset", "seen_flag", "protocol", "n_episodes",
    "mean_acc", "ci95", "params_fraction", "seed",
]

# Axes understood by ablation_grid
GRID_AXES = ("method", "connection", "form", "attachment", "N", "iterations",
             "include_pa", "init", "head")


class HarnessError(RuntimeError):
    """Raised when a run cannot complete"""


@dataclass
class DatasetResult:
    name: str
    seen: bool
    mean_acc: float
    ci95: float
    n_episodes: int
    accuracies: List[float]
    digest: str
    failures: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "seen": self.seen,
            "mean_acc": self.mean_acc,
            "ci95": self.ci95,
            "n_episodes": self.n_episodes,
            "accuracies": list(self.accuracies),
            "digest": self.digest,
            "failures": list(self.failures),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DatasetResult":
        return cls(
            name=data["name"],
            seen=bool(data["seen"]),
            mean_acc=float(data["mean_acc"]),
            ci95=float(data["ci95"]),
            n_episodes=int(data["n_episodes"]),
            accuracies=[float(a) for a in data["accuracies"]],
            digest=data["digest"],
            failures=list(data.get("failures", [])),
        )


@dataclass
class RunReport:
    """Self-describing result of one run (config echoed verbatim)"""
    method: str
    config: Dict[str, Any]
    datasets: Dict[str, DatasetResult]
    params: Dict[str, Any]
    wall_clock: float
    format_version: int = REPORT_FORMAT_VERSION

    def to_dict(self) -> Dict:
        return {
            "format_version": self.format_version,
            "method": self.method,
            "config": self.config,
            "datasets": {name: result.to_dict() for name, result in self.datasets.items()},
            "params": self.params,
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunReport":
        version = data.get("format_version")
        if version != REPORT_FORMAT_VERSION:
            raise HarnessError(f"Unsupported report format_version {version}")
        return cls(
            method=data["method"],
            config=data["config"],
            datasets={name: DatasetResult.from_dict(r) for name, r in data["datasets"].items()},
            params=data["params"],
            wall_clock=float(data["wall_clock"]),
            format_version=version,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunReport":
        return cls.from_json(Path(path).read_text())

    def to_frame(self) -> pd.DataFrame:
        """Long-form rows with the fixed CSV columns"""
        rows = [{
            "method": self.method,
            "dataset": name,
            "seen_flag": result.seen,
            "protocol": self.config.get("protocol"),
            "n_episodes": result.n_episodes,
            "mean_acc": result.mean_acc,
            "ci95": result.ci95,
            "params_fraction": self.params.get("fraction"),
            "seed": self.config.get("seed"),
        } for name, result in self.datasets.items()]
        return pd.DataFrame(rows, columns=CSV_COLUMNS)


def load_backbone(config: RunConfig) -> BackboneWeights:
    """Weights file when configured, otherwise a seeded random backbone"""
    if config.weights:
        weights = import_weights(config.weights)
        if weights.spec.to_dict() != config.backbone_spec.to_dict():
            logger.warning("Weights file spec %s differs from configured backbone %s; using the file's",
                           weights.spec.name, config.backbone)
        return weights
    logger.warning("No weights configured; evaluating a randomly initialized %s", config.backbone)
    return init_weights(config.backbone_spec, config.seed)


def _episode_seed(seed: int, domain_id: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, domain_id, index]).generate_state(1)[0])


def run_episode(backbone: BackboneWeights, dataset: Dataset, config: RunConfig, index: int) -> float:
    """Sample, adapt and score one episode; depends only on (config, dataset, index)"""
    episode = sample_episode(dataset, config.protocol, episode_rng(config.seed, dataset.domain_id, index),
                             config.split, index)
    adapt_config = config.adapt.for_group(dataset.group)
    if adapt_config.finetune_all:
        support = (episode.support_images, episode.support_labels)
        model, _ = finetune_baseline(backbone, support, adapt_config, include_pa=config.adapter.include_pa)
        tuned = replace(adapt_config, head="finetune-ncc")
        predictions = predict(model, support, episode.query_images, tuned)
        return float((predictions == episode.query_labels).mean())
    task_model = attach(backbone, config.adapter, seed=_episode_seed(config.seed, dataset.domain_id, index),
                        head=adapt_config.head)
    return evaluate_episode(task_model, episode, adapt_config)["query_accuracy"]


def _safe_episode(backbone, dataset, config, index):
    try:
        return index, run_episode(backbone, dataset, config, index), None
    except Exception as exc:  # recorded per episode; the run decides whether to abort
        logger.warning("%s episode %d failed: %s", dataset.name, index, exc)
        return index, None, f"{type(exc).__name__}: {exc}"


def parameter_accounting(backbone: BackboneWeights, config: RunConfig) -> Dict[str, Any]:
    counts = count_parameters(backbone, config.adapter)
    if config.adapt.finetune_all:
        trainable = counts["backbone_params"] + counts["backbone_bn_params"]
        if config.adapter.include_pa:
            trainable += backbone.spec.feature_dim ** 2
        counts["adapter_params"] = trainable
        counts["fraction"] = trainable / counts["backbone_params"]
    return counts


def run_experiment(config: RunConfig, backbone: Optional[BackboneWeights] = None,
                   datasets: Optional[Sequence[Dataset]] = None) -> RunReport:
    """
    Evaluate one method on every configured dataset.

    Args:
        config: Run configuration
        backbone: Pre-loaded weights (loaded from config when omitted)
        datasets: Pre-built datasets (resolved from config when omitted)

    Returns:
        RunReport

    Raises:
        HarnessError: If more than 1% of episodes fail
    """
    validate_run_config(config)
    start = time.perf_counter()
    backbone = backbone or load_backbone(config)
    if datasets is None:
        datasets = get_datasets(config.datasets, config.synthetic, config.data_dir,
                                backbone.spec.input_resolution)

    results: Dict[str, DatasetResult] = {}
    total_failures = 0
    total_episodes = 0
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for dataset in datasets:
            logger.info("%s on %s: %d episodes (%s)", config.method, dataset.name, config.episodes,
                        config.protocol)
            outcomes = sorted(pool.map(lambda i: _safe_episode(backbone, dataset, config, i),
                                       range(config.episodes)))
            accuracies = [acc for _, acc, err in outcomes if err is None]
            failures = [{"index": i, "error": err} for i, _, err in outcomes if err is not None]
            total_failures += len(failures)
            total_episodes += len(outcomes)
            mean, ci = summarize(accuracies)
            results[dataset.name] = DatasetResult(dataset.name, dataset.seen, mean, ci, len(accuracies),
                                                  accuracies, accuracy_digest(accuracies), failures)
            logger.info("%s: %.2f +- %.2f", dataset.name, 100 * mean, 100 * ci)

    if total_episodes and total_failures / total_episodes > MAX_FAILURE_RATE:
        raise HarnessError(f"{total_failures} of {total_episodes} episodes failed "
                           f"(limit {MAX_FAILURE_RATE:.0%})")

    report = RunReport(
        method=method_label(config),
        config=config.to_dict(),
        datasets=results,
        params=parameter_accounting(backbone, config),
        wall_clock=time.perf_counter() - start,
    )
    if config.out:
        report.save(config.out)
        logger.info("Report written to %s", config.out)
    return report


def method_label(config: RunConfig) -> str:
    """Method code plus the head when it is not the default NCC"""
    code = "Finetune" if config.adapt.finetune_all else config.adapter.code
    head = config.adapt.head
    if head not in ("ncc", "finetune-ncc"):
        code = f"{code}+{head.upper()}"
    return code


def _attachment_label(attachment) -> str:
    if attachment == "all":
        return "block-all"
    return "block" + ",".join(str(s) for s in attachment)


def _grid_point(base: RunConfig, point: Mapping[str, Any]) -> RunConfig:
    adapter = base.adapter
    if "method" in point:
        adapter = parse_code(point["method"], attachment=adapter.attachment, init=adapter.init,
                             delta=adapter.delta, strict=adapter.strict)
    fields = adapter.to_dict()
    if "connection" in point:
        fields["connection"] = {"S": "serial", "R": "residual"}.get(point["connection"], point["connection"])
    if "form" in point:
        fields["form"] = {"M": "matrix", "CW": "channelwise"}.get(point["form"], point["form"])
        if fields["form"] != "decomposed":
            fields["divisor"] = None
            fields["decompose_stages"] = None
    if "N" in point:
        fields["form"] = "decomposed" if point["N"] else fields["form"]
        fields["divisor"] = point["N"] or None
    if "attachment" in point:
        fields["attachment"] = parse_attachment(point["attachment"])
    if "include_pa" in point:
        fields["include_pa"] = bool(point["include_pa"])
    if "init" in point:
        fields["init"] = point["init"]
    for key in ("attachment", "decompose_stages"):
        if isinstance(fields.get(key), list):
            fields[key] = tuple(fields[key])
    adapter = AdapterConfig(**fields)

    adapt = base.adapt
    if "iterations" in point:
        adapt = replace(adapt, iterations=int(point["iterations"]))
    if "head" in point:
        adapt = replace(adapt, head=point["head"])
    config = replace(base, adapter=adapter, adapt=adapt, head=adapt.head, out=None)
    validate_run_config(config)
    return config


def grid_label(config: RunConfig, point: Mapping[str, Any]) -> str:
    label = method_label(config)
    if "attachment" in point:
        label += f"|{_attachment_label(config.adapter.attachment)}"
    if "iterations" in point:
        label += f"|it{config.adapt.iterations}"
    if "init" in point:
        label += f"|{config.adapter.init}"
    return label


def ablation_grid(base: RunConfig, axes: Mapping[str, Sequence], out_csv: Optional[Union[str, Path]] = None,
                  backbone: Optional[BackboneWeights] = None,
                  datasets: Optional[Sequence[Dataset]] = None) -> pd.DataFrame:
    """
    Run the Cartesian product of axis values and collect a long-form table.

    Illegal combinations are skipped with a logged reason. When `out_csv` is
    given the rows are appended to it (header written once).
    """
    unknown = set(axes) - set(GRID_AXES)
    if unknown:
        raise HarnessError(f"Unknown ablation axes {sorted(unknown)}; expected a subset of {GRID_AXES}")
    backbone = backbone or load_backbone(base)
    if datasets is None:
        datasets = get_datasets(base.datasets, base.synthetic, base.data_dir, backbone.spec.input_resolution)

    names = list(axes)
    frames = []
    for values in itertools.product(*(axes[name] for name in names)):
        point = dict(zip(names, values))
        try:
            config = _grid_point(base, point)
        except (AdapterConfigError, ValueError) as exc:
            logger.info("Skipping %s: %s", point, exc)
            continue
        report = run_experiment(config, backbone=backbone, datasets=datasets)
        frame = report.to_frame()
        frame["method"] = grid_label(config, point)
        frames.append(frame)

    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CSV_COLUMNS)
    if out_csv:
        path = Path(out_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, mode="a", header=not path.exists(), index=False)
        logger.info("Appended %d rows to %s", len(table), path)
    return table


def reports_frame(reports: Sequence[RunReport]) -> pd.DataFrame:
    """Concatenate report rows into one long-form table"""
    frames = [r.to_frame() for r in reports]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CSV_COLUMNS)
