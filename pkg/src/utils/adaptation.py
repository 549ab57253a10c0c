"""
Adaptation Module
Meta-test loop: optimize the task-specific weights (alpha, beta) on the
support set with Adadelta, then classify the query set.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.utils.adapters import AdapterConfig, TaskModel, attach
from src.utils.backbone import BackboneWeights
from src.utils.classifiers import (
    LINEAR_HEAD_LR,
    LINEAR_HEAD_STEPS,
    HeadSpec,
    check_support_labels,
    compute_prototypes,
    init_linear_head,
    knn_predict,
    md_logits,
    ncc_logits,
    parse_head,
    train_linear_head,
)
from src.utils.tensor import (
    ADADELTA_EPS,
    ADADELTA_RHO,
    AdadeltaState,
    GradTape,
    Tensor,
    adadelta_step,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 40
DEFAULT_LR_BETA = 0.1

# lr_beta per dataset group when not set explicitly
LR_PRESETS = {
    "seen": 0.1,
    "unseen": 1.0,
}


class AdaptationError(RuntimeError):
    """Raised when adaptation diverges; carries the trace up to the failure"""

    def __init__(self, message: str, trace: "AdaptTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class AdaptConfig:
    """
    Meta-test optimization settings.

    lr_beta falls back to the dataset-group preset (or 0.1) and lr_alpha to
    half of the resolved lr_beta.
    """
    iterations: int = DEFAULT_ITERATIONS
    lr_beta: Optional[float] = None
    lr_alpha: Optional[float] = None
    rho: float = ADADELTA_RHO
    eps: float = ADADELTA_EPS
    optimizer: str = "adadelta"
    head: str = "ncc"
    metric: str = "cosine"
    finetune_all: bool = False
    seed: int = 0
    head_steps: int = LINEAR_HEAD_STEPS
    head_lr: float = LINEAR_HEAD_LR

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.optimizer != "adadelta":
            raise ValueError(f"Only the adadelta optimizer is supported, got '{self.optimizer}'")
        parse_head(self.head)

    def effective_lr_beta(self, group: Optional[str] = None) -> float:
        if self.lr_beta is not None:
            return self.lr_beta
        if group is not None:
            if group not in LR_PRESETS:
                raise ValueError(f"Unknown dataset group '{group}', expected one of {list(LR_PRESETS)}")
            return LR_PRESETS[group]
        return DEFAULT_LR_BETA

    def effective_lr_alpha(self, group: Optional[str] = None) -> float:
        if self.lr_alpha is not None:
            return self.lr_alpha
        return self.effective_lr_beta(group) / 2.0

    def for_group(self, group: Optional[str]) -> "AdaptConfig":
        """Copy with both learning rates resolved for a dataset group"""
        lr_beta = self.effective_lr_beta(group)
        return replace(self, lr_beta=lr_beta, lr_alpha=self.effective_lr_alpha(group))

    def to_dict(self) -> Dict:
        return {
            "iterations": self.iterations,
            "lr_beta": self.lr_beta,
            "lr_alpha": self.lr_alpha,
            "rho": self.rho,
            "eps": self.eps,
            "optimizer": self.optimizer,
            "head": self.head,
            "metric": self.metric,
            "finetune_all": self.finetune_all,
            "seed": self.seed,
            "head_steps": self.head_steps,
            "head_lr": self.head_lr,
        }


@dataclass
class AdaptTrace:
    """Per-iteration support loss, support accuracy and wall-clock seconds"""
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)

    @property
    def best_loss(self) -> float:
        return min(self.losses) if self.losses else float("nan")


def support_logits(z: Tensor, head: HeadSpec, labels: np.ndarray, config: AdaptConfig,
                   linear_head=None) -> Tensor:
    """Logits of the support embeddings under the adaptation loss of the head"""
    if head.kind == "md":
        return md_logits(z, z, labels)
    if head.is_linear:
        return linear_head.logits(z)
    return ncc_logits(z, compute_prototypes(z, labels, config.metric), config.metric)


def _model_for_finetune(model: TaskModel) -> TaskModel:
    tuned = model.clone()
    tuned.backbone = model.backbone.clone(trainable=True)
    return tuned


def adapt(task_model: TaskModel, support: Tuple[np.ndarray, np.ndarray],
          config: AdaptConfig) -> Tuple[TaskModel, AdaptTrace]:
    """
    Minimize support cross-entropy w.r.t. the task-specific weights.

    Args:
        task_model: Model with freshly attached adapters (left untouched)
        support: (images, labels) of the support set
        config: Optimization settings (learning rates already resolved or
            falling back to the defaults)

    Returns:
        (adapted copy of the task model, trace)

    Raises:
        AdaptationError: If the support loss becomes non-finite
    """
    images, labels = support
    labels, way = check_support_labels(labels)
    head = parse_head(config.head)
    model = _model_for_finetune(task_model) if config.finetune_all else task_model.clone()

    alpha_params = model.alpha_parameters()
    if config.finetune_all:
        alpha_params = model.backbone.learnable() + alpha_params
    beta_params = model.beta_parameters()
    theta = alpha_params + beta_params

    linear_head = None
    if head.is_linear:
        linear_head = init_linear_head(head.kind, model.backbone.spec.feature_dim, way)

    trace = AdaptTrace()
    alpha_state = AdadeltaState.for_params(alpha_params, lr=config.effective_lr_alpha(),
                                           rho=config.rho, eps=config.eps)
    beta_state = AdadeltaState.for_params(beta_params, lr=config.effective_lr_beta(),
                                          rho=config.rho, eps=config.eps)
    iterations = config.iterations if theta else 0

    for it in range(iterations):
        start = time.perf_counter()
        trainable = theta + (linear_head.parameters() if linear_head else [])
        for p in trainable:
            p.zero_grad()
        with GradTape() as tape:
            z = model.embed(images)
            logits = support_logits(z, head, labels, config, linear_head)
            loss = linear_head.loss(z, labels) if linear_head else softmax_cross_entropy(logits, labels)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                trace.losses.append(loss_value)
                trace.accuracies.append(float("nan"))
                trace.seconds.append(time.perf_counter() - start)
                raise AdaptationError(f"Non-finite support loss at iteration {it}", trace)
            tape.backward(loss, trainable)
        adadelta_step(alpha_params, [p.grad for p in alpha_params], alpha_state)
        adadelta_step(beta_params, [p.grad for p in beta_params], beta_state)
        if linear_head is not None:
            for p in linear_head.parameters():
                p.data -= config.head_lr * p.grad

        trace.losses.append(loss_value)
        trace.accuracies.append(float((logits.data.argmax(axis=1) == labels).mean()))
        trace.seconds.append(time.perf_counter() - start)
        logger.debug("iter %d  loss %.4f  acc %.3f", it, loss_value, trace.accuracies[-1])

    for p in theta:
        p.grad = None
    if config.finetune_all:
        for p in model.backbone.learnable():
            p.requires_grad = False

    if head.is_linear:
        z = model.embed(images)
        model.fitted_head = train_linear_head(head.kind, z, labels, steps=config.head_steps,
                                              lr=config.head_lr)
    model.head = head.descriptor
    return model, trace


def predict(model: TaskModel, support: Tuple[np.ndarray, np.ndarray], query_images: np.ndarray,
            config: AdaptConfig) -> np.ndarray:
    """Query predictions of an adapted model with its head"""
    images, labels = support
    labels, _ = check_support_labels(labels)
    head = parse_head(config.head)
    z_s = model.embed(images)
    z_q = model.embed(query_images)
    if head.kind == "knn":
        return knn_predict(z_q, z_s, labels, head.k)
    if head.kind == "md":
        logits = md_logits(z_q, z_s, labels)
    elif head.is_linear:
        fitted = model.fitted_head or train_linear_head(head.kind, z_s, labels,
                                                        steps=config.head_steps, lr=config.head_lr)
        logits = fitted.logits(z_q)
    else:
        logits = ncc_logits(z_q, compute_prototypes(z_s, labels, config.metric), config.metric)
    return logits.data.argmax(axis=1)


def evaluate_episode(task_model: TaskModel, episode, adapt_config: AdaptConfig) -> Dict:
    """
    Adapt on the episode's support set and score its query set.

    Returns:
        Dict with query_accuracy, trace and predictions
    """
    support = (episode.support_images, episode.support_labels)
    model, trace = adapt(task_model, support, adapt_config)
    predictions = predict(model, support, episode.query_images, adapt_config)
    accuracy = float((predictions == episode.query_labels).mean())
    return {"query_accuracy": accuracy, "trace": trace, "predictions": predictions}


def finetune_baseline(backbone: BackboneWeights, support: Tuple[np.ndarray, np.ndarray],
                      config: AdaptConfig, include_pa: bool = False) -> Tuple[TaskModel, AdaptTrace]:
    """
    Adapt every backbone weight (and beta if requested) on the support set
    with the NCC loss; the input backbone is not modified.
    """
    model = attach(backbone, AdapterConfig(enabled=False, include_pa=include_pa), seed=config.seed)
    tuned_config = replace(config, finetune_all=True, head="finetune-ncc")
    return adapt(model, support, tuned_config)


def trainable_parameter_count(model: TaskModel, config: AdaptConfig) -> int:
    """Number of weights the adaptation loop would update"""
    count = model.trainable_count()
    if config.finetune_all:
        count += sum(t.size for t in model.backbone.learnable())
    return count
