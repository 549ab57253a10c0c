"""
Classifiers Module
Few-shot heads over (adapted, aligned) embeddings: nearest centroid,
Mahalanobis distance, logistic regression / softmax linear heads and KNN.
"""

import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.utils.tensor import (
    GradTape,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    hadamard,
    index_rows,
    l2_normalize,
    matmul,
    matrix_inverse,
    reshape,
    sigmoid_binary_cross_entropy,
    softmax_cross_entropy,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

# Cosine temperature for NCC logits
NCC_TEMPERATURE = 10.0
NCC_METRICS = ("cosine", "euclidean")

# Covariance ridge, relative to the mean diagonal of the task covariance
COV_RIDGE = 1e-3
COV_MAX_CONDITION = 1e12

LINEAR_HEAD_STEPS = 100
LINEAR_HEAD_LR = 0.5

HEAD_KINDS = ("ncc", "md", "lr", "softmax", "knn", "finetune-ncc")


class ClassifierError(ValueError):
    """Raised for ill-posed classification problems"""


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    k: Optional[int] = None

    @property
    def is_linear(self) -> bool:
        return self.kind in ("lr", "softmax")

    @property
    def descriptor(self) -> str:
        return f"knn{self.k}" if self.kind == "knn" else self.kind


def parse_head(descriptor: str) -> HeadSpec:
    """Parse "ncc" | "md" | "lr" | "softmax" | "knn{k}" | "finetune-ncc" """
    text = descriptor.strip().lower()
    match = re.fullmatch(r"knn(\d+)", text)
    if match:
        k = int(match.group(1))
        if k < 1:
            raise ClassifierError(f"KNN needs k >= 1, got {k}")
        return HeadSpec("knn", k)
    if text not in HEAD_KINDS or text == "knn":
        raise ClassifierError(f"Unknown classifier head '{descriptor}' (expected one of "
                              f"ncc, md, lr, softmax, knn<k>, finetune-ncc)")
    return HeadSpec(text)


def check_support_labels(labels, way: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Labels must be 0..way-1 with every class present and way >= 2"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ClassifierError("Support set is empty")
    if way is None:
        way = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= way:
        raise ClassifierError(f"Support labels must lie in [0, {way})")
    counts = np.bincount(labels, minlength=way)
    if way < 2:
        raise ClassifierError(f"Need at least 2 classes, got {way}")
    if np.any(counts == 0):
        raise ClassifierError(f"Classes {np.flatnonzero(counts == 0).tolist()} have no support samples")
    return labels, way


@dataclass
class Prototypes:
    """Class centroids (way x d) and support counts"""
    centroids: Tensor
    class_counts: np.ndarray

    @property
    def way(self) -> int:
        return self.centroids.shape[0]


def averaging_matrix(labels: np.ndarray, way: int) -> np.ndarray:
    """(way x n) matrix whose row k averages the class-k rows"""
    counts = np.bincount(labels, minlength=way).astype(float)
    onehot = np.zeros((way, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    return onehot / counts[:, None]


def compute_prototypes(support_emb, labels, metric: str = "cosine") -> Prototypes:
    """
    Args:
        support_emb: Support embeddings (n x d)
        labels: Support labels in [0, way)
        metric: "cosine" averages L2-normalized embeddings

    Returns:
        Prototypes
    """
    z = as_tensor(support_emb)
    labels, way = check_support_labels(labels)
    if metric not in NCC_METRICS:
        raise ClassifierError(f"Unknown NCC metric '{metric}'")
    if metric == "cosine":
        z = l2_normalize(z, axis=1)
    centroids = matmul(Tensor(averaging_matrix(labels, way)), z)
    return Prototypes(centroids, np.bincount(labels, minlength=way))


def ncc_logits(query_emb, prototypes: Prototypes, metric: str = "cosine",
               tau: float = NCC_TEMPERATURE) -> Tensor:
    """
    Nearest-centroid logits.

    cosine: tau * cos(z, c_k); euclidean: -||z - c_k||^2.
    """
    q = as_tensor(query_emb)
    c = prototypes.centroids
    if q.ndim != 2 or q.shape[1] != c.shape[1]:
        raise ShapeError(f"Query embeddings {q.shape} do not match centroids {c.shape}")
    if metric == "cosine":
        sims = matmul(l2_normalize(q, axis=1), transpose(l2_normalize(c, axis=1)))
        return hadamard(sims, tau)
    if metric == "euclidean":
        qq = tensor_sum(hadamard(q, q), axis=1, keepdims=True)
        cc = tensor_sum(hadamard(c, c), axis=1)
        cross = hadamard(matmul(q, transpose(c)), 2.0)
        return sub(sub(cross, qq), cc)
    raise ClassifierError(f"Unknown NCC metric '{metric}'")


def _scatter(x: Tensor) -> Tensor:
    """Unbiased covariance of the rows of x (zero for a single row)"""
    n, d = x.shape
    if n < 2:
        return Tensor(np.zeros((d, d)))
    centered = sub(x, tensor_mean(x, axis=0, keepdims=True))
    return hadamard(matmul(transpose(centered), centered), 1.0 / (n - 1))


def class_covariances(support_emb, labels, ridge: float = COV_RIDGE) -> Tuple[Tensor, List[Tensor]]:
    """
    Blended per-class covariances
    Sigma_k = lam_k S_k + (1 - lam_k) S_task + eps I, lam_k = n_k / (n_k + 1).

    Returns:
        (centroids, list of way covariance tensors)
    """
    z = as_tensor(support_emb)
    labels, way = check_support_labels(labels)
    d = z.shape[1]
    eye = Tensor(np.eye(d))
    task_cov = _scatter(z)
    mean_diag = hadamard(tensor_sum(hadamard(task_cov, eye)), 1.0 / d)
    ridge_term = hadamard(eye, hadamard(mean_diag, ridge))

    centroids = matmul(Tensor(averaging_matrix(labels, way)), z)
    covariances = []
    for k in range(way):
        rows = np.flatnonzero(labels == k)
        n_k = rows.size
        lam = n_k / (n_k + 1.0)
        blended = add(hadamard(_scatter(index_rows(z, rows)), lam), hadamard(task_cov, 1.0 - lam))
        covariances.append(add(blended, ridge_term))
    return centroids, covariances


def mahalanobis_logits(query_emb, centroids, precisions: Sequence[Tensor]) -> Tensor:
    """logits_k = -1/2 (z - c_k)^T P_k (z - c_k)"""
    q = as_tensor(query_emb)
    c = as_tensor(centroids)
    n = q.shape[0]
    columns = []
    for k, precision in enumerate(precisions):
        diff = sub(q, index_rows(c, np.array([k])))
        quad = tensor_sum(hadamard(matmul(diff, precision), diff), axis=1)
        columns.append(reshape(hadamard(quad, -0.5), (n, 1)))
    return concat(columns, axis=1)


def md_logits(query_emb, support_emb, labels, ridge: float = COV_RIDGE) -> Tensor:
    """
    Mahalanobis-distance logits with class/task covariance blending.

    Raises:
        ClassifierError: If a blended covariance is numerically singular
    """
    centroids, covariances = class_covariances(support_emb, labels, ridge)
    precisions = []
    for k, cov in enumerate(covariances):
        cond = np.linalg.cond(cov.data)
        if not np.isfinite(cond) or cond > COV_MAX_CONDITION:
            raise ClassifierError(f"Covariance of class {k} is singular (condition number {cond:.3g})")
        precisions.append(matrix_inverse(cov))
    return mahalanobis_logits(query_emb, centroids, precisions)


@dataclass
class LinearHead:
    """Affine classifier on (optionally L2-normalized) embeddings"""
    kind: str
    weight: Tensor
    bias: Tensor
    normalize: bool = True

    def logits(self, emb) -> Tensor:
        z = as_tensor(emb)
        if self.normalize:
            z = l2_normalize(z, axis=1)
        return add(matmul(z, transpose(self.weight)), self.bias)

    def loss(self, emb, labels) -> Tensor:
        logits = self.logits(emb)
        if self.kind == "lr":
            targets = np.eye(logits.shape[1])[np.asarray(labels, dtype=np.int64)]
            return sigmoid_binary_cross_entropy(logits, targets)
        return softmax_cross_entropy(logits, labels)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


def init_linear_head(kind: str, dim: int, way: int, normalize: bool = True) -> LinearHead:
    """Zero-initialized head (uniform predictions)"""
    if kind not in ("lr", "softmax"):
        raise ClassifierError(f"Linear head kind must be 'lr' or 'softmax', got '{kind}'")
    return LinearHead(kind, Tensor(np.zeros((way, dim)), requires_grad=True),
                      Tensor(np.zeros(way), requires_grad=True), normalize)


def train_linear_head(kind: str, support_emb, labels, steps: int = LINEAR_HEAD_STEPS,
                      lr: float = LINEAR_HEAD_LR, normalize: bool = True) -> LinearHead:
    """
    Fit a logistic-regression (one-vs-rest) or softmax head on the support set
    with full-batch gradient descent from zero.
    """
    z = as_tensor(support_emb).detach()
    labels, way = check_support_labels(labels)
    head = init_linear_head(kind, z.shape[1], way, normalize)
    params = head.parameters()
    for step in range(steps):
        for p in params:
            p.zero_grad()
        with GradTape() as tape:
            loss = head.loss(z, labels)
            tape.backward(loss, params)
        for p in params:
            p.data -= lr * p.grad
    logger.debug("Trained %s head for %d steps", kind, steps)
    return head


def knn_predict(query_emb, support_emb, labels, k: int) -> np.ndarray:
    """
    Majority vote among the k nearest supports by cosine distance; ties go to
    the smallest class index.

    Raises:
        ZeroNormError: If a query or support embedding is the zero vector
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_support = as_tensor(support_emb).shape[0]
    if k < 1 or k > n_support:
        raise ClassifierError(f"k={k} must lie in [1, {n_support}]")
    qn = l2_normalize(query_emb, axis=1).data
    sn = l2_normalize(support_emb, axis=1).data
    sims = qn @ sn.T
    way = int(labels.max()) + 1
    predictions = np.empty(len(qn), dtype=np.int64)
    for i, row in enumerate(sims):
        nearest = np.argsort(-row, kind="stable")[:k]
        predictions[i] = int(np.argmax(np.bincount(labels[nearest], minlength=way)))
    return predictions
