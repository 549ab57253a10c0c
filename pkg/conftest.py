"""
Shared fixtures: a tiny backbone, a tiny synthetic suite and the
central-difference gradient helper
"""

import numpy as np
import pytest

from src.utils.backbone import BackboneSpec, init_weights
from src.utils.episodes import SyntheticDomainSpec, gen_synthetic_domains
from src.utils.tensor import GradTape, Tensor, hadamard, tensor_sum

# Two stages: square sites and channel-changing sites
TINY_SPEC = BackboneSpec(
    stem_channels=4,
    stage_channels=(4, 8),
    blocks_per_stage=1,
    input_resolution=8,
    name="tiny",
)

SWAP = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]


def tiny_domain_specs(n_classes: int = 8, images_per_class: int = 20):
    common = dict(n_classes=n_classes, images_per_class=images_per_class,
                  split_fractions=(0.0, 0.0, 1.0), resolution=8)
    return [
        SyntheticDomainSpec("plain", "identity", {}, True, 0, **common),
        SyntheticDomainSpec("swapped", "channel_mix", {"matrix": SWAP}, False, 1, **common),
    ]


def randomize_batchnorm(weights, seed: int = 0):
    """Non-trivial stored statistics and affine parameters"""
    rng = np.random.default_rng(seed)
    for name, tensor in weights.tensors.items():
        if name.endswith(".mean"):
            tensor.data[:] = rng.normal(0.0, 0.1, size=tensor.shape)
        elif name.endswith(".var"):
            tensor.data[:] = rng.uniform(0.5, 1.5, size=tensor.shape)
        elif name.endswith(".gamma"):
            tensor.data[:] = rng.uniform(0.8, 1.2, size=tensor.shape)
        elif name.endswith(".beta"):
            tensor.data[:] = rng.normal(0.0, 0.1, size=tensor.shape)
    return weights


def central_difference(value_fn, array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d value_fn() / d array by central differences, perturbing `array` in place"""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + eps
        plus = value_fn()
        array[idx] = original - eps
        minus = value_fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradient_check(fn, arrays, seed: int = 0, eps: float = 1e-5) -> float:
    """
    Worst relative error between tape gradients and central differences of
    sum(fn(*inputs) * R) for a fixed random R.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)

    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = tensor_sum(hadamard(fn(*params), weights))
        tape.backward(loss, params)

    def value():
        return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

    return max(relative_error(p.grad, central_difference(value, a, eps)) for p, a in zip(params, arrays))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_backbone():
    return randomize_batchnorm(init_weights(TINY_SPEC, seed=0))


@pytest.fixture(scope="session")
def tiny_datasets():
    return gen_synthetic_domains(tiny_domain_specs(), seed=0)


@pytest.fixture
def tiny_images(rng):
    return rng.standard_normal((6, 3, 8, 8))
