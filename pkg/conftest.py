"""Shared fixtures and gradient-check helpers"""

from typing import Callable, List

import numpy as np
import pytest

from cache import reset_cache
from config import clear_settings_cache
from data_io import Dataset, synth_blobs
from losses import PrototypeSet
from models import LayerKind, LayerSpec, ModelSpec, TrainConfig
from network import build
from tensor_core import Tape, Tensor
from training import train_variant

FD_STEP = 1e-4
FD_RTOL = 1e-4


def mini_spec(num_classes: int = 3, input_shape=(1, 8, 8)) -> ModelSpec:
    """conv-prelu-pool-flatten-fc-prelu-fc with taps at the flattened map and the hidden FC"""
    layers = [
        LayerSpec(kind=LayerKind.CONV, out=6, kernel=3, padding=1),
        LayerSpec(kind=LayerKind.PRELU),
        LayerSpec(kind=LayerKind.POOL, size=2),
        LayerSpec(kind=LayerKind.FLATTEN),
        LayerSpec(kind=LayerKind.FC, out=8),
        LayerSpec(kind=LayerKind.PRELU),
        LayerSpec(kind=LayerKind.FC, out=num_classes),
    ]
    return ModelSpec(name="mini", layers=layers, tap_points=[3, 5], num_classes=num_classes,
                     input_shape=tuple(input_shape))


def mini_train_config(**overrides) -> TrainConfig:
    values = dict(epochs=6, warmup_epochs=2, batch_size=16, lr=0.05, lr_decay_epochs=[], seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        plus = fn(x)
        x[idx] = orig - h
        minus = fn(x)
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def analytic_grads(loss_fn: Callable[..., Tensor], *arrays: np.ndarray) -> List[np.ndarray]:
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = loss_fn(*tensors)
        tape.backward(loss)
    return [t.grad for t in tensors]


def check_gradients(loss_fn: Callable[..., Tensor], *arrays: np.ndarray, rtol: float = FD_RTOL,
                    atol: float = 1e-6) -> None:
    """Compare tape gradients of every input against central differences"""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = analytic_grads(loss_fn, *arrays)
    for i, analytic in enumerate(grads):
        def scalar(xi, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(xi)
            return float(loss_fn(*args).data)
        numeric = numeric_grad(scalar, arrays[i])
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol,
                                   err_msg=f"gradient mismatch for input {i}")


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Point outputs at a temp dir and drop cached settings and cache state"""
    monkeypatch.setenv("PROTOSHIELD_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("PROTOSHIELD_PLOTS", "false")
    monkeypatch.delenv("PROTOSHIELD_REDIS_URL", raising=False)
    clear_settings_cache()
    reset_cache()
    yield
    clear_settings_cache()
    reset_cache()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs() -> Dataset:
    return synth_blobs(3, 24, (1, 8, 8), spread=0.05, seed=0, split="train")


@pytest.fixture(scope="session")
def blobs_test() -> Dataset:
    return synth_blobs(3, 10, (1, 8, 8), spread=0.05, seed=0, split="test")


@pytest.fixture
def untrained_mini():
    spec = mini_spec()
    model = build(spec, seed=0)
    return model, PrototypeSet.initialize(spec.num_classes, model.tap_dims, seed=0)


@pytest.fixture(scope="session")
def trained_mini(blobs):
    """(model, prototypes, log) of a PCL run on the blob data"""
    return train_variant(mini_spec(), blobs, mini_train_config(), variant="pcl", seed=0)


@pytest.fixture(scope="session")
def trained_mini_ce(blobs):
    return train_variant(mini_spec(), blobs, mini_train_config(), variant="ce-only", seed=0)
