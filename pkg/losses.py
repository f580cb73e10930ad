"""Training objectives: cross-entropy, prototype conformity, and their deeply supervised sum"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

import tensor_core as tc
from exceptions import ConfigurationError, DimensionError, DomainError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

PROTOTYPE_INIT_STD = 1.0


def _check_labels(labels: np.ndarray, num_classes: int, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError("labels", (n,), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise DomainError(f"label {bad} outside [0, {num_classes})", details={"label": bad, "num_classes": num_classes})
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[y]"""
    n, k = logits.shape
    labels = _check_labels(labels, k, n)
    log_probs = tc.log_softmax(logits, axis=1)
    picked = tc.sum(log_probs * tc.one_hot(labels, k), axis=1)
    return -tc.mean(picked)


def prototype_conformity(features: Tensor, labels, centroids: Tensor) -> Tensor:
    """Batch mean of ||f - w_y|| - (1/(k-1)) * sum_{j != y} (||f - w_j|| + ||w_y - w_j||)"""
    if features.ndim != 2 or centroids.ndim != 2 or features.shape[1] != centroids.shape[1]:
        raise DimensionError("prototype_conformity", features.shape, centroids.shape)
    k = centroids.shape[0]
    if k < 2:
        raise ConfigurationError("prototype conformity needs at least 2 classes", details={"num_classes": k})
    labels = _check_labels(labels, k, features.shape[0])

    own = tc.one_hot(labels, k)
    others = 1.0 - own
    to_centroids = tc.pairwise_distance(features, centroids)           # [N, k]
    between = tc.pairwise_distance(centroids, centroids)               # [k, k]
    own_rows = tc.matmul(Tensor(own, copy=False), between)             # row y_i of between

    pull = tc.sum(to_centroids * own, axis=1)
    push = tc.sum(to_centroids * others, axis=1) + tc.sum(own_rows * others, axis=1)
    return tc.mean(pull - push / float(k - 1))


class PrototypeSet:
    """Trainable class centroids, one [k, d] matrix per tap"""

    def __init__(self, centroids: List[Tensor]):
        self.centroids = centroids

    @classmethod
    def initialize(cls, num_classes: int, dims: Sequence[int], seed: int = 0) -> "PrototypeSet":
        rng = np.random.default_rng(seed)
        return cls([Tensor(rng.standard_normal((num_classes, d)) * PROTOTYPE_INIT_STD, requires_grad=True)
                    for d in dims])

    def __len__(self) -> int:
        return len(self.centroids)

    def __getitem__(self, tap: int) -> Tensor:
        return self.centroids[tap]

    @property
    def num_classes(self) -> int:
        return self.centroids[0].shape[0] if self.centroids else 0

    @property
    def dims(self) -> List[int]:
        return [c.shape[1] for c in self.centroids]

    def parameters(self) -> List[Tensor]:
        return list(self.centroids)

    def frozen(self) -> "PrototypeSet":
        return PrototypeSet([Tensor(c.data, requires_grad=False, copy=False) for c in self.centroids])

    def copy(self) -> "PrototypeSet":
        return PrototypeSet([Tensor(c.data, requires_grad=True) for c in self.centroids])

    def subset(self, taps: Sequence[int]) -> "PrototypeSet":
        return PrototypeSet([self.centroids[t] for t in taps])

    def pairwise_stats(self) -> Tuple[List[float], List[float]]:
        """Mean and minimum distance between distinct centroids, per tap"""
        means, mins = [], []
        for c in self.centroids:
            d = tc.pairwise_distance(c.data, c.data).data
            off = d[~np.eye(d.shape[0], dtype=bool)]
            means.append(float(off.mean()) if off.size else 0.0)
            mins.append(float(off.min()) if off.size else 0.0)
        return means, mins

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for c in self.centroids:
            digest.update(np.ascontiguousarray(c.data).tobytes())
        return digest.hexdigest()[:16]

    def rows(self) -> Iterator[Tuple[int, int, int, float]]:
        """(tap, class, dim, value) for every centroid entry"""
        for tap, c in enumerate(self.centroids):
            for cls_idx in range(c.shape[0]):
                for dim in range(c.shape[1]):
                    yield tap, cls_idx, dim, float(c.data[cls_idx, dim])


@dataclass
class LossBreakdown:
    loss: Tensor
    total: float
    ce: float
    pc_per_tap: List[float] = field(default_factory=list)


def ce_only(logits: Tensor, labels) -> LossBreakdown:
    loss = cross_entropy(logits, labels)
    value = float(loss.data)
    return LossBreakdown(loss=loss, total=value, ce=value, pc_per_tap=[])


def joint_loss(model_out, labels, protos: PrototypeSet, weights: Optional[Sequence[float]] = None) -> LossBreakdown:
    """CE on the logits plus prototype conformity at every tap"""
    taps = model_out.taps
    if len(taps) != len(protos):
        raise ConfigurationError(f"{len(taps)} taps but {len(protos)} prototype sets",
                                 details={"taps": len(taps), "prototype_sets": len(protos)})
    if weights is None:
        weights = [1.0] * len(taps)
    elif len(weights) != len(taps):
        raise ConfigurationError(f"{len(weights)} loss weights for {len(taps)} taps",
                                 details={"field": "train.loss_weights"})

    ce = cross_entropy(model_out.logits, labels)
    pc_terms: List[Tensor] = []
    for feats, centroids, w in zip(taps, protos.centroids, weights):
        term = prototype_conformity(feats, labels, centroids)
        pc_terms.append(term if w == 1.0 else term * float(w))

    if pc_terms:
        pc_sum = pc_terms[0]
        for term in pc_terms[1:]:
            pc_sum = pc_sum + term
        loss = ce + pc_sum
    else:
        loss = ce
    return LossBreakdown(loss=loss, total=float(loss.data), ce=float(ce.data),
                         pc_per_tap=[float(t.data) for t in pc_terms])


def predict_prototype(features: Union[Sequence, np.ndarray, Tensor], protos: PrototypeSet) -> np.ndarray:
    """Nearest centroid at the deepest tap; ties go to the lowest class index.

    `features` is either the per-tap feature list or the deepest tap's features.
    """
    if isinstance(features, (list, tuple)):
        features = features[-1]
    f = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    w = protos.centroids[-1].data
    if f.ndim != 2 or f.shape[1] != w.shape[1]:
        raise DimensionError("predict_prototype", f.shape, w.shape)
    d = np.sqrt(np.square(f[:, None, :] - w[None, :, :]).sum(axis=-1))
    return np.argmin(d, axis=1)
