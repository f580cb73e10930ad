"""Layered classifiers with tap points for deep supervision.

A `ModelSpec` is a flat list of layers. Tap points name layer indices whose
outputs are routed through an auxiliary branch (global average pooling for
4-D maps, optional linear projection) to produce the per-depth features the
prototype loss is applied to.
"""

import hashlib
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import tensor_core as tc
from exceptions import ConfigurationError, DimensionError
from models import AuxBranchSpec, LayerKind, LayerSpec, ModelSection, ModelSpec
from tensor_core import Tensor

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25

# (conv widths per block, fc widths) for each CNN-6 profile
PROFILE_WIDTHS: Dict[str, Tuple[Tuple[int, int, int], Tuple[int, int]]] = {
    "desk": ((32, 64, 128), (512, 64)),
    "tiny": ((16, 32, 64), (256, 32)),
}


class ModelOutput(NamedTuple):
    logits: Tensor
    taps: List[Tensor]


def cnn6_spec(num_classes: int = 10, input_shape: Sequence[int] = (1, 28, 28),
              profile: str = "desk", tap_points: Optional[List[int]] = None) -> ModelSpec:
    """CNN-6: three blocks of two 5x5 convs with PReLU and 2x2 pooling, GAP, FC, FC, FC(k).

    Default taps are the GAP output after block 3 and the two hidden FC activations.
    """
    if profile not in PROFILE_WIDTHS:
        raise ConfigurationError(f"unknown model profile '{profile}'", details={"field": "model.profile"})
    convs, fcs = PROFILE_WIDTHS[profile]
    layers: List[LayerSpec] = []
    for width in convs:
        for _ in range(2):
            layers.append(LayerSpec(kind=LayerKind.CONV, out=width, kernel=5, padding=2))
            layers.append(LayerSpec(kind=LayerKind.PRELU))
        layers.append(LayerSpec(kind=LayerKind.POOL, size=2))
    layers.append(LayerSpec(kind=LayerKind.GAP))
    gap_index = len(layers) - 1
    taps = [gap_index]
    for width in fcs:
        layers.append(LayerSpec(kind=LayerKind.FC, out=width))
        layers.append(LayerSpec(kind=LayerKind.PRELU))
        taps.append(len(layers) - 1)
    layers.append(LayerSpec(kind=LayerKind.FC, out=num_classes))
    return ModelSpec(
        name=f"cnn6-{profile}",
        layers=layers,
        tap_points=taps if tap_points is None else list(tap_points),
        num_classes=num_classes,
        input_shape=tuple(input_shape),
    )


def mlp_spec(input_shape: Sequence[int], hidden: Sequence[int], num_classes: int,
             activation: LayerKind = LayerKind.RELU, tap_points: Optional[List[int]] = None) -> ModelSpec:
    layers = [LayerSpec(kind=LayerKind.FLATTEN)]
    for width in hidden:
        layers.append(LayerSpec(kind=LayerKind.FC, out=width))
        layers.append(LayerSpec(kind=activation))
    layers.append(LayerSpec(kind=LayerKind.FC, out=num_classes))
    return ModelSpec(name="mlp", layers=layers, tap_points=list(tap_points or []),
                     num_classes=num_classes, input_shape=tuple(input_shape))


def source_spec(num_classes: int, input_shape: Sequence[int]) -> ModelSpec:
    """Small ReLU convnet with 3x3 kernels, unrelated to CNN-6, used as a black-box attack source"""
    layers = [
        LayerSpec(kind=LayerKind.CONV, out=16, kernel=3, padding=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.POOL, size=2),
        LayerSpec(kind=LayerKind.CONV, out=32, kernel=3, padding=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.POOL, size=2),
        LayerSpec(kind=LayerKind.FLATTEN),
        LayerSpec(kind=LayerKind.FC, out=128),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.FC, out=num_classes),
    ]
    return ModelSpec(name="source-convnet", layers=layers, tap_points=[],
                     num_classes=num_classes, input_shape=tuple(input_shape))


def spec_from_section(section: ModelSection) -> ModelSpec:
    return cnn6_spec(num_classes=section.num_classes, input_shape=section.input_shape,
                     profile=section.profile, tap_points=section.tap_points)


def infer_shapes(spec: ModelSpec) -> List[Tuple[int, ...]]:
    """Per-layer output shape (without the batch axis); raises on inconsistent chaining"""
    if not spec.layers:
        raise ConfigurationError("model has no layers", details={"field": "layers"})
    shape: Tuple[int, ...] = tuple(spec.input_shape)
    shapes: List[Tuple[int, ...]] = []
    for i, layer in enumerate(spec.layers):
        where = {"layer": i, "kind": layer.kind.value, "input_shape": list(shape)}
        if layer.kind in (LayerKind.CONV, LayerKind.FC) and layer.out is None:
            raise ConfigurationError(f"layer {i} ({layer.kind.value}) needs 'out'", details=where)
        if layer.kind == LayerKind.CONV:
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: conv needs a [C, H, W] input, got {shape}", details=where)
            h = tc.conv_output_size(shape[1], layer.kernel, layer.stride, layer.padding)
            w = tc.conv_output_size(shape[2], layer.kernel, layer.stride, layer.padding)
            shape = (layer.out, h, w)
        elif layer.kind == LayerKind.POOL:
            if len(shape) != 3 or shape[1] < layer.size or shape[2] < layer.size:
                raise ConfigurationError(f"layer {i}: pool {layer.size} does not fit input {shape}", details=where)
            shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
        elif layer.kind == LayerKind.GAP:
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: gap needs a [C, H, W] input, got {shape}", details=where)
            shape = (shape[0],)
        elif layer.kind == LayerKind.FLATTEN:
            shape = (int(np.prod(shape)),)
        elif layer.kind == LayerKind.FC:
            if len(shape) != 1:
                raise ConfigurationError(f"layer {i}: fc needs a flat input, got {shape}; add flatten or gap",
                                         details=where)
            shape = (layer.out,)
        shapes.append(shape)
    return shapes


def validate_spec(spec: ModelSpec) -> List[Tuple[int, ...]]:
    shapes = infer_shapes(spec)
    last = spec.layers[-1]
    if last.kind != LayerKind.FC or last.out != spec.num_classes:
        raise ConfigurationError(f"final layer must be fc with {spec.num_classes} outputs",
                                 details={"field": "layers", "num_classes": spec.num_classes})
    taps = spec.tap_points
    for a, b in zip(taps, taps[1:]):
        if b <= a:
            raise ConfigurationError(f"tap_points must be strictly increasing, got {taps}",
                                     details={"field": "tap_points"})
    for t in taps:
        if not 0 <= t < len(spec.layers):
            raise ConfigurationError(f"tap point {t} is not a layer index", details={"field": "tap_points"})
    if spec.aux_branches is not None and len(spec.aux_branches) != len(taps):
        raise ConfigurationError(
            f"{len(spec.aux_branches)} aux branches for {len(taps)} tap points",
            details={"field": "aux_branches"},
        )
    return shapes


def _tap_dim(spec: ModelSpec, tap_index: int, shape: Tuple[int, ...]) -> int:
    branch = spec.branch(tap_index)
    if branch.fc_dim is not None:
        return branch.fc_dim
    if len(shape) == 3 and branch.pool:
        return shape[0]
    return int(np.prod(shape))


class Model:
    """Parameters of a ModelSpec plus the forward pass"""

    def __init__(self, spec: ModelSpec, params: Dict[str, Tensor]):
        self.spec = spec
        self._shapes = validate_spec(spec)
        self.params = params
        self.tap_dims = [_tap_dim(spec, ti, self._shapes[t]) for ti, t in enumerate(spec.tap_points)]

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def frozen(self) -> "Model":
        """View sharing parameter storage, with gradients switched off"""
        view = {name: Tensor(p.data, requires_grad=False, copy=False) for name, p in self.params.items()}
        return Model(self.spec, view)

    def copy(self, requires_grad: bool = True) -> "Model":
        return Model(self.spec, {name: Tensor(p.data, requires_grad=requires_grad)
                                 for name, p in self.params.items()})

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.params.items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()[:16]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def forward(self, x) -> ModelOutput:
        if not isinstance(x, Tensor):
            x = Tensor(x, copy=False)
        expected = tuple(self.spec.input_shape)
        if x.shape[1:] != expected:
            raise DimensionError("forward", x.shape, (x.shape[0],) + expected)
        tap_slot = {layer: slot for slot, layer in enumerate(self.spec.tap_points)}
        taps: List[Tensor] = []
        h = x
        for i, layer in enumerate(self.spec.layers):
            h = self._apply(i, layer, h)
            if i in tap_slot:
                taps.append(self._branch(tap_slot[i], h))
        return ModelOutput(logits=h, taps=taps)

    __call__ = forward

    def _apply(self, i: int, layer: LayerSpec, h: Tensor) -> Tensor:
        kind = layer.kind
        if kind == LayerKind.CONV:
            return tc.conv2d(h, self.params[f"layer{i}.weight"], self.params[f"layer{i}.bias"],
                             stride=layer.stride, padding=layer.padding)
        if kind == LayerKind.FC:
            return tc.matmul(h, self.params[f"layer{i}.weight"]) + self.params[f"layer{i}.bias"]
        if kind == LayerKind.PRELU:
            return tc.prelu(h, self.params[f"layer{i}.slope"])
        if kind == LayerKind.RELU:
            return tc.relu(h)
        if kind == LayerKind.POOL:
            return tc.max_pool2d(h, layer.size)
        if kind == LayerKind.GAP:
            return tc.global_avg_pool(h)
        return tc.flatten(h)

    def _branch(self, slot: int, h: Tensor) -> Tensor:
        branch: AuxBranchSpec = self.spec.branch(slot)
        if h.ndim == 4:
            h = tc.global_avg_pool(h) if branch.pool else tc.flatten(h)
        if branch.fc_dim is not None:
            h = tc.matmul(h, self.params[f"aux{slot}.weight"]) + self.params[f"aux{slot}.bias"]
        return h


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Initialize a model: fan-in scaled normal weights, zero biases, PReLU slope 0.25"""
    shapes = validate_spec(spec)
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    in_shape: Tuple[int, ...] = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if layer.kind == LayerKind.CONV:
            fan_in = in_shape[0] * layer.kernel * layer.kernel
            w = rng.standard_normal((layer.out, in_shape[0], layer.kernel, layer.kernel)) * np.sqrt(2.0 / fan_in)
            params[f"layer{i}.weight"] = Tensor(w, requires_grad=True)
            params[f"layer{i}.bias"] = Tensor(np.zeros(layer.out), requires_grad=True)
        elif layer.kind == LayerKind.FC:
            w = rng.standard_normal((in_shape[0], layer.out)) * np.sqrt(2.0 / in_shape[0])
            params[f"layer{i}.weight"] = Tensor(w, requires_grad=True)
            params[f"layer{i}.bias"] = Tensor(np.zeros(layer.out), requires_grad=True)
        elif layer.kind == LayerKind.PRELU:
            params[f"layer{i}.slope"] = Tensor(np.full((1,), PRELU_INIT), requires_grad=True)
        in_shape = shapes[i]

    for slot, t in enumerate(spec.tap_points):
        branch = spec.branch(slot)
        if branch.fc_dim is None:
            continue
        tap_shape = shapes[t]
        d_in = tap_shape[0] if (len(tap_shape) == 3 and branch.pool) else int(np.prod(tap_shape))
        w = rng.standard_normal((d_in, branch.fc_dim)) * np.sqrt(2.0 / d_in)
        params[f"aux{slot}.weight"] = Tensor(w, requires_grad=True)
        params[f"aux{slot}.bias"] = Tensor(np.zeros(branch.fc_dim), requires_grad=True)

    model = Model(spec, params)
    logger.debug(f"Built {spec.name} with {model.parameter_count()} parameters (seed={seed})")
    return model


def forward(model: Model, x) -> ModelOutput:
    return model.forward(x)


def predict_softmax(model: Model, x, batch_size: int = 500) -> np.ndarray:
    """argmax of the logits; ties resolve to the lowest class index"""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    out = []
    for start in range(0, x.shape[0], batch_size):
        out.append(np.argmax(model.forward(x[start:start + batch_size]).logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def deepest_features(model: Model, x, batch_size: int = 500) -> np.ndarray:
    """Features at the deepest tap, outside any tape"""
    if not model.spec.tap_points:
        raise ConfigurationError("model has no tap points", details={"field": "tap_points"})
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    out = [model.forward(x[s:s + batch_size]).taps[-1].data for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(out)
