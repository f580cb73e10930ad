"""Binary archives for models, datasets and adversarial batches.

Layout:
    PSHLD1 <version> config_hash=<h> seed=<s>\\n
    u32 descriptor length, UTF-8 JSON descriptor
    u32 tensor count, then per tensor: u32 name length, UTF-8 name, encoded tensor
All integers are little-endian.
"""

import json
import logging
import os
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np

from attacks import AdvBatch
from config import TOOL_VERSION
from data_io import Dataset
from exceptions import CheckpointError, LengthError
from losses import PrototypeSet
from models import ModelSpec
from network import Model, build
from tensor_core import Tensor, tensor_from_bytes, tensor_to_bytes

logger = logging.getLogger(__name__)

MAGIC = "PSHLD1"


def _header_line(config_hash: str, seed: int) -> bytes:
    return f"{MAGIC} {TOOL_VERSION} config_hash={config_hash} seed={seed}\n".encode()


def write_archive(path: str, descriptor: Dict[str, Any], tensors: Dict[str, Any],
                  config_hash: str = "-", seed: int = 0) -> None:
    parts = [_header_line(config_hash, seed)]
    desc = json.dumps(descriptor, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(desc)) + desc)
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)) + encoded + tensor_to_bytes(value))

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def _parse_header(line: str, path: str) -> Dict[str, Any]:
    fields = line.split()
    if not fields or fields[0] != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC} archive", details={"path": path, "header": line[:40]})
    header: Dict[str, Any] = {"magic": fields[0], "version": fields[1] if len(fields) > 1 else ""}
    for token in fields[2:]:
        key, _, value = token.partition("=")
        header[key] = value
    if "seed" in header:
        header["seed"] = int(header["seed"])
    return header


def read_archive(path: str) -> Tuple[Dict[str, Any], Dict[str, Any], Dict[str, Tensor]]:
    """(header fields, descriptor, named tensors)"""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}", details={"path": path})
    with open(path, "rb") as f:
        buf = f.read()
    newline = buf.find(b"\n", 0, 256)
    if newline < 0:
        raise CheckpointError(f"{path}: missing {MAGIC} header", details={"path": path})
    header = _parse_header(buf[:newline].decode("utf-8", errors="replace"), path)

    offset = newline + 1
    if len(buf) - offset < 4:
        raise LengthError(path, offset + 4, len(buf))
    (desc_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) - offset < desc_len + 4:
        raise LengthError(path, offset + desc_len + 4, len(buf))
    descriptor = json.loads(buf[offset:offset + desc_len].decode())
    offset += desc_len
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4

    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        if len(buf) - offset < 4:
            raise LengthError(path, offset + 4, len(buf))
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) - offset < name_len:
            raise LengthError(path, offset + name_len, len(buf))
        name = buf[offset:offset + name_len].decode()
        offset += name_len
        tensors[name], offset = tensor_from_bytes(buf, offset, source=path)
    return header, descriptor, tensors


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: Model, protos: PrototypeSet, config_hash: str = "-", seed: int = 0,
                    metadata: Optional[Dict[str, Any]] = None) -> None:
    descriptor = {
        "kind": "model",
        "spec": model.spec.model_dump(mode="json"),
        "tap_dims": protos.dims,
        "metadata": metadata or {},
    }
    tensors: Dict[str, Any] = dict(model.named_parameters())
    for tap, centroids in enumerate(protos.centroids):
        tensors[f"proto{tap}"] = centroids
    write_archive(path, descriptor, tensors, config_hash, seed)
    logger.info(f"Saved checkpoint {path} ({model.spec.name}, checksum {model.checksum()})")


def load_checkpoint(path: str, expected_spec: Optional[ModelSpec] = None) -> Tuple[Model, PrototypeSet, Dict[str, Any]]:
    header, descriptor, tensors = read_archive(path)
    if descriptor.get("kind") != "model":
        raise CheckpointError(f"{path} holds a {descriptor.get('kind')} archive, not a model", details={"path": path})
    spec = ModelSpec.model_validate(descriptor["spec"])
    if expected_spec is not None and spec.model_dump() != expected_spec.model_dump():
        raise CheckpointError(
            f"{path}: checkpoint model '{spec.name}' does not match the configured model '{expected_spec.name}'",
            details={"path": path, "checkpoint_spec": spec.name, "expected_spec": expected_spec.name},
        )

    params: Dict[str, Tensor] = {}
    proto_list = []
    for name, t in tensors.items():
        if name.startswith("proto"):
            proto_list.append((int(name[len("proto"):]), t))
        else:
            params[name] = Tensor(t.data, requires_grad=True, copy=False)

    model = Model(spec, params)
    reference = _expected_shapes(spec)
    for name, shape in reference.items():
        if name not in params or params[name].shape != shape:
            found = params[name].shape if name in params else None
            raise CheckpointError(f"{path}: parameter {name} expected shape {shape}, found {found}",
                                  details={"path": path, "parameter": name})
    extra = set(params) - set(reference)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}", details={"path": path})

    protos = PrototypeSet([Tensor(t.data, requires_grad=True, copy=False) for _, t in sorted(proto_list)])
    descriptor["header"] = header
    return model, protos, descriptor


def _expected_shapes(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    return {name: p.shape for name, p in build(spec, seed=0).named_parameters()}


# ---------------------------------------------------------------------------
# Datasets and adversarial batches
# ---------------------------------------------------------------------------

def save_dataset(path: str, ds: Dataset, config_hash: str = "-", seed: int = 0) -> None:
    descriptor = {"kind": "dataset", "split": ds.split, "num_classes": ds.num_classes,
                  "provenance": ds.provenance}
    write_archive(path, descriptor, {"images": ds.images, "labels": ds.labels.astype(np.float64)},
                  config_hash, seed)


def load_dataset(path: str) -> Dataset:
    _, descriptor, tensors = read_archive(path)
    if descriptor.get("kind") != "dataset":
        raise CheckpointError(f"{path} is not a dataset archive", details={"path": path})
    return Dataset(
        images=tensors["images"].data,
        labels=tensors["labels"].data.astype(np.int64),
        num_classes=int(descriptor["num_classes"]),
        split=descriptor.get("split", "train"),
        provenance=descriptor.get("provenance", {}),
    )


def save_adv_batch(path: str, batch: AdvBatch, attack_label: str, config_hash: str = "-", seed: int = 0) -> None:
    descriptor = {"kind": "adv_batch", "attack": attack_label}
    tensors = {
        "x": batch.x,
        "x_adv": batch.x_adv,
        "labels": batch.labels.astype(np.float64),
        "clean_pred": batch.clean_pred.astype(np.float64),
        "adv_pred": batch.adv_pred.astype(np.float64),
        "indices": batch.indices.astype(np.float64),
    }
    write_archive(path, descriptor, tensors, config_hash, seed)


def load_adv_batch(path: str) -> AdvBatch:
    _, descriptor, tensors = read_archive(path)
    if descriptor.get("kind") != "adv_batch":
        raise CheckpointError(f"{path} is not an adversarial batch archive", details={"path": path})
    labels = tensors["labels"].data.astype(np.int64)
    adv_pred = tensors["adv_pred"].data.astype(np.int64)
    return AdvBatch(
        x=tensors["x"].data,
        x_adv=tensors["x_adv"].data,
        labels=labels,
        clean_pred=tensors["clean_pred"].data.astype(np.int64),
        adv_pred=adv_pred,
        success=adv_pred != labels,
        indices=tensors["indices"].data.astype(np.int64),
    )
