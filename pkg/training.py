"""Two-phase training: cross-entropy warm-up, then the deeply supervised joint objective.

The joint phase updates network parameters and every tap's centroids in one
plain SGD step per batch. With adversarial augmentation enabled, each joint
batch is extended with attacked copies generated online against the current
model.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from attacks import make_loss_fn, run_attack
from data_io import Dataset, batches
from exceptions import ConfigurationError, InternalError, TrainingError
from losses import LossBreakdown, PrototypeSet, ce_only, joint_loss
from models import AdvMode, AttackConfig, AttackKind, EpochRecord, LossMode, ModelSpec, TrainConfig
from network import Model, build, source_spec
from tensor_core import Tape, Tensor

logger = logging.getLogger(__name__)

CheckpointHook = Callable[[int, Model, PrototypeSet], None]

# Table rows of the consolidated report: (variant, adversarial augmentation)
REPRO_VARIANTS: Dict[str, Tuple[str, AdvMode]] = {
    "Softmax": ("ce-only", AdvMode.NONE),
    "Ours": ("pcl", AdvMode.NONE),
    "Ours+AdvTrain_FGSM": ("pcl", AdvMode.FGSM),
    "Ours+AdvTrain_PGD": ("pcl", AdvMode.PGD),
}


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def joint(self) -> List[EpochRecord]:
        return [r for r in self.records if r.phase == "joint"]

    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], lr: float) -> None:
    """p <- p - lr * g, in place; a missing gradient counts as zero"""
    if len(params) != len(grads):
        raise InternalError(f"{len(grads)} gradients for {len(params)} parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise InternalError(f"gradient shape {g.shape} does not match parameter {i} shape {p.shape}",
                                details={"index": i})
        p.data -= lr * g


def variant_config(cfg: TrainConfig, variant: str, adv_mode: Optional[AdvMode] = None) -> TrainConfig:
    """ce-only trains with the warm-up phase only (warmup_epochs = epochs)"""
    update = {}
    if variant == "ce-only":
        update["warmup_epochs"] = cfg.epochs
        update["adv_mode"] = AdvMode.NONE
    elif adv_mode is not None:
        update["adv_mode"] = adv_mode
    return cfg.model_copy(update=update) if update else cfg


def _augment(model: Model, protos: PrototypeSet, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
             rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Batch extended with attacked copies of its first round(adv_fraction * n) samples"""
    count = int(round(cfg.adv_fraction * x.shape[0]))
    if count == 0:
        return x, y
    lo, hi = cfg.adv_epsilon
    epsilon = float(rng.uniform(lo, hi))
    if cfg.adv_mode == AdvMode.FGSM:
        attack = AttackConfig(kind=AttackKind.FGSM, epsilon=epsilon, steps=1, loss_mode=LossMode.CE_PC)
    else:
        attack = AttackConfig(kind=AttackKind.PGD, epsilon=epsilon, steps=cfg.adv_steps,
                              step_size=epsilon / cfg.adv_steps, loss_mode=LossMode.CE_PC)
    loss_fn = make_loss_fn(LossMode.CE_PC, protos)
    x_adv = run_attack(model.frozen(), x[:count], y[:count], attack, loss_fn=loss_fn, rng=rng)
    return np.concatenate([x, x_adv]), np.concatenate([y, y[:count]])


def train(model: Model, protos: PrototypeSet, data: Dataset, cfg: TrainConfig,
          on_checkpoint: Optional[CheckpointHook] = None) -> Tuple[Model, PrototypeSet, TrainLog]:
    """Run the full schedule in place on `model` and `protos`; returns them with the log"""
    log = TrainLog()
    adv_rng = np.random.default_rng([cfg.seed, 2])
    n_taps = len(model.spec.tap_points)
    if len(protos) != n_taps:
        raise ConfigurationError(f"{len(protos)} prototype sets for {n_taps} taps",
                                 details={"field": "tap_points", "prototype_sets": len(protos), "taps": n_taps})

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = cfg.learning_rate(epoch)
        joint = epoch >= cfg.warmup_epochs
        augmenting = joint and cfg.adv_mode != AdvMode.NONE
        trainables = model.parameters() + (protos.parameters() if joint else [])

        sums = {"total": 0.0, "ce": 0.0}
        pc_sums = [0.0] * n_taps
        correct = seen = n_batches = adv_batches = 0

        for b, (x, y, _) in enumerate(batches(data, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch)):
            clean_n = x.shape[0]
            if augmenting:
                x, y = _augment(model, protos, x, y, cfg, adv_rng)
                adv_batches += int(x.shape[0] > clean_n)

            with Tape() as tape:
                out = model.forward(x)
                breakdown: LossBreakdown = (joint_loss(out, y, protos, cfg.loss_weights) if joint
                                            else ce_only(out.logits, y))
                if not math.isfinite(breakdown.total):
                    raise TrainingError(epoch, b, message=f"Non-finite loss {breakdown.total}")
                tape.backward(breakdown.loss)

            sgd_step(trainables, [p.grad for p in trainables], lr)
            for p in trainables:
                p.zero_grad()

            sums["total"] += breakdown.total
            sums["ce"] += breakdown.ce
            for i, v in enumerate(breakdown.pc_per_tap):
                pc_sums[i] += v
            correct += int((np.argmax(out.logits.data[:clean_n], axis=1) == y[:clean_n]).sum())
            seen += clean_n
            n_batches += 1

        means, mins = protos.pairwise_stats()
        record = EpochRecord(
            epoch=epoch,
            phase="joint" if joint else "warmup",
            lr=lr,
            total=sums["total"] / max(n_batches, 1),
            ce=sums["ce"] / max(n_batches, 1),
            pc_per_tap=[v / max(n_batches, 1) for v in pc_sums] if joint else [],
            accuracy=correct / max(seen, 1),
            proto_mean_distance=means,
            proto_min_distance=mins,
            effective_batches=n_batches + adv_batches,
            wall_time=time.perf_counter() - started,
        )
        log.records.append(record)
        pc_text = ", ".join(f"{v:.4f}" for v in record.pc_per_tap) or "-"
        logger.info(
            f"epoch {epoch + 1}/{cfg.epochs} [{record.phase}] lr={lr:g} loss={record.total:.4f} "
            f"ce={record.ce:.4f} pc=[{pc_text}] acc={record.accuracy:.4f} ({record.wall_time:.1f}s)"
        )

        if on_checkpoint and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(epoch + 1, model, protos)

    return model, protos, log


def train_variant(spec: ModelSpec, data: Dataset, cfg: TrainConfig, variant: str = "pcl",
                  adv_mode: Optional[AdvMode] = None, seed: Optional[int] = None,
                  on_checkpoint: Optional[CheckpointHook] = None) -> Tuple[Model, PrototypeSet, TrainLog]:
    """Build a fresh model and centroids from `seed` and train one variant"""
    seed = cfg.seed if seed is None else seed
    cfg = variant_config(cfg, variant, adv_mode).model_copy(update={"seed": seed})
    model = build(spec, seed)
    protos = PrototypeSet.initialize(spec.num_classes, model.tap_dims, seed)
    logger.info(f"Training {spec.name} variant={variant} adv={cfg.adv_mode.value} seed={seed} "
                f"({model.parameter_count()} parameters, {len(data)} samples)")
    return train(model, protos, data, cfg, on_checkpoint=on_checkpoint)


def make_black_box_source(data: Dataset, seed: int, cfg: Optional[TrainConfig] = None) -> Model:
    """Independent CE-only model of a different architecture, used only to craft transferred attacks"""
    cfg = cfg or TrainConfig(epochs=5, warmup_epochs=5, batch_size=64, lr=0.05, lr_decay_epochs=[])
    cfg = cfg.model_copy(update={"warmup_epochs": cfg.epochs, "adv_mode": AdvMode.NONE, "seed": seed})
    spec = source_spec(data.num_classes, data.image_shape)
    model = build(spec, seed)
    logger.info(f"Training black-box source {spec.name} ({model.parameter_count()} parameters)")
    model, _, _ = train(model, PrototypeSet([]), data, cfg)
    return model
