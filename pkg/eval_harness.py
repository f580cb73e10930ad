"""Robustness evaluation: attack tables, transfer matrices, epsilon sweeps,
margin probes, tap ablations and the gradient-masking checklist.

Each report row gets its own random stream derived from the base seed and
the attack's config hash, so rows are reproducible regardless of the order
or the worker they run on.
"""

import hashlib
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from attacks import AdvBatch, Predictor, attack_dispatch
from cache import ReportCache
from config import get_settings
from data_io import Dataset
from exceptions import ConfigurationError
from losses import PrototypeSet, predict_prototype
from models import (
    AblationRow, AttackConfig, AttackKind, CheckResult, ClassMargin, ITERATIVE_KINDS, LossMode, MarginProbe,
    ModelSpec, ReportRow, RobustnessReport, SweepPoint, SweepResult, TrainConfig, TransferMatrix,
)
from network import Model, deepest_features, predict_softmax
from training import train_variant

logger = logging.getLogger(__name__)

MONOTONE_TOLERANCE = 0.02
SWEEP_FLOOR = 0.05


@dataclass
class NamedModel:
    name: str
    model: Model
    protos: Optional[PrototypeSet] = None


def row_seed(base_seed: int, cfg: AttackConfig) -> int:
    digest = hashlib.sha256(f"{base_seed}:{cfg.config_hash()}".encode()).hexdigest()
    return int(digest[:8], 16)


def dataset_checksum(data: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(data.images).tobytes())
    digest.update(np.ascontiguousarray(data.labels).tobytes())
    return digest.hexdigest()[:16]


def make_predictor(model: Model, protos: Optional[PrototypeSet] = None, mode: str = "softmax") -> Predictor:
    """Softmax argmax, or nearest centroid at the deepest tap"""
    frozen = model.frozen()
    if mode == "softmax":
        return lambda x: predict_softmax(frozen, x)
    if mode == "prototype":
        if protos is None or len(protos) == 0:
            raise ConfigurationError("prototype prediction needs prototypes", details={"field": "eval.predict"})
        return lambda x: predict_prototype(deepest_features(frozen, x), protos)
    raise ConfigurationError(f"unknown prediction mode '{mode}'", details={"field": "eval.predict"})


def clean_accuracy(model: Model, data: Dataset, protos: Optional[PrototypeSet] = None,
                   predict: str = "softmax", batch_size: int = 100) -> float:
    predictor = make_predictor(model, protos, predict)
    correct = 0
    for start in range(0, len(data), batch_size):
        x, y = data.images[start:start + batch_size], data.labels[start:start + batch_size]
        correct += int((predictor(x) == y).sum())
    return correct / len(data)


def _count_correct(batches: Sequence[AdvBatch]) -> Tuple[int, int]:
    correct = sum(int((b.adv_pred == b.labels).sum()) for b in batches)
    return correct, sum(len(b) for b in batches)


def _run_rows(jobs: List[Callable[[], ReportRow]], workers: Optional[int]) -> List[ReportRow]:
    workers = workers if workers is not None else get_settings().eval_workers
    if workers <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


def evaluate_robustness(model: Model, protos: Optional[PrototypeSet], attacks: Sequence[AttackConfig],
                        data: Dataset, setting: str = "white", source_model: Optional[Model] = None,
                        variant: str = "pcl", seed: int = 0, batch_size: int = 100, predict: str = "softmax",
                        workers: Optional[int] = None, cache: Optional[ReportCache] = None) -> RobustnessReport:
    """One row per attack.

    white: attacks use the evaluated model's gradients with each config's loss.
    adaptive: same, but the attacker ascends the full CE + prototype objective.
    black: adversarial inputs are crafted on `source_model` and scored on `model`.
    """
    if setting not in ("white", "black", "adaptive"):
        raise ConfigurationError(f"unknown setting '{setting}'", details={"field": "eval.settings"})
    if setting == "black" and source_model is None:
        raise ConfigurationError("black-box evaluation needs a source model",
                                 details={"field": "eval.source_checkpoint"})
    if setting == "adaptive" and protos is None:
        raise ConfigurationError("adaptive evaluation needs prototypes", details={"setting": setting})
    if len(data) == 0:
        raise ConfigurationError("evaluation set is empty", details={"field": "data.eval_size"})

    predictor = make_predictor(model, protos, predict)
    attacker = source_model if setting == "black" else model
    attacker_protos = None if setting == "black" else protos
    target_key = f"{model.checksum()}:{protos.checksum() if protos is not None else '-'}"
    source_key = source_model.checksum() if setting == "black" else None
    data_key = dataset_checksum(data) if cache is not None else ""

    def job_for(cfg: AttackConfig) -> Callable[[], ReportRow]:
        if setting == "adaptive":
            cfg = cfg.model_copy(update={"loss_mode": LossMode.CE_PC})
        elif setting == "black":
            cfg = cfg.model_copy(update={"loss_mode": LossMode.CE})

        def job() -> ReportRow:
            rs = row_seed(seed, cfg)
            key = None
            if cache is not None:
                key = cache.row_key(target_key, source_key, cfg.config_hash(), setting, rs, predict, data_key,
                                    batch_size)
                hit = cache.get_row(key)
                if hit is not None:
                    return ReportRow.model_validate({**hit, "variant": variant})
            batches = list(attack_dispatch(attacker, data, cfg, seed=rs, batch_size=batch_size,
                                           protos=attacker_protos, predictor=predictor))
            correct, n = _count_correct(batches)
            row = ReportRow(variant=variant, attack=cfg.kind, setting=setting, parameter=cfg.parameter,
                            value=cfg.value, accuracy=correct / n, correct=correct, n=n)
            logger.info(f"{variant} {setting} {cfg.label()}: accuracy {row.accuracy:.4f} ({correct}/{n})")
            if cache is not None:
                cache.set_row(key, row.model_dump(mode="json"))
            return row

        return job

    rows = _run_rows([job_for(cfg) for cfg in attacks], workers)
    return RobustnessReport(rows=rows)


def transfer_matrix(models: Sequence[NamedModel], cfg: AttackConfig, data: Dataset, seed: int = 0,
                    batch_size: int = 100, predict: str = "softmax") -> TransferMatrix:
    """Entry [s][t]: accuracy of model t on examples crafted against model s"""
    if len(models) < 2:
        raise ConfigurationError(f"transfer matrix needs at least 2 models, got {len(models)}",
                                 details={"field": "eval.models"})
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate model names {names}", details={"field": "eval.models"})

    predictors = [make_predictor(m.model, m.protos, predict) for m in models]
    rs = row_seed(seed, cfg)
    accuracy: List[List[float]] = []
    for s, source in enumerate(models):
        correct = [0] * len(models)
        n = 0
        for batch in attack_dispatch(source.model, data, cfg, seed=rs, batch_size=batch_size,
                                     protos=source.protos, predictor=predictors[s]):
            for t, predictor in enumerate(predictors):
                correct[t] += int((predictor(batch.x_adv) == batch.labels).sum())
            n += len(batch)
        accuracy.append([c / n for c in correct])
        logger.info(f"transfer from {source.name}: " + ", ".join(
            f"{name}={acc:.4f}" for name, acc in zip(names, accuracy[-1])))
    return TransferMatrix(names=names, attack=cfg.label(), accuracy=accuracy)


def sweep_attack(kind: AttackKind, epsilon: float, steps: int = 10) -> AttackConfig:
    """Attack at a given budget with the evaluation step rule (steps of epsilon/10)"""
    if kind == AttackKind.FGSM:
        return AttackConfig(kind=kind, epsilon=epsilon, steps=1)
    if kind == AttackKind.PGD:
        return AttackConfig(kind=kind, epsilon=epsilon, steps=steps, step_size=epsilon / steps)
    return AttackConfig(kind=kind, epsilon=epsilon, steps=steps)


def epsilon_sweep(model: Model, protos: Optional[PrototypeSet], kinds: Sequence[AttackKind],
                  grid: Sequence[float], data: Dataset, seed: int = 0, batch_size: int = 100,
                  predict: str = "softmax", workers: Optional[int] = None) -> SweepResult:
    if not grid or grid[0] != 0:
        raise ConfigurationError("sweep grid must start at 0", details={"field": "eval.sweep_grid"})
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigurationError("sweep grid must be strictly ascending", details={"field": "eval.sweep_grid"})
    if AttackKind.CW in kinds:
        raise ConfigurationError("C&W has no epsilon budget and cannot be swept", details={"field": "eval.sweep_kinds"})

    configs = [sweep_attack(kind, eps) for kind in kinds for eps in grid]
    report = evaluate_robustness(model, protos, configs, data, "white", seed=seed, batch_size=batch_size,
                                 predict=predict, workers=workers)
    points = [SweepPoint(attack=r.attack, epsilon=r.value, accuracy=r.accuracy, n=r.n) for r in report.rows]
    return SweepResult(points=points)


def margin_probe(model: Model, data: Dataset, epsilon: float = 0.1, n_draws: int = 200,
                 seed: int = 0) -> MarginProbe:
    """Sampled estimate of the feature-space polytope radius and inter-class margin at the deepest tap.

    lambda_c is the largest displacement ||f(x + delta) - f(x)|| over n_draws uniform
    deltas in the epsilon box, maximized over class-c samples. m_c is the smallest
    feature distance between a class-c sample and any sample of another class. The
    radius is a lower bound on the true polytope radius.
    """
    if n_draws < 100:
        raise ConfigurationError(f"margin probe needs at least 100 draws, got {n_draws}",
                                 details={"field": "eval.probe_draws"})
    labels = np.asarray(data.labels)
    classes = sorted(int(c) for c in np.unique(labels))
    if len(classes) < 2:
        raise ConfigurationError("margin probe needs samples from at least 2 classes",
                                 details={"classes": classes})

    frozen = model.frozen()
    x = data.images
    base = deepest_features(frozen, x)
    rng = np.random.default_rng([seed, 3])
    displacement = np.zeros(len(labels))
    for _ in range(n_draws):
        moved = np.clip(x + rng.uniform(-epsilon, epsilon, size=x.shape), 0.0, 1.0)
        feats = deepest_features(frozen, moved)
        displacement = np.maximum(displacement, np.sqrt(np.square(feats - base).sum(axis=1)))

    pairwise = np.sqrt(np.square(base[:, None, :] - base[None, :, :]).sum(axis=-1))
    different = labels[:, None] != labels[None, :]

    per_class = []
    for c in classes:
        mine = labels == c
        radius = float(displacement[mine].max())
        margin = float(pairwise[mine][:, ~mine].min())
        per_class.append(ClassMargin(label=c, radius=radius, margin=margin, overlap=margin <= 2 * radius))

    radius = max(c.radius for c in per_class)
    margin = float(pairwise[different].min())
    probe = MarginProbe(epsilon=epsilon, n_draws=n_draws, classes=per_class, radius=radius, margin=margin,
                        overlap=margin <= 2 * radius)
    logger.info(f"margin probe eps={epsilon:g}: lambda={radius:.4f} m={margin:.4f} ratio={probe.ratio:.4f}")
    return probe


def tap_label(taps: Sequence[int]) -> str:
    return "None" if not taps else "+".join(f"L{t}" for t in taps)


def all_tap_subsets(spec: ModelSpec) -> List[List[int]]:
    taps = list(spec.tap_points)
    return [list(c) for r in range(len(taps) + 1) for c in itertools.combinations(taps, r)]


def layer_ablation(spec: ModelSpec, subsets: Optional[Sequence[Sequence[int]]], train_data: Dataset,
                   eval_data: Dataset, train_cfg: TrainConfig, epsilon: float = 0.3, seed: int = 0,
                   batch_size: int = 100) -> List[AblationRow]:
    """Train one model per tap subset with a shared seed and schedule; the empty subset is the CE-only row"""
    subsets = all_tap_subsets(spec) if subsets is None else [list(s) for s in subsets]
    available = set(spec.tap_points)
    for s in subsets:
        if not set(s) <= available:
            raise ConfigurationError(f"taps {s} are not among the model's tap points {spec.tap_points}",
                                     details={"field": "eval.ablation_subsets"})

    attacks = [sweep_attack(AttackKind.FGSM, epsilon), sweep_attack(AttackKind.PGD, epsilon)]
    rows = []
    for taps in subsets:
        sub_spec = spec.with_taps(sorted(taps))
        variant = "pcl" if taps else "ce-only"
        model, protos, _ = train_variant(sub_spec, train_data, train_cfg, variant=variant, seed=seed)
        clean = clean_accuracy(model, eval_data, batch_size=batch_size)
        report = evaluate_robustness(model, protos, attacks, eval_data, "white", variant=tap_label(taps),
                                     seed=seed, batch_size=batch_size)
        rows.append(AblationRow(label=tap_label(taps), taps=sorted(taps), clean=clean,
                                fgsm=report.rows[0].accuracy, pgd=report.rows[1].accuracy))
    return rows


def masking_checklist(white: RobustnessReport, black: RobustnessReport, sweep: SweepResult,
                      tolerance: float = MONOTONE_TOLERANCE, floor: float = SWEEP_FLOOR) -> List[CheckResult]:
    """Pass/fail indicators of gradient masking"""
    checks: List[CheckResult] = []

    fgsm = {p.epsilon: p.accuracy for p in sweep.curve(AttackKind.FGSM)}
    violations = [f"{p.attack.value}@{p.epsilon:g}" for p in sweep.points
                  if p.attack in ITERATIVE_KINDS and p.epsilon > 0 and p.epsilon in fgsm
                  and p.accuracy > fgsm[p.epsilon] + tolerance]
    compared = bool(fgsm) and any(p.attack in ITERATIVE_KINDS for p in sweep.points)
    checks.append(CheckResult(
        name="iterative attacks at least as strong as FGSM",
        passed=compared and not violations,
        detail="no FGSM/iterative curves to compare" if not compared else
        ("all eps > 0 within tolerance" if not violations else "violations: " + ", ".join(violations)),
    ))

    pairs, worse = 0, []
    for w in white.rows:
        for b in black.rows:
            if b.variant == w.variant and b.attack == w.attack and b.value == w.value:
                pairs += 1
                if b.accuracy < w.accuracy:
                    worse.append(f"{w.variant} {w.attack.value} {w.parameter}={w.value:g}")
    checks.append(CheckResult(
        name="black-box accuracy >= white-box accuracy",
        passed=pairs > 0 and not worse,
        detail="no matching white/black rows" if pairs == 0 else
        (f"{pairs} pairs hold" if not worse else "violations: " + ", ".join(worse)),
    ))

    bumps, high = [], []
    for kind in sweep.kinds():
        curve = sweep.curve(kind)
        for prev, cur in zip(curve, curve[1:]):
            if cur.accuracy > prev.accuracy + tolerance:
                bumps.append(f"{kind.value}@{cur.epsilon:g}")
        if curve and curve[-1].accuracy >= floor:
            high.append(f"{kind.value}={100 * curve[-1].accuracy:.1f}% at eps={curve[-1].epsilon:g}")
    checks.append(CheckResult(
        name="sweep non-increasing",
        passed=bool(sweep.points) and not bumps,
        detail="monotone within tolerance" if not bumps else "increases: " + ", ".join(bumps),
    ))
    checks.append(CheckResult(
        name=f"sweep below {100 * floor:.0f}% at largest eps",
        passed=bool(sweep.points) and not high,
        detail="all kinds collapse" if not high else "still high: " + ", ".join(high),
    ))
    for check in checks:
        logger.info(check.line())
    return checks
