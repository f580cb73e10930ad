"""Evaluation attacks: FGSM, BIM, MIM, C&W and PGD.

Every attack works on a frozen view of the model, so parameters are never
touched and each call owns its own tape. The infinity-norm attacks clip to
the epsilon ball around the ORIGINAL input and to the pixel range after
every step.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional

import numpy as np

import tensor_core as tc
from exceptions import ConfigurationError
from losses import PrototypeSet, cross_entropy, joint_loss
from models import AttackConfig, AttackKind, LossMode
from network import Model, ModelOutput, predict_softmax
from tensor_core import Tape, Tensor

logger = logging.getLogger(__name__)

LossFn = Callable[[ModelOutput, np.ndarray], Tensor]
Predictor = Callable[[np.ndarray], np.ndarray]

CW_BOUNDARY_NUDGE = 1e-6
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdvBatch:
    x: np.ndarray
    x_adv: np.ndarray
    labels: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    success: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def linf(self) -> np.ndarray:
        """Per-sample infinity-norm distance between x_adv and x"""
        if len(self) == 0:
            return np.zeros(0)
        return np.abs(self.x_adv - self.x).reshape(len(self), -1).max(axis=1)

    def success_rate(self) -> float:
        return float(self.success.mean()) if len(self) else 0.0

    @classmethod
    def concat(cls, batches: List["AdvBatch"]) -> "AdvBatch":
        if not batches:
            raise ConfigurationError("no adversarial batches to concatenate")
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in
                     ("x", "x_adv", "labels", "clean_pred", "adv_pred", "success", "indices")))


def make_loss_fn(mode: LossMode, protos: Optional[PrototypeSet] = None) -> LossFn:
    """Loss the attacker ascends: CE on the logits, or the full CE + prototype objective"""
    if mode == LossMode.CE:
        return lambda out, y: cross_entropy(out.logits, y)
    if protos is None:
        raise ConfigurationError("loss_mode CE+PC needs prototypes", details={"field": "loss_mode"})
    frozen = protos.frozen()
    return lambda out, y: joint_loss(out, y, frozen).loss


def _frozen(model: Model) -> Model:
    if any(p.requires_grad for p in model.parameters()):
        return model.frozen()
    return model


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray, loss_fn: LossFn) -> np.ndarray:
    """d loss / d x on a fresh tape"""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = loss_fn(model.forward(xt), y)
        tape.backward(loss)
    return xt.grad


def _per_sample_loss(model: Model, x: np.ndarray, y: np.ndarray, loss_fn: LossFn) -> np.ndarray:
    return np.array([float(loss_fn(model.forward(x[i:i + 1]), y[i:i + 1]).data) for i in range(x.shape[0])])


def _project(x_adv: np.ndarray, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    x_adv = np.clip(x_adv, x - cfg.epsilon, x + cfg.epsilon)
    return np.clip(x_adv, cfg.clip_min, cfg.clip_max)


def _resolve(model: Model, cfg: AttackConfig, protos: Optional[PrototypeSet], loss_fn: Optional[LossFn]):
    return _frozen(model), (loss_fn or make_loss_fn(cfg.loss_mode, protos))


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
         protos: Optional[PrototypeSet] = None, loss_fn: Optional[LossFn] = None,
         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    model, loss_fn = _resolve(model, cfg, protos, loss_fn)
    grad = input_gradient(model, x, y, loss_fn)
    return np.clip(x + cfg.epsilon * np.sign(grad), cfg.clip_min, cfg.clip_max)


def _sign_iterations(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, loss_fn: LossFn,
                     momentum: Optional[float]) -> np.ndarray:
    step = cfg.epsilon / cfg.steps
    x_adv = x.copy()
    velocity = np.zeros_like(x)
    reduce_axes = tuple(range(1, x.ndim))
    for _ in range(cfg.steps):
        grad = input_gradient(model, x_adv, y, loss_fn)
        if momentum is None:
            direction = np.sign(grad)
        else:
            l1 = np.abs(grad).sum(axis=reduce_axes, keepdims=True)
            normalized = np.where(l1 > 0, grad / np.where(l1 > 0, l1, 1.0), 0.0)
            velocity = momentum * velocity + normalized
            direction = np.sign(velocity)
        x_adv = _project(x_adv + step * direction, x, cfg)
    return x_adv


def bim(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        protos: Optional[PrototypeSet] = None, loss_fn: Optional[LossFn] = None,
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    model, loss_fn = _resolve(model, cfg, protos, loss_fn)
    return _sign_iterations(model, x, y, cfg, loss_fn, momentum=None)


def mim(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        protos: Optional[PrototypeSet] = None, loss_fn: Optional[LossFn] = None,
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    model, loss_fn = _resolve(model, cfg, protos, loss_fn)
    return _sign_iterations(model, x, y, cfg, loss_fn, momentum=cfg.decay)


def pgd(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        protos: Optional[PrototypeSet] = None, loss_fn: Optional[LossFn] = None,
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Uniform random start in the epsilon ball, then signed steps of size gamma with projection.

    With restarts > 1 each sample keeps the restart that reached the highest loss.
    """
    model, loss_fn = _resolve(model, cfg, protos, loss_fn)
    rng = rng if rng is not None else np.random.default_rng(0)
    step = cfg.resolved_step_size()
    best: Optional[np.ndarray] = None
    best_loss: Optional[np.ndarray] = None
    for restart in range(cfg.restarts):
        x_adv = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), cfg.clip_min, cfg.clip_max)
        for _ in range(cfg.steps):
            grad = input_gradient(model, x_adv, y, loss_fn)
            x_adv = _project(x_adv + step * np.sign(grad), x, cfg)
        if cfg.restarts == 1:
            return x_adv
        losses = _per_sample_loss(model, x_adv, y, loss_fn)
        if best is None:
            best, best_loss = x_adv, losses
        else:
            better = losses > best_loss
            best = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)), x_adv, best)
            best_loss = np.where(better, losses, best_loss)
        logger.debug(f"PGD restart {restart + 1}/{cfg.restarts}: mean loss {float(losses.mean()):.4f}")
    return best


def cw(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
       protos: Optional[PrototypeSet] = None, loss_fn: Optional[LossFn] = None,
       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Untargeted C&W with a tanh change of variables and a single fixed constant c.

    Minimizes ||x' - x||^2 + c * max(Z_y - max_{j != y} Z_j, -kappa) with Adam on zeta,
    where x' = clip_min + span * (tanh(zeta) + 1) / 2. Returns, per sample, the
    closest successful candidate seen, or the final iterate when none succeeded.
    """
    model = _frozen(model)
    lo, span = cfg.clip_min, cfg.clip_max - cfg.clip_min
    n, k = x.shape[0], model.spec.num_classes
    own = tc.one_hot(y, k)
    flat = (n, -1)

    unit = np.clip((x - lo) / span, CW_BOUNDARY_NUDGE, 1.0 - CW_BOUNDARY_NUDGE)
    zeta = np.arctanh(2.0 * unit - 1.0)
    m = np.zeros_like(zeta)
    v = np.zeros_like(zeta)

    best = x.copy()
    best_l2 = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)
    final = x.copy()

    for it in range(cfg.iters + 1):
        z = Tensor(zeta, requires_grad=True)
        with Tape() as tape:
            cand = (tc.tanh(z) + 1.0) * (0.5 * span) + lo
            logits = model.forward(cand).logits
            real = tc.sum(logits * own, axis=1)
            runner_up = np.argmax(np.where(own > 0, -np.inf, logits.data), axis=1)
            other = tc.sum(logits * tc.one_hot(runner_up, k), axis=1)
            gap = real - other
            active = (gap.data > -cfg.confidence).astype(np.float64)
            f = gap * active + (-cfg.confidence) * (1.0 - active)
            diff = tc.reshape(cand - x, flat)
            l2 = tc.sum(diff * diff, axis=1)

            success = (np.argmax(logits.data, axis=1) != y) & (gap.data <= -cfg.confidence)
            improved = success & (l2.data < best_l2)
            best[improved] = cand.data[improved]
            best_l2 = np.where(improved, l2.data, best_l2)
            found |= success
            final = cand.data
            if it == cfg.iters:
                break

            objective = tc.sum(l2 + f * cfg.c)
            tape.backward(objective)

        g = z.grad
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** (it + 1))
        v_hat = v / (1 - ADAM_BETA2 ** (it + 1))
        zeta = zeta - cfg.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    expand = found.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(expand, best, final)


_ATTACKS = {
    AttackKind.FGSM: fgsm,
    AttackKind.BIM: bim,
    AttackKind.MIM: mim,
    AttackKind.CW: cw,
    AttackKind.PGD: pgd,
}


def run_attack(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               protos: Optional[PrototypeSet] = None, loss_fn: Optional[LossFn] = None,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    attack = _ATTACKS.get(cfg.kind)
    if attack is None:
        raise ConfigurationError(f"unknown attack kind '{cfg.kind}'", details={"field": "kind"})
    return attack(model, x, y, cfg, protos=protos, loss_fn=loss_fn, rng=rng)


def attack_dispatch(model: Model, data, cfg: AttackConfig, seed: int = 0, batch_size: int = 100,
                    protos: Optional[PrototypeSet] = None, loss_fn: Optional[LossFn] = None,
                    predictor: Optional[Predictor] = None) -> Iterator[AdvBatch]:
    """Attack `data` batch by batch; predictions (and success) come from `predictor`.

    `predictor` defaults to softmax prediction of the attacked model; pass the
    target's predictor to evaluate transferred examples. Batch b uses the
    random stream seeded by (seed, b).
    """
    if cfg.kind not in _ATTACKS:
        raise ConfigurationError(f"unknown attack kind '{cfg.kind}'", details={"field": "kind"})
    frozen = _frozen(model)
    predictor = predictor or (lambda inputs: predict_softmax(frozen, inputs))
    images, labels = data.images, data.labels
    for b, start in enumerate(range(0, labels.shape[0], batch_size)):
        idx = np.arange(start, min(start + batch_size, labels.shape[0]))
        x, y = images[idx], labels[idx]
        rng = np.random.default_rng([seed, b])
        x_adv = run_attack(frozen, x, y, cfg, protos=protos, loss_fn=loss_fn, rng=rng)
        clean_pred = predictor(x)
        adv_pred = predictor(x_adv)
        yield AdvBatch(x=x, x_adv=x_adv, labels=y, clean_pred=clean_pred, adv_pred=adv_pred,
                       success=adv_pred != y, indices=idx)
