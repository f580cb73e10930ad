"""Pydantic schemas shared across the workbench"""

import hashlib
import math
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


def _short_hash(payload: str) -> str:
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Network description
# ---------------------------------------------------------------------------

class LayerKind(str, Enum):
    CONV = "conv"
    PRELU = "prelu"
    RELU = "relu"
    POOL = "pool"
    GAP = "gap"
    FLATTEN = "flatten"
    FC = "fc"


class LayerSpec(BaseModel):
    """One layer of a sequential network"""
    model_config = ConfigDict(extra="forbid")

    kind: LayerKind
    out: Optional[int] = Field(default=None, gt=0)  # conv filters or fc features
    kernel: int = Field(default=5, gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    size: int = Field(default=2, gt=0)  # pool window


class AuxBranchSpec(BaseModel):
    """Auxiliary branch G_phi attached at a tap point"""
    model_config = ConfigDict(extra="forbid")

    pool: bool = True  # global average pooling for 4-D taps
    fc_dim: Optional[int] = Field(default=None, gt=0)  # optional linear projection


class ModelSpec(BaseModel):
    """Layered classifier with tap points for deep supervision"""
    model_config = ConfigDict(extra="forbid")

    name: str = "cnn6"
    layers: List[LayerSpec]
    tap_points: List[int] = []
    aux_branches: Optional[List[AuxBranchSpec]] = None
    num_classes: int = Field(gt=0)
    input_shape: Tuple[int, ...]

    def branch(self, tap_index: int) -> AuxBranchSpec:
        if self.aux_branches is None:
            return AuxBranchSpec()
        return self.aux_branches[tap_index]

    def with_taps(self, taps: List[int]) -> "ModelSpec":
        """Same network with a different set of supervised depths"""
        return self.model_copy(update={"tap_points": list(taps), "aux_branches": None})


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

class AttackKind(str, Enum):
    FGSM = "FGSM"
    BIM = "BIM"
    MIM = "MIM"
    CW = "CW"
    PGD = "PGD"


ITERATIVE_KINDS = (AttackKind.BIM, AttackKind.MIM, AttackKind.PGD)
BUDGET_KINDS = (AttackKind.FGSM, AttackKind.BIM, AttackKind.MIM, AttackKind.PGD)


class LossMode(str, Enum):
    CE = "CE"
    CE_PC = "CE+PC"


class AttackConfig(BaseModel):
    """Hyperparameters of one attack run"""
    model_config = ConfigDict(extra="forbid")

    kind: AttackKind
    epsilon: float = Field(default=0.3, ge=0)
    steps: int = Field(default=10, ge=1)
    step_size: Optional[float] = Field(default=None, ge=0)  # PGD gamma; defaults to epsilon / steps
    decay: float = Field(default=1.0, ge=0)  # MIM mu
    c: float = Field(default=10.0, ge=0)
    confidence: float = Field(default=0.0, ge=0)  # C&W kappa
    lr: float = Field(default=0.01, gt=0)
    iters: int = Field(default=1000, ge=1)
    restarts: int = Field(default=1, ge=1)
    loss_mode: LossMode = LossMode.CE
    clip_min: float = 0.0
    clip_max: float = 1.0

    @model_validator(mode="after")
    def _check_ranges(self) -> "AttackConfig":
        if not self.clip_min < self.clip_max:
            raise ValueError(f"clip_min ({self.clip_min}) must be below clip_max ({self.clip_max})")
        if self.kind == AttackKind.PGD and self.epsilon > 0 and self.step_size is not None and self.step_size <= 0:
            raise ValueError("PGD step_size must be positive when epsilon > 0")
        return self

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / self.steps

    @property
    def parameter(self) -> Literal["eps", "c"]:
        return "c" if self.kind == AttackKind.CW else "eps"

    @property
    def value(self) -> float:
        return self.c if self.kind == AttackKind.CW else self.epsilon

    def label(self) -> str:
        return f"{self.kind.value} {self.parameter}={self.value:g}"

    def config_hash(self) -> str:
        return _short_hash(self.model_dump_json())


def default_attack_battery(epsilon: float = 0.3, c: float = 10.0, cw_iters: int = 1000) -> List[AttackConfig]:
    """FGSM, BIM, C&W, MIM and PGD with 10 iterations of step epsilon/10"""
    return [
        AttackConfig(kind=AttackKind.FGSM, epsilon=epsilon, steps=1),
        AttackConfig(kind=AttackKind.BIM, epsilon=epsilon, steps=10),
        AttackConfig(kind=AttackKind.CW, c=c, iters=cw_iters, lr=0.01),
        AttackConfig(kind=AttackKind.MIM, epsilon=epsilon, steps=10, decay=1.0),
        AttackConfig(kind=AttackKind.PGD, epsilon=epsilon, steps=10, step_size=epsilon / 10),
    ]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class AdvMode(str, Enum):
    NONE = "none"
    FGSM = "FGSM"
    PGD = "PGD"


class TrainConfig(BaseModel):
    """Two-phase schedule: CE warm-up for warmup_epochs, then the joint objective"""
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=30, ge=1)
    warmup_epochs: int = Field(default=5, ge=0)
    batch_size: int = Field(default=256, ge=1)
    lr: float = Field(default=0.1, ge=0)
    lr_decay_epochs: List[int] = [20, 25]
    lr_decay_factor: float = Field(default=0.1, gt=0)
    adv_mode: AdvMode = AdvMode.NONE
    adv_epsilon: Tuple[float, float] = (0.1, 0.5)
    adv_fraction: float = Field(default=1.0, gt=0, le=1.0)
    adv_steps: int = Field(default=10, ge=1)
    loss_weights: Optional[List[float]] = None
    seed: int = 0
    checkpoint_every: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) exceeds epochs ({self.epochs})")
        lo, hi = self.adv_epsilon
        if lo < 0 or lo > hi:
            raise ValueError(f"adv_epsilon interval [{lo}, {hi}] is invalid")
        return self

    def learning_rate(self, epoch: int) -> float:
        drops = len([e for e in self.lr_decay_epochs if epoch >= e])
        return self.lr * (self.lr_decay_factor ** drops)


class EpochRecord(BaseModel):
    """One TrainLog line"""
    epoch: int
    phase: Literal["warmup", "joint"]
    lr: float
    total: float
    ce: float
    pc_per_tap: List[float] = []
    accuracy: float
    proto_mean_distance: List[float] = []
    proto_min_distance: List[float] = []
    effective_batches: int
    wall_time: float


# ---------------------------------------------------------------------------
# Evaluation results
# ---------------------------------------------------------------------------

Setting = Literal["white", "black", "adaptive"]


class ReportRow(BaseModel):
    variant: str
    attack: AttackKind
    setting: Setting
    parameter: Literal["eps", "c"]
    value: float
    accuracy: float = Field(ge=0, le=1)
    correct: int = Field(ge=0)
    n: int = Field(gt=0)


class RobustnessReport(BaseModel):
    rows: List[ReportRow] = []

    def lookup(self, variant: str, attack: AttackKind, setting: str, value: float) -> Optional[ReportRow]:
        for row in self.rows:
            if row.variant == variant and row.attack == attack and row.setting == setting and row.value == value:
                return row
        return None

    def extend(self, other: "RobustnessReport") -> "RobustnessReport":
        return RobustnessReport(rows=self.rows + other.rows)


class SweepPoint(BaseModel):
    attack: AttackKind
    epsilon: float
    accuracy: float
    n: int


class SweepResult(BaseModel):
    points: List[SweepPoint] = []

    def curve(self, kind: AttackKind) -> List[SweepPoint]:
        return sorted([p for p in self.points if p.attack == kind], key=lambda p: p.epsilon)

    def kinds(self) -> List[AttackKind]:
        seen: List[AttackKind] = []
        for p in self.points:
            if p.attack not in seen:
                seen.append(p.attack)
        return seen


class TransferMatrix(BaseModel):
    names: List[str]
    attack: str
    accuracy: List[List[float]]  # [source][target]

    def entry(self, source: str, target: str) -> float:
        return self.accuracy[self.names.index(source)][self.names.index(target)]


class ClassMargin(BaseModel):
    label: int
    radius: float = Field(ge=0)  # lambda
    margin: float = Field(ge=0)  # m
    overlap: bool


class MarginProbe(BaseModel):
    epsilon: float
    n_draws: int
    classes: List[ClassMargin]
    radius: float = Field(ge=0)
    margin: float = Field(ge=0)
    overlap: bool

    @property
    def ratio(self) -> float:
        """m / (2 lambda); infinite when no displacement was observed"""
        if self.radius == 0:
            return math.inf if self.margin > 0 else 0.0
        return self.margin / (2.0 * self.radius)


class AblationRow(BaseModel):
    label: str
    taps: List[int]
    clean: float
    fgsm: float
    pgd: float


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# Run configuration file
# ---------------------------------------------------------------------------

class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    profile: Literal["tiny", "desk"] = "desk"
    num_classes: int = Field(default=10, ge=2)
    input_shape: List[int] = [1, 28, 28]
    tap_points: Optional[List[int]] = None
    checkpoint: Optional[str] = None


class SyntheticSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(default=10, ge=2)
    n_per_class: int = Field(default=100, ge=1)
    eval_per_class: int = Field(default=20, ge=1)
    image_shape: List[int] = [1, 28, 28]
    spread: float = Field(default=0.1, ge=0)


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["idx", "synthetic"] = "synthetic"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_size: Optional[int] = Field(default=10000, ge=1)
    eval_size: Optional[int] = Field(default=1000, ge=1)
    synthetic: SyntheticSection = SyntheticSection()

    @model_validator(mode="after")
    def _check_paths(self) -> "DataSection":
        if self.source == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, name):
                    raise ValueError(f"data.{name} is required when data.source is 'idx'")
        return self


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    settings: List[Setting] = ["white", "black"]
    predict: Literal["softmax", "prototype"] = "softmax"
    batch_size: int = Field(default=100, ge=1)
    sweep_kinds: List[AttackKind] = [AttackKind.FGSM, AttackKind.BIM, AttackKind.MIM, AttackKind.PGD]
    sweep_grid: List[float] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    probe_epsilon: float = Field(default=0.1, ge=0)
    probe_draws: int = Field(default=200, ge=100)
    probe_samples: int = Field(default=100, ge=2)
    ablation_subsets: Optional[List[List[int]]] = None
    source_checkpoint: Optional[str] = None
    models: Dict[str, str] = {}
    transfer_attack: Optional[AttackConfig] = None


class RunConfig(BaseModel):
    """Top-level YAML run configuration"""
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    variant: Literal["pcl", "ce-only"] = "pcl"
    output_dir: Optional[str] = None
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    train: TrainConfig = TrainConfig()
    attacks: List[AttackConfig] = Field(default_factory=default_attack_battery)
    eval: EvalSection = EvalSection()

    def config_hash(self) -> str:
        return _short_hash(self.model_dump_json())
