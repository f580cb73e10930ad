"""CSV and plain-text report writers.

Every result is assembled as a pandas DataFrame; files start with a
`# protoshield <version> config_hash=<h> seed=<s>` line followed by the frame.
"""

import logging
import os
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from attacks import AdvBatch
from config import TOOL_NAME, get_settings
from losses import PrototypeSet
from models import (
    AblationRow, AttackKind, CheckResult, MarginProbe, RobustnessReport, SweepResult, TransferMatrix,
)
from training import TrainLog

logger = logging.getLogger(__name__)

ATTACK_TITLES = {AttackKind.FGSM: "FGSM", AttackKind.BIM: "BIM", AttackKind.CW: "C&W",
                 AttackKind.MIM: "MIM", AttackKind.PGD: "PGD"}


def output_header(config_hash: str, seed: int) -> str:
    return f"# {TOOL_NAME} {get_settings().tool_version} config_hash={config_hash} seed={seed}"


def _open(path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    return open(path, "w", newline="", encoding="utf-8")


def write_csv(path: str, frame: pd.DataFrame, config_hash: str, seed: int, float_format: str = "%.6f") -> str:
    with _open(path) as f:
        f.write(output_header(config_hash, seed) + "\n")
        frame.to_csv(f, index=False, float_format=float_format, na_rep="", lineterminator="\n")
    logger.debug(f"Wrote {path} ({len(frame)} rows)")
    return path


def write_text(path: str, body: str, config_hash: str, seed: int) -> str:
    with _open(path) as f:
        f.write(output_header(config_hash, seed) + "\n")
        f.write(body if body.endswith("\n") else body + "\n")
    logger.debug(f"Wrote {path}")
    return path


def read_csv(path: str) -> Tuple[str, pd.DataFrame]:
    """(header line, frame) of a file written by write_csv; "None" and empty cells stay strings"""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        return header, pd.read_csv(f, keep_default_na=False)


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

def robustness_frame(report: RobustnessReport) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.variant, r.attack.value, r.setting, r.parameter, r.value, r.accuracy, r.correct, r.n)
         for r in report.rows],
        columns=["variant", "attack", "setting", "parameter", "value", "accuracy", "correct", "n"],
    )


def train_log_frame(log: TrainLog) -> pd.DataFrame:
    n_taps = max((len(r.proto_mean_distance) for r in log.records), default=0)
    rows = []
    for r in log.records:
        row = {"epoch": r.epoch, "phase": r.phase, "lr": r.lr, "total": r.total, "ce": r.ce}
        for t in range(n_taps):
            row[f"pc_tap{t}"] = r.pc_per_tap[t] if r.pc_per_tap else np.nan
        row["accuracy"] = r.accuracy
        row.update({f"proto_mean_tap{t}": v for t, v in enumerate(r.proto_mean_distance)})
        row.update({f"proto_min_tap{t}": v for t, v in enumerate(r.proto_min_distance)})
        row["effective_batches"] = r.effective_batches
        row["wall_time"] = r.wall_time
        rows.append(row)
    return pd.DataFrame(rows)


def sweep_frame(sweep: SweepResult) -> pd.DataFrame:
    return pd.DataFrame([(p.attack.value, p.epsilon, p.accuracy, p.n) for p in sweep.points],
                        columns=["attack", "epsilon", "accuracy", "n"])


def transfer_frame(matrix: TransferMatrix) -> pd.DataFrame:
    frame = pd.DataFrame(matrix.accuracy, columns=matrix.names)
    frame.insert(0, "source\\target", matrix.names)
    return frame


def probe_frame(probe: MarginProbe) -> pd.DataFrame:
    rows = [(str(c.label), c.radius, c.margin, int(c.overlap)) for c in probe.classes]
    rows.append(("all", probe.radius, probe.margin, int(probe.overlap)))
    return pd.DataFrame(rows, columns=["class", "radius", "margin", "overlap"])


def ablation_frame(rows: List[AblationRow]) -> pd.DataFrame:
    return pd.DataFrame([(r.label, " ".join(str(t) for t in r.taps), r.clean, r.fgsm, r.pgd) for r in rows],
                        columns=["taps", "layers", "clean", "fgsm", "pgd"])


def checklist_frame(checks: List[CheckResult]) -> pd.DataFrame:
    return pd.DataFrame([("PASS" if c.passed else "FAIL", c.name, c.detail) for c in checks],
                        columns=["result", "check", "detail"])


def prototypes_frame(protos: PrototypeSet) -> pd.DataFrame:
    return pd.DataFrame(list(protos.rows()), columns=["tap", "class", "dim", "value"])


def adv_batch_frame(batch: AdvBatch) -> pd.DataFrame:
    return pd.DataFrame({
        "index": batch.indices.astype(int),
        "label": batch.labels.astype(int),
        "clean_pred": batch.clean_pred.astype(int),
        "adv_pred": batch.adv_pred.astype(int),
        "linf": batch.linf(),
    })


def embeddings_frame(taps: List[np.ndarray], labels: np.ndarray) -> pd.DataFrame:
    """One row per (sample, tap) with the full feature vector; narrower taps leave trailing cells empty"""
    parts = []
    for tap, feats in enumerate(taps):
        part = pd.DataFrame(feats, columns=[f"f{d}" for d in range(feats.shape[1])])
        part.insert(0, "tap", tap)
        part.insert(0, "label", labels.astype(int))
        part.insert(0, "index", np.arange(feats.shape[0]))
        parts.append(part)
    return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=["index", "label", "tap"])


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------

def robustness_csv(path: str, report: RobustnessReport, config_hash: str, seed: int) -> str:
    return write_csv(path, robustness_frame(report), config_hash, seed)


def train_log_csv(path: str, log: TrainLog, config_hash: str, seed: int) -> str:
    return write_csv(path, train_log_frame(log), config_hash, seed)


def sweep_csv(path: str, sweep: SweepResult, config_hash: str, seed: int) -> str:
    return write_csv(path, sweep_frame(sweep), config_hash, seed)


def transfer_csv(path: str, matrix: TransferMatrix, config_hash: str, seed: int) -> str:
    return write_csv(path, transfer_frame(matrix), config_hash, seed)


def probe_csv(path: str, probe: MarginProbe, config_hash: str, seed: int) -> str:
    return write_csv(path, probe_frame(probe), config_hash, seed)


def ablation_csv(path: str, rows: List[AblationRow], config_hash: str, seed: int) -> str:
    return write_csv(path, ablation_frame(rows), config_hash, seed)


def checklist_csv(path: str, checks: List[CheckResult], config_hash: str, seed: int) -> str:
    return write_csv(path, checklist_frame(checks), config_hash, seed)


def prototypes_csv(path: str, protos: PrototypeSet, config_hash: str, seed: int) -> str:
    return write_csv(path, prototypes_frame(protos), config_hash, seed, float_format="%.17g")


def adv_batch_csv(path: str, batch: AdvBatch, config_hash: str, seed: int) -> str:
    return write_csv(path, adv_batch_frame(batch), config_hash, seed, float_format="%.9f")


def embeddings_csv(path: str, taps: List[np.ndarray], labels: np.ndarray, config_hash: str, seed: int) -> str:
    return write_csv(path, embeddings_frame(taps, labels), config_hash, seed, float_format="%.6g")


# ---------------------------------------------------------------------------
# Plain-text tables
# ---------------------------------------------------------------------------

def _percent(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, na_rep="-", float_format=lambda v: f"{100 * v:.1f}")


def robustness_table(report: RobustnessReport, title: Optional[str] = None) -> str:
    """Rows are (variant, setting); columns are attacks with their budget, in first-seen order"""
    frame = robustness_frame(report)
    frame["column"] = [f"{ATTACK_TITLES[AttackKind(a)]} {p}={v:g}"
                       for a, p, v in zip(frame["attack"], frame["parameter"], frame["value"])]
    wide = frame.pivot_table(index=["variant", "setting"], columns="column", values="accuracy", sort=False)
    wide = wide.reindex(columns=list(dict.fromkeys(frame["column"]))).reset_index()
    wide = wide.rename(columns={"variant": "Variant", "setting": "Setting"})
    wide.columns.name = None
    text = _percent(wide)
    return f"{title}\n{text}" if title else text


def transfer_table(matrix: TransferMatrix) -> str:
    frame = transfer_frame(matrix).rename(columns={"source\\target": "source \\ target"})
    return f"Transferability ({matrix.attack}), accuracy %\n" + _percent(frame)


def ablation_table(rows: List[AblationRow]) -> str:
    frame = ablation_frame(rows).drop(columns=["layers"])
    return _percent(frame.rename(columns={"taps": "Taps", "clean": "Clean", "fgsm": "FGSM", "pgd": "PGD"}))


def sweep_table(sweep: SweepResult) -> str:
    frame = sweep_frame(sweep)
    wide = frame.pivot_table(index="epsilon", columns="attack", values="accuracy", sort=True)
    wide = wide.reindex(columns=[k.value for k in sweep.kinds()])
    wide.columns = [ATTACK_TITLES[AttackKind(k)] for k in wide.columns]
    wide.index = [f"{eps:g}" for eps in wide.index]
    wide = wide.rename_axis("eps").reset_index()
    return _percent(wide)


def probe_text(probe: MarginProbe) -> str:
    summary = (f"eps={probe.epsilon:g} draws={probe.n_draws} lambda={probe.radius:.4f} m={probe.margin:.4f} "
               f"m/(2 lambda)={probe.ratio:.4f} overlap={'yes' if probe.overlap else 'no'}")
    frame = probe_frame(probe).iloc[:-1].rename(columns={"radius": "lambda", "margin": "m"})
    frame["overlap"] = frame["overlap"].map({1: "yes", 0: "no"})
    return summary + "\n" + frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def checklist_text(checks: List[CheckResult]) -> str:
    return checklist_frame(checks).to_string(index=False, justify="left")


def render(*sections: str) -> str:
    return "".join(section.rstrip("\n") + "\n\n" for section in sections if section)
