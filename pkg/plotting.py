"""Accuracy-versus-epsilon figures"""

import logging
import os
from typing import Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from models import SweepResult
from reports import ATTACK_TITLES

logger = logging.getLogger(__name__)

MARKERS = {"FGSM": "o", "BIM": "s", "MIM": "^", "PGD": "D"}


def plot_sweep(sweep: SweepResult, path: str, title: Optional[str] = None) -> str:
    """One line per attack kind, accuracy in percent against the budget"""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for kind in sweep.kinds():
        curve = sweep.curve(kind)
        ax.plot([p.epsilon for p in curve], [100 * p.accuracy for p in curve],
                marker=MARKERS.get(kind.value, "o"), linewidth=1.5, label=ATTACK_TITLES[kind])
    ax.set_xlabel("epsilon")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(-2, 102)
    ax.grid(which="major", axis="both", alpha=0.3)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info(f"Saved sweep plot to {path}")
    return path
