"""
Slow trend reproductions: the tiny repro pipeline and desk-scale MNIST comparisons.

Run with `pytest -m slow`. The MNIST tests need PROTOSHIELD_MNIST_DIR pointing at the
four gzipped IDX files.
"""

import os

import pytest

from config import profile_run_config, validate_run_config
from data_io import load_datasets, subset
from eval_harness import evaluate_robustness, layer_ablation, margin_probe, sweep_attack
from exceptions import EXIT_OK
from main import main
from models import AdvMode, AttackKind
from network import spec_from_section
from reports import read_csv
from training import train_variant

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2]
PGD_STRONG = sweep_attack(AttackKind.PGD, 0.3)

needs_mnist = pytest.mark.skipif(not os.environ.get("PROTOSHIELD_MNIST_DIR"),
                                 reason="PROTOSHIELD_MNIST_DIR is not set")


class TestTinyRepro:
    """Test the end-to-end pipeline on synthetic blobs"""

    def test_report_files(self, tmp_path):
        out = tmp_path / "repro"
        assert main(["repro", "--profile", "tiny", "--output-dir", str(out)]) == EXIT_OK
        header, rows = read_csv(str(out / "report.csv"))
        assert header.startswith("# protoshield 0.1.0")
        variants = set(rows["variant"])
        assert variants == {"Softmax", "Ours", "Ours+AdvTrain_FGSM", "Ours+AdvTrain_PGD"}
        assert len(rows) == 4 * 2 * 5
        text = (out / "report.txt").read_text()
        assert "Gradient-masking checklist" in text and "C&W" in text
        for name in ("sweep.csv", "transfer.csv", "checklist.csv", "probe_softmax.csv", "probe_ours.csv"):
            assert (out / name).exists(), name

    def test_reports_are_deterministic(self, tmp_path):
        """Same config and seed give byte-identical CSV reports"""
        args = ["repro", "--profile", "tiny", "--seed", "3"]
        assert main(args + ["--output-dir", str(tmp_path / "a")]) == EXIT_OK
        assert main(args + ["--output-dir", str(tmp_path / "b")]) == EXIT_OK
        for name in ("report.csv", "sweep.csv", "transfer.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def _desk_tiny(seed):
    """Desk MNIST data with the tiny CNN-6 widths"""
    raw = profile_run_config("desk")
    raw["model"]["profile"] = "tiny"
    raw["seed"] = seed
    return validate_run_config(raw)


@pytest.fixture(scope="module")
def mnist_runs():
    """Per seed: test data and the trained CE-only, PCL and PCL+AdvTrain_PGD models"""
    runs = {}
    for seed in SEEDS:
        config = _desk_tiny(seed)
        train, test = load_datasets(config.data, seed)
        spec = spec_from_section(config.model)
        runs[seed] = {
            "test": test,
            "softmax": train_variant(spec, train, config.train, variant="ce-only", seed=seed),
            "pcl": train_variant(spec, train, config.train, variant="pcl", seed=seed),
            "adv": train_variant(spec, train, config.train, variant="pcl", adv_mode=AdvMode.PGD, seed=seed),
        }
    return runs


def _pgd_accuracy(run, name, seed):
    model, protos, _ = run[name]
    report = evaluate_robustness(model, protos, [PGD_STRONG], run["test"], "white", seed=seed)
    return report.rows[0].accuracy


@needs_mnist
class TestMnistTrends:
    """Qualitative robustness trends, each required for at least 2 of 3 seeds"""

    def test_softmax_collapses_under_pgd(self, mnist_runs):
        hits = [_pgd_accuracy(mnist_runs[s], "softmax", s) < 0.10 for s in SEEDS]
        assert sum(hits) >= 2, hits

    def test_pcl_beats_softmax_by_ten_points(self, mnist_runs):
        hits = [_pgd_accuracy(mnist_runs[s], "pcl", s) - _pgd_accuracy(mnist_runs[s], "softmax", s) >= 0.10
                for s in SEEDS]
        assert sum(hits) >= 2, hits

    def test_adv_training_complements_pcl(self, mnist_runs):
        hits = [_pgd_accuracy(mnist_runs[s], "adv", s) > _pgd_accuracy(mnist_runs[s], "pcl", s) for s in SEEDS]
        assert sum(hits) >= 2, hits

    def test_margin_ratio_grows(self, mnist_runs):
        """m/(2 lambda) at the deepest tap is larger for PCL than for the CE-only baseline"""
        hits = []
        for s in SEEDS:
            sample = subset(mnist_runs[s]["test"], 100, seed=s)
            ratios = {name: margin_probe(mnist_runs[s][name][0], sample, 0.1, 200, seed=s).ratio
                      for name in ("softmax", "pcl")}
            hits.append(ratios["pcl"] > ratios["softmax"])
        assert sum(hits) >= 2, hits

    def test_deep_taps_beat_shallow_tap(self):
        hits = []
        for s in SEEDS:
            config = _desk_tiny(s)
            train, test = load_datasets(config.data, s)
            spec = spec_from_section(config.model)
            shallow, deep = [spec.tap_points[0]], spec.tap_points[1:]
            rows = layer_ablation(spec, [shallow, deep], train, test, config.train, epsilon=0.3, seed=s)
            hits.append(rows[1].pgd > rows[0].pgd)
        assert sum(hits) >= 2, hits
