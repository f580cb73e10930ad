"""protoshield command-line entry point.

    python main.py <verb> [--config run.yaml] [--profile tiny|desk] [overrides...]

Verbs: train, attack, eval, transfer, sweep, probe, ablate, repro.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from pydantic import ValidationError

from attacks import AdvBatch, attack_dispatch
from cache import ReportCache
from checkpoint import load_checkpoint, save_adv_batch, save_checkpoint
from config import (
    apply_overrides, ensure_output_root, get_settings, load_run_config, profile_run_config, validate_run_config,
)
from data_io import Dataset, load_datasets, subset
from eval_harness import (
    NamedModel, clean_accuracy, epsilon_sweep, evaluate_robustness, layer_ablation, margin_probe,
    masking_checklist, row_seed, sweep_attack, transfer_matrix,
)
from exceptions import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, AppException, ConfigurationError, ErrorResponse
from losses import PrototypeSet
from models import AttackConfig, AttackKind, BUDGET_KINDS, RobustnessReport, RunConfig
from network import Model, spec_from_section
from plotting import plot_sweep
from training import REPRO_VARIANTS, make_black_box_source, train_variant
import reports

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    command: str
    config: RunConfig
    config_hash: str
    out_dir: Path

    @property
    def seed(self) -> int:
        return self.config.seed

    def path(self, name: str) -> str:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return str(self.out_dir / name)


# ---------------------------------------------------------------------------
# Argument parsing and configuration
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoshield", description="Adversarial robustness workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--profile", choices=["tiny", "desk"], help="start from a built-in profile")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--variant", choices=["pcl", "ce-only"])
    common.add_argument("--checkpoint", help="model checkpoint (overrides model.checkpoint)")
    common.add_argument("--log-level", dest="log_level")

    sub.add_parser("train", parents=[common], help="train a model (warm-up, then joint objective)")

    attack = sub.add_parser("attack", parents=[common], help="attack a checkpoint and export adversarial batches")
    attack.add_argument("--epsilon", type=float, help="override every budgeted attack's epsilon")

    ev = sub.add_parser("eval", parents=[common], help="robustness table for a checkpoint")
    ev.add_argument("--source-checkpoint", dest="source_checkpoint")
    ev.add_argument("--settings", nargs="+", choices=["white", "black", "adaptive"])
    ev.add_argument("--predict", choices=["softmax", "prototype"])

    tr = sub.add_parser("transfer", parents=[common], help="transferability matrix between checkpoints")
    tr.add_argument("--model", action="append", default=[], metavar="NAME=PATH")

    sw = sub.add_parser("sweep", parents=[common], help="accuracy against epsilon")
    sw.add_argument("--grid", type=float, nargs="+")

    pr = sub.add_parser("probe", parents=[common], help="feature-space margin probe")
    pr.add_argument("--epsilon", type=float)
    pr.add_argument("--draws", type=int)

    sub.add_parser("ablate", parents=[common], help="train and evaluate every tap subset")
    sub.add_parser("repro", parents=[common], help="full pipeline with a consolidated report")
    return parser


def _deep_merge(base: Dict[str, Any], top: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Profile defaults, then the config file, then flags"""
    raw: Dict[str, Any] = profile_run_config(args.profile) if args.profile else {}
    if args.config:
        raw = _deep_merge(raw, load_run_config(args.config))
    overrides = {
        "seed": args.seed,
        "output_dir": args.output_dir,
        "variant": args.variant,
        "model.checkpoint": args.checkpoint,
        "eval.source_checkpoint": getattr(args, "source_checkpoint", None),
        "eval.settings": getattr(args, "settings", None),
        "eval.predict": getattr(args, "predict", None),
        "eval.sweep_grid": getattr(args, "grid", None),
        "eval.probe_draws": getattr(args, "draws", None),
    }
    if args.command == "probe":
        overrides["eval.probe_epsilon"] = args.epsilon
    return validate_run_config(apply_overrides(raw, overrides))


def make_context(command: str, config: RunConfig) -> RunContext:
    config_hash = config.config_hash()
    if config.output_dir:
        out_dir = Path(config.output_dir)
    else:
        out_dir = ensure_output_root() / f"{command}-{config_hash}"
    return RunContext(command=command, config=config, config_hash=config_hash, out_dir=out_dir)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _datasets(ctx: RunContext) -> Tuple[Dataset, Dataset]:
    train, test = load_datasets(ctx.config.data, ctx.seed)
    expected = tuple(ctx.config.model.input_shape)
    if train.image_shape != expected:
        raise ConfigurationError(
            f"model.input_shape {list(expected)} does not match data shape {list(train.image_shape)}",
            details={"field": "model.input_shape"},
        )
    return train, test


def _load_model(ctx: RunContext, path: Optional[str] = None) -> Tuple[Model, PrototypeSet]:
    path = path or ctx.config.model.checkpoint
    if not path:
        raise ConfigurationError("model.checkpoint is required for this command", details={"field": "model.checkpoint"})
    model, protos, _ = load_checkpoint(path, expected_spec=spec_from_section(ctx.config.model))
    return model, protos


def _black_box_source(ctx: RunContext, train: Dataset) -> Model:
    path = ctx.config.eval.source_checkpoint
    if path:
        model, _, _ = load_checkpoint(path)
        return model
    logger.info("No eval.source_checkpoint given; training a black-box source model")
    return make_black_box_source(train, ctx.seed + 1, ctx.config.train)


def _emit(text: str) -> None:
    print(text, flush=True)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(ctx: RunContext) -> str:
    cfg = ctx.config
    train, _ = _datasets(ctx)
    spec = spec_from_section(cfg.model)

    def on_checkpoint(epoch: int, model: Model, protos: PrototypeSet) -> None:
        save_checkpoint(ctx.path(f"checkpoints/epoch-{epoch:03d}.pshld"), model, protos, ctx.config_hash, ctx.seed,
                        metadata={"epoch": epoch, "variant": cfg.variant})

    model, protos, log = train_variant(spec, train, cfg.train, variant=cfg.variant, seed=cfg.seed,
                                       on_checkpoint=on_checkpoint)
    path = ctx.path("model.pshld")
    save_checkpoint(path, model, protos, ctx.config_hash, ctx.seed,
                    metadata={"epoch": cfg.train.epochs, "variant": cfg.variant})
    reports.prototypes_csv(ctx.path("prototypes.csv"), protos, ctx.config_hash, ctx.seed)
    reports.train_log_csv(ctx.path("train_log.csv"), log, ctx.config_hash, ctx.seed)
    for r in log.records:
        _emit(f"epoch {r.epoch + 1:3d} {r.phase:6s} loss={r.total:.4f} ce={r.ce:.4f} acc={100 * r.accuracy:.1f}%")
    _emit(f"checkpoint: {path}")
    return path


def cmd_attack(ctx: RunContext, epsilon: Optional[float] = None) -> List[str]:
    cfg = ctx.config
    _, test = _datasets(ctx)
    model, protos = _load_model(ctx)
    written = []
    for attack in cfg.attacks:
        if epsilon is not None and attack.kind in BUDGET_KINDS:
            attack = _with_epsilon(attack, epsilon)
        batch = AdvBatch.concat(list(attack_dispatch(
            model, test, attack, seed=row_seed(ctx.seed, attack),
            batch_size=cfg.eval.batch_size, protos=protos)))
        stem = f"adv_{attack.kind.value.lower()}"
        save_adv_batch(ctx.path(f"{stem}.pshld"), batch, attack.label(), ctx.config_hash, ctx.seed)
        written.append(reports.adv_batch_csv(ctx.path(f"{stem}.csv"), batch, ctx.config_hash, ctx.seed))
        _emit(f"{attack.label()}: success rate {100 * batch.success_rate():.1f}% "
              f"(max linf {float(batch.linf().max()) if len(batch) else 0.0:.4f})")
    return written


def _with_epsilon(attack: AttackConfig, epsilon: float) -> AttackConfig:
    update: Dict[str, Any] = {"epsilon": epsilon}
    if attack.kind == AttackKind.PGD:
        update["step_size"] = epsilon / attack.steps
    return AttackConfig.model_validate({**attack.model_dump(), **update})


def _robustness(ctx: RunContext, model: Model, protos: PrototypeSet, data: Dataset, variant: str,
                source: Optional[Model], cache: ReportCache) -> RobustnessReport:
    cfg = ctx.config
    report = RobustnessReport()
    for setting in cfg.eval.settings:
        report = report.extend(evaluate_robustness(
            model, protos, cfg.attacks, data, setting, source_model=source, variant=variant, seed=ctx.seed,
            batch_size=cfg.eval.batch_size, predict=cfg.eval.predict, cache=cache))
    return report


def cmd_eval(ctx: RunContext) -> RobustnessReport:
    cfg = ctx.config
    train, test = _datasets(ctx)
    model, protos = _load_model(ctx)
    source = _black_box_source(ctx, train) if "black" in cfg.eval.settings else None
    clean = clean_accuracy(model, test, protos, cfg.eval.predict, cfg.eval.batch_size)
    report = _robustness(ctx, model, protos, test, cfg.variant, source, ReportCache())
    reports.robustness_csv(ctx.path("robustness.csv"), report, ctx.config_hash, ctx.seed)
    table = reports.robustness_table(report, title=f"Accuracy % (clean {100 * clean:.1f}%)")
    reports.write_text(ctx.path("robustness.txt"), table, ctx.config_hash, ctx.seed)
    _emit(table)
    return report


def _transfer_attack(cfg: RunConfig) -> AttackConfig:
    if cfg.eval.transfer_attack is not None:
        return cfg.eval.transfer_attack
    for attack in cfg.attacks:
        if attack.kind == AttackKind.PGD:
            return attack
    return sweep_attack(AttackKind.PGD, 0.3)


def cmd_transfer(ctx: RunContext, extra_models: List[str]) -> None:
    cfg = ctx.config
    named: Dict[str, str] = dict(cfg.eval.models)
    for item in extra_models:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigurationError(f"--model expects NAME=PATH, got '{item}'", details={"field": "model"})
        named[name] = path
    if len(named) < 2:
        raise ConfigurationError(f"transfer needs at least 2 models, got {len(named)}",
                                 details={"field": "eval.models"})
    _, test = _datasets(ctx)
    models = []
    for name, path in named.items():
        model, protos, _ = load_checkpoint(path)
        models.append(NamedModel(name=name, model=model, protos=protos))
    matrix = transfer_matrix(models, _transfer_attack(cfg), test, seed=ctx.seed,
                             batch_size=cfg.eval.batch_size, predict=cfg.eval.predict)
    reports.transfer_csv(ctx.path("transfer.csv"), matrix, ctx.config_hash, ctx.seed)
    table = reports.transfer_table(matrix)
    reports.write_text(ctx.path("transfer.txt"), table, ctx.config_hash, ctx.seed)
    _emit(table)


def cmd_sweep(ctx: RunContext) -> None:
    cfg = ctx.config
    _, test = _datasets(ctx)
    model, protos = _load_model(ctx)
    sweep = epsilon_sweep(model, protos, cfg.eval.sweep_kinds, cfg.eval.sweep_grid, test, seed=ctx.seed,
                          batch_size=cfg.eval.batch_size, predict=cfg.eval.predict)
    reports.sweep_csv(ctx.path("sweep.csv"), sweep, ctx.config_hash, ctx.seed)
    table = reports.sweep_table(sweep)
    reports.write_text(ctx.path("sweep.txt"), table, ctx.config_hash, ctx.seed)
    if get_settings().plots:
        plot_sweep(sweep, ctx.path("sweep.png"), title=f"{cfg.variant} (seed {ctx.seed})")
    _emit(table)


def _probe_sample(ctx: RunContext, test: Dataset) -> Dataset:
    n = min(ctx.config.eval.probe_samples, len(test))
    return subset(test, n, ctx.seed)


def cmd_probe(ctx: RunContext) -> None:
    cfg = ctx.config
    _, test = _datasets(ctx)
    model, _ = _load_model(ctx)
    sample = _probe_sample(ctx, test)
    probe = margin_probe(model, sample, cfg.eval.probe_epsilon, cfg.eval.probe_draws, seed=ctx.seed)
    reports.probe_csv(ctx.path("probe.csv"), probe, ctx.config_hash, ctx.seed)
    taps = [t.data for t in model.forward(sample.images).taps]
    reports.embeddings_csv(ctx.path("embeddings.csv"), taps, sample.labels, ctx.config_hash, ctx.seed)
    text = reports.probe_text(probe)
    reports.write_text(ctx.path("probe.txt"), text, ctx.config_hash, ctx.seed)
    _emit(text)


def _budget(cfg: RunConfig) -> float:
    for attack in cfg.attacks:
        if attack.kind in BUDGET_KINDS:
            return attack.epsilon
    return 0.3


def cmd_ablate(ctx: RunContext) -> None:
    cfg = ctx.config
    train, test = _datasets(ctx)
    rows = layer_ablation(spec_from_section(cfg.model), cfg.eval.ablation_subsets, train, test, cfg.train,
                          epsilon=_budget(cfg), seed=ctx.seed, batch_size=cfg.eval.batch_size)
    reports.ablation_csv(ctx.path("ablation.csv"), rows, ctx.config_hash, ctx.seed)
    table = reports.ablation_table(rows)
    reports.write_text(ctx.path("ablation.txt"), table, ctx.config_hash, ctx.seed)
    _emit(table)


def cmd_repro(ctx: RunContext) -> str:
    """Baseline, PCL and adversarially trained variants through the full evaluation battery"""
    cfg = ctx.config
    train, test = _datasets(ctx)
    spec = spec_from_section(cfg.model)
    cache = ReportCache()

    trained: Dict[str, Tuple[Model, PrototypeSet]] = {}
    for name, (variant, adv_mode) in REPRO_VARIANTS.items():
        logger.info(f"repro: training {name}")
        model, protos, log = train_variant(spec, train, cfg.train, variant=variant, adv_mode=adv_mode, seed=cfg.seed)
        stem = name.lower().replace("+", "_")
        save_checkpoint(ctx.path(f"variants/{stem}.pshld"), model, protos, ctx.config_hash, ctx.seed,
                        metadata={"variant": name})
        reports.train_log_csv(ctx.path(f"variants/{stem}_train_log.csv"), log, ctx.config_hash, ctx.seed)
        trained[name] = (model, protos)

    source = _black_box_source(ctx, train)
    report = RobustnessReport()
    for name, (model, protos) in trained.items():
        for setting in ("white", "black"):
            report = report.extend(evaluate_robustness(
                model, protos, cfg.attacks, test, setting, source_model=source, variant=name, seed=ctx.seed,
                batch_size=cfg.eval.batch_size, predict=cfg.eval.predict, cache=cache))

    ours, ours_protos = trained["Ours"]
    sweep = epsilon_sweep(ours, ours_protos, cfg.eval.sweep_kinds, cfg.eval.sweep_grid, test, seed=ctx.seed,
                          batch_size=cfg.eval.batch_size, predict=cfg.eval.predict)
    ours_rows = RobustnessReport(rows=[r for r in report.rows if r.variant == "Ours"])
    checks = masking_checklist(
        RobustnessReport(rows=[r for r in ours_rows.rows if r.setting == "white"]),
        RobustnessReport(rows=[r for r in ours_rows.rows if r.setting == "black"]),
        sweep,
    )

    sample = _probe_sample(ctx, test)
    probes = {name: margin_probe(trained[name][0], sample, cfg.eval.probe_epsilon, cfg.eval.probe_draws,
                                 seed=ctx.seed) for name in ("Softmax", "Ours")}
    matrix = transfer_matrix([NamedModel(name, m, p) for name, (m, p) in trained.items()],
                             _transfer_attack(cfg), test, seed=ctx.seed, batch_size=cfg.eval.batch_size,
                             predict=cfg.eval.predict)

    reports.robustness_csv(ctx.path("report.csv"), report, ctx.config_hash, ctx.seed)
    reports.sweep_csv(ctx.path("sweep.csv"), sweep, ctx.config_hash, ctx.seed)
    reports.transfer_csv(ctx.path("transfer.csv"), matrix, ctx.config_hash, ctx.seed)
    reports.checklist_csv(ctx.path("checklist.csv"), checks, ctx.config_hash, ctx.seed)
    for name, probe in probes.items():
        reports.probe_csv(ctx.path(f"probe_{name.lower()}.csv"), probe, ctx.config_hash, ctx.seed)
    if get_settings().plots:
        plot_sweep(sweep, ctx.path("sweep.png"), title="Ours, white-box")

    clean = {name: clean_accuracy(m, test, p, cfg.eval.predict, cfg.eval.batch_size) for name, (m, p) in trained.items()}
    body = reports.render(
        reports.robustness_table(report, title="Robustness, accuracy % ("
                                 + ", ".join(f"{n} clean {100 * a:.1f}" for n, a in clean.items()) + ")"),
        "Gradient-masking checklist\n" + reports.checklist_text(checks),
        "Sweep (Ours, white-box), accuracy %\n" + reports.sweep_table(sweep),
        "\n\n".join(f"Margin probe ({name})\n{reports.probe_text(p)}" for name, p in probes.items()),
        reports.transfer_table(matrix),
    )
    path = reports.write_text(ctx.path("report.txt"), body, ctx.config_hash, ctx.seed)
    _emit(body)
    return path


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunContext], Any]] = {
    "train": lambda args, ctx: cmd_train(ctx),
    "attack": lambda args, ctx: cmd_attack(ctx, args.epsilon),
    "eval": lambda args, ctx: cmd_eval(ctx),
    "transfer": lambda args, ctx: cmd_transfer(ctx, args.model),
    "sweep": lambda args, ctx: cmd_sweep(ctx),
    "probe": lambda args, ctx: cmd_probe(ctx),
    "ablate": lambda args, ctx: cmd_ablate(ctx),
    "repro": lambda args, ctx: cmd_repro(ctx),
}


def _report_error(error: ErrorResponse) -> None:
    print(json.dumps(error.model_dump(), default=str), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "repro" and not args.profile and not args.config:
        args.profile = "tiny"

    try:
        config = resolve_config(args)
        ctx = make_context(args.command, config)
        logger.info(f"{args.command}: config_hash={ctx.config_hash} seed={ctx.seed} output={ctx.out_dir}")
        COMMANDS[args.command](args, ctx)
        return EXIT_OK
    except AppException as exc:
        logger.error(f"Application error: {exc.message}")
        _report_error(ErrorResponse(error=exc.__class__.__name__, message=exc.message, exit_code=exc.exit_code,
                                    details=exc.details, command=args.command))
        return exc.exit_code
    except ValidationError as exc:
        logger.error(f"Validation error: {exc}")
        _report_error(ErrorResponse(error="ValidationError", message=str(exc), exit_code=EXIT_CONFIG,
                                    command=args.command))
        return EXIT_CONFIG
    except Exception as exc:
        logger.exception(f"Unexpected error: {exc}")
        _report_error(ErrorResponse(error="InternalError", message=str(exc), exit_code=EXIT_RUNTIME,
                                    command=args.command))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
