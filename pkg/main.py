# DREAGR - Batch command line
# Ties loading, training, evaluation, ablations and sweeps together:
#   python main.py prepare   --data DIR --out DIR [--depth K]
#   python main.py train     --config FILE [--stage 1|2|both] [--resume CKPT]
#   python main.py evaluate  --checkpoint FILE [--split test|val] [--N 5,10,20]
#   python main.py ablate    --config FILE [--variants full,RPT,RDMP,RMP,RAA]
#   python main.py sweep     --config FILE --grid lr|dim|batch|decay [--points ...]
#   python main.py synth     --out DIR [--spec FILE] [--mode implicit] [--seed 0]
#   python main.py gradcheck [--tol 1e-4] [--corrupt]
# Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from data_io import (
    SyntheticSpec,
    generate_synthetic,
    is_prepared,
    load_checkpoint,
    load_dataset,
    load_prepared,
    micro_bundle,
    restore_state,
    save_checkpoint,
    save_dataset,
    save_prepared,
    write_metrics,
)
from errors import ConfigError, DataError, DreagrError, NumericalError
from evaluation import (
    CUTOFFS,
    SplitSpec,
    Variant,
    evaluate_groups,
    paired_hit_test,
    run_ablation,
    split_dataset,
    trainer_for_variant,
    train_variant,
    validate_cutoffs,
)
from training import GRIDS, TrainConfig, Trainer

logger = logging.getLogger("DreagrCLI")

CHECKPOINT_NAME = "checkpoint.drgr"


class RunConfig(BaseModel):
    """Everything a run needs; echoed into every artifact it writes"""
    model_config = ConfigDict(extra="forbid")

    data: str
    out: str = "runs/default"
    train: TrainConfig = Field(default_factory=TrainConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    variant: Variant = Variant.FULL
    paths: Optional[List[str]] = None
    cutoffs: List[int] = Field(default_factory=lambda: list(CUTOFFS))
    threads: int = Field(1, ge=1)
    checkpoint_mirror: bool = False

    def echo(self) -> Dict:
        return self.model_dump(mode="json")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _validation_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        field = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{field}: {err['msg']}")
    return "; ".join(parts)


def _csv_list(text: Optional[str], cast=str) -> Optional[List]:
    if text is None:
        return None
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list '{text}': {exc}") from exc


TRAIN_FLAGS = {
    "lr": "learning_rate",
    "pretrain_lr": "pretrain_lr",
    "dim": "embedding_dim",
    "batch": "batch_size",
    "decay": "weight_decay",
    "epochs": "epochs",
    "seed": "seed",
    "aggregator": "aggregator",
    "depth": "depth",
}


def load_run_config(path: Optional[str], args: argparse.Namespace) -> RunConfig:
    """JSON config file with flag overrides; flags win"""
    document: Dict = {}
    if path:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    train = dict(document.get("train", {}))
    for flag, field in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            train[field] = value
    if getattr(args, "fine_tune", False):
        train["freeze_user_in_stage2"] = False
    if train:
        document["train"] = train
    for flag in ("data", "out", "variant"):
        value = getattr(args, flag, None)
        if value is not None:
            document[flag] = value
    if getattr(args, "paths", None):
        document["paths"] = _csv_list(args.paths)
    if getattr(args, "threads", None) is not None:
        document["threads"] = args.threads

    try:
        return RunConfig(**document)
    except ValidationError as exc:
        raise ConfigError(f"invalid run configuration: {_validation_message(exc)}") from exc


def _load_bundle(run: RunConfig):
    if is_prepared(run.data):
        return load_prepared(run.data, depth=run.train.depth, path_labels=run.paths)
    return load_dataset(run.data, depth=run.train.depth, path_labels=run.paths)


def _split(run: RunConfig):
    bundle = _load_bundle(run)
    return split_dataset(bundle.store, run.split, bundle.planted_holdout())


def cmd_prepare(args) -> int:
    bundle = load_dataset(args.data, depth=args.depth)
    stats = save_prepared(bundle, args.out, {"data": args.data, "depth": args.depth})
    print(f"Prepared {stats['users']} users, {stats['items']} items, {stats['groups']} groups "
          f"({stats['gv_interactions']} G-V, {stats['gvv_interactions']} G-V-V) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config, args)
    out = Path(run.out)
    split = _split(run)
    trainer = trainer_for_variant(split.train_store, run.train, run.variant)

    if args.stage == "2":
        resume = Path(args.resume) if args.resume else out / CHECKPOINT_NAME
        checkpoint = load_checkpoint(resume)
        if checkpoint.stage < 1:
            raise DataError(f"{resume}: stage 2 needs a checkpoint that finished stage 1")
        restore_state(checkpoint, trainer)
        state = trainer.train_stage2()
    elif args.stage == "1":
        if run.variant == Variant.RPT:
            raise ConfigError("variant RPT has no user pre-training stage")
        state = trainer.train_stage1()
    else:
        state = train_variant(trainer, run.variant)

    save_checkpoint(state, out / CHECKPOINT_NAME, run.echo(), run.variant.value, mirror=run.checkpoint_mirror)
    write_metrics(trainer.records, out / f"losses_stage{args.stage}.csv", fmt="csv")
    status = trainer.get_training_status()
    print(f"Training finished at stage {status['stage']}: last losses {status['last_loss']}")
    return 0


def cmd_evaluate(args) -> int:
    cutoffs = validate_cutoffs(_csv_list(args.N, int))
    checkpoint = load_checkpoint(args.checkpoint)
    try:
        run = RunConfig(**checkpoint.run_config)
    except ValidationError as exc:
        raise ConfigError(f"checkpoint carries no usable run configuration: {_validation_message(exc)}") from exc
    if args.threads is not None:
        run = run.model_copy(update={"threads": args.threads})

    split = _split(run)
    variant = Variant(checkpoint.header.get("variant", run.variant.value))
    trainer = trainer_for_variant(split.train_store, run.train, variant)
    restore_state(checkpoint, trainer)
    report = evaluate_groups(trainer.group_model, split.instances(args.split), cutoffs,
                             variant=variant.value, threads=run.threads, config=run.echo())

    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    write_metrics(report, out / f"metrics_{args.split}.json", fmt="json")
    write_metrics(report, out / f"metrics_{args.split}.csv", fmt="csv")
    print(", ".join(f"HR@{n}={report.hr[n]:.4f}" for n in cutoffs))
    return 0


def cmd_ablate(args) -> int:
    run = load_run_config(args.config, args)
    try:
        variants = [Variant(v) for v in _csv_list(args.variants)]
    except ValueError as exc:
        raise ConfigError(f"unknown variant in '{args.variants}': choose from {[v.value for v in Variant]}") from exc
    cutoffs = validate_cutoffs(run.cutoffs)
    split = _split(run)

    reports = []
    for variant in variants:
        report = run_ablation(split.train_store, variant, run.train, cutoffs=cutoffs,
                              threads=run.threads, split=split)
        report.config = run.model_copy(update={"variant": variant}).echo()
        reports.append(report)

    out = Path(run.out)
    write_metrics(reports, out / "ablation.json", fmt="json")
    write_metrics(reports, out / "ablation.csv", fmt="csv")
    by_variant = {r.variant: r for r in reports}
    if Variant.FULL.value in by_variant:
        full = by_variant[Variant.FULL.value]
        tests = {
            r.variant: paired_hit_test(full.hits(min(cutoffs)), r.hits(min(cutoffs)))
            for r in reports if r.variant != Variant.FULL.value
        }
        (out / "ablation_paired.json").write_text(json.dumps(tests, indent=2) + "\n", encoding="utf-8")
    for r in reports:
        print(f"{r.variant:5s} " + " ".join(f"HR@{n}={r.hr[n]:.4f}" for n in cutoffs))
    return 0


def cmd_sweep(args) -> int:
    run = load_run_config(args.config, args)
    field, grid = GRIDS[args.grid]
    cast = int if field in ("embedding_dim", "batch_size") else float
    points = _csv_list(args.points, cast) or list(grid)
    off = [p for p in points if p not in grid]
    if off:
        raise ConfigError(f"points {off} are not on the {args.grid} grid {list(grid)}")
    cutoffs = validate_cutoffs(run.cutoffs)
    split = _split(run)

    rows = []
    reports = []
    for value in points:
        config = TrainConfig(**{**run.train.model_dump(), field: value})
        report = run_ablation(split.train_store, run.variant, config, cutoffs=cutoffs,
                              threads=run.threads, split=split)
        reports.append(report)
        rows += [(args.grid, field, value, metric, n, score) for _, metric, n, score in report.rows()]

    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(rows, columns=["grid", "parameter", "point", "metric", "N", "value"])
    table.to_csv(out / f"sweep_{args.grid}.csv", index=False, float_format="%.6g", lineterminator="\n")
    write_metrics(reports, out / f"sweep_{args.grid}.json", fmt="json")
    print(table.to_string(index=False))
    return 0


def cmd_synth(args) -> int:
    document: Dict = {}
    if args.spec:
        try:
            document = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synthetic spec {args.spec}: {exc}") from exc
    for flag, field in (("mode", "mode"), ("seed", "seed"), ("users", "n_users"),
                        ("items", "n_items"), ("groups", "n_groups"), ("noise", "noise")):
        value = getattr(args, flag)
        if value is not None:
            document[field] = value
    try:
        spec = SyntheticSpec(**document)
    except ValidationError as exc:
        raise ConfigError(f"invalid synthetic spec: {_validation_message(exc)}") from exc
    bundle = generate_synthetic(spec)
    save_dataset(bundle, args.out)
    print(f"Synthetic {spec.mode.value} dataset ({len(bundle.holdout)} planted holdouts) -> {args.out}")
    return 0


def _corrupt_first_gradient(params):
    params[0].grad.flat[0] += 1.0


def cmd_gradcheck(args) -> int:
    bundle = load_dataset(args.data) if args.data else micro_bundle()
    config = TrainConfig(embedding_dim=args.dim, seed=args.seed, epochs=1)
    trainer = Trainer(bundle.store, config)
    report = trainer.gradient_check(tol=args.tol, corrupt=_corrupt_first_gradient if args.corrupt else None)
    for name, err in report.max_relative_error.items():
        print(f"{name:20s} {err:.3e} {'ok' if err < args.tol else 'FAIL'}")
    if not report.passed:
        name, err = report.worst
        raise NumericalError(f"gradient check failed: {name} relative error {err:.3e} >= {args.tol}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="main.py", description="DREAGR group recommendation pipeline")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--threads", type=int, default=None, help="worker cap; 1 is the deterministic reference path")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def run_flags(p):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--variant", choices=[v.value for v in Variant])
        p.add_argument("--paths", help="comma-separated active path labels")
        p.add_argument("--lr", type=float)
        p.add_argument("--pretrain-lr", dest="pretrain_lr", type=float)
        p.add_argument("--dim", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--decay", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--aggregator", choices=["attention", "meanpool"])
        p.add_argument("--depth", type=int)
        p.add_argument("--fine-tune", dest="fine_tune", action="store_true",
                       help="update user parameters during stage 2")

    p = sub.add_parser("prepare", help="build and persist the interaction store")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=1)
    p.set_defaults(handler=cmd_prepare)

    p = sub.add_parser("train", help="two-stage training")
    run_flags(p)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--resume", help="stage-1 checkpoint for --stage 2")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="HR@N / NDCG@N from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["test", "val"], default="test")
    p.add_argument("--N", default=",".join(str(n) for n in CUTOFFS))
    p.add_argument("--out")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare ablation variants")
    run_flags(p)
    p.add_argument("--variants", default=",".join(v.value for v in Variant))
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("sweep", help="one-parameter grid sweep")
    run_flags(p)
    p.add_argument("--grid", required=True, choices=sorted(GRIDS))
    p.add_argument("--points", help="comma-separated subset of the grid")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("synth", help="generate a planted-signal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="SyntheticSpec JSON file")
    p.add_argument("--mode", choices=["explicit", "implicit", "mixed"])
    p.add_argument("--seed", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--data", help="dataset directory (default: built-in micro-instance)")
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", action="store_true", help="tamper with one analytic gradient")
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return ConfigError.exit_code

    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.handler(args)
    except DreagrError as exc:
        logger.error(f"{args.command} failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"usage error: {_validation_message(exc)}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
