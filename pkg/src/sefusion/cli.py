"""Command-line entry point: ``sefusion synth|train|eval|predict|report``.

Exit codes: 0 success, 1 usage error, 2 data/format or I/O error,
3 numerical failure. ``SEFUSION_OUTPUT_DIR`` sets the default output
directory (otherwise ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import (
    SPLITS,
    TASK_GROUPS,
    get_task,
    load_dataset,
    save_dataset,
    summarize,
    synth_dataset,
)
from .errors import DataFormatError, SEFusionError, UsageError
from .metrics import EvalReport, accuracy, average_weighted_f1, weighted_f1
from .model import (
    FusionConfig,
    HeadConfig,
    TrainConfig,
    default_layers,
    evaluate_split,
    load_checkpoint,
    predict,
    save_checkpoint,
    save_history,
    train,
)

log = logging.getLogger("sefusion")

OUTPUT_ENV = "SEFUSION_OUTPUT_DIR"


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


@dataclass
class RunConfig:
    task: str | None = None
    data: str | None = None
    seed: int = 0
    batch_size: int = 256
    learning_rate: float = 1e-4
    epochs: int = 100
    n_layers: int | None = None  # None: 2 for A/B, 5 for C
    hidden_width: int = 64
    tau: float = 1.0
    biases: bool = True
    precision: str = "float32"
    smooth_prior: bool = False
    select_on: str = "accuracy"
    fusion: str = "sefusion"
    output_dir: str | None = None


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Flags override the config file, which overrides the defaults."""
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        unknown = set(values) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return RunConfig(**values)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sefusion", description="Squeeze-and-excitation fusion for meme emotion classification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic feature file")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, required=True, help="samples per split")
    p.add_argument("--n-validation", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--separability", type=float, default=1.0)
    p.add_argument("--proportions", default="uniform", help="'uniform', 'memotion' or comma-separated weights")
    p.add_argument("--text-dim", type=int, default=768)
    p.add_argument("--image-dim", type=int, default=512)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--out", help="output path (.gz for gzip)")

    p = sub.add_parser("train", help="train one sub-task")
    p.add_argument("--config", help="JSON file with run settings")
    p.add_argument("--task")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", "--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--layers", type=int, dest="n_layers")
    p.add_argument("--hidden-width", type=int, dest="hidden_width")
    p.add_argument("--tau", type=float)
    p.add_argument("--no-biases", action="store_const", const=False, dest="biases")
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--smooth-prior", action="store_const", const=True, dest="smooth_prior")
    p.add_argument("--select-on", choices=["accuracy", "weighted_f1"], dest="select_on")
    p.add_argument("--fusion", choices=["sefusion", "concat"])
    p.add_argument("--out-dir", dest="output_dir")

    p = sub.add_parser("eval", help="weighted-F1 of a checkpoint (or a task group)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--task", help="sub-task name for the report (C4 and B4 are interchangeable)")
    p.add_argument("--group", choices=["B", "C"])
    p.add_argument("--checkpoint-dir", help="directory holding <task>/checkpoint.json for --group")
    p.add_argument("--splits", nargs="+", choices=list(SPLITS))
    p.add_argument("--raw-logits", action="store_true", help="score without the prior term")
    p.add_argument("--out", help="report path")

    p = sub.add_parser("predict", help="per-record predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--raw-logits", action="store_true")
    p.add_argument("--out", help="predictions path (JSON lines); stdout if omitted")

    p = sub.add_parser("report", help="combine evaluation reports or raw scores")
    p.add_argument("reports", nargs="*")
    p.add_argument("--scores", type=_float_list, help="comma-separated weighted-F1 scores to average")
    p.add_argument("--out")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = get_task(args.task)
    sizes = {"train": args.n, "validation": args.n if args.n_validation is None else args.n_validation,
             "test": args.n if args.n_test is None else args.n_test}
    if args.proportions in ("uniform", "memotion"):
        props = args.proportions
    else:
        props = _float_list(args.proportions)
    ds = synth_dataset(args.seed, sizes, spec, args.separability, props, (args.text_dim, args.image_dim), args.noise)
    out = Path(args.out) if args.out else default_output_dir() / f"synth_{spec.id}_seed{args.seed}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(summarize(ds).format())
    print(f"wrote {len(ds)} records to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    if not cfg.task or not cfg.data:
        raise UsageError("train needs --task and --data (flags or config file)")
    spec = get_task(cfg.task)
    ds = load_dataset(cfg.data)
    head_cfg = HeadConfig(
        n_layers=cfg.n_layers or default_layers(spec),
        hidden_width=cfg.hidden_width,
        output_classes=spec.class_count,
    )
    fusion_cfg = FusionConfig(kind=cfg.fusion, biases=cfg.biases, dims=(ds.text_dim, ds.image_dim))
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.learning_rate,
        tau=cfg.tau,
        precision=cfg.precision,
        smooth_prior=cfg.smooth_prior,
        select_on=cfg.select_on,
    )
    model = train(ds, spec, fusion_cfg, head_cfg, train_cfg, seed=cfg.seed)

    out = Path(cfg.output_dir) if cfg.output_dir else default_output_dir()
    out = out / spec.id
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.json")
    save_history(model, out / "history.json")
    (out / "prior.json").write_text(json.dumps(model.prior.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if model.history:
        best = model.history[model.selected_epoch - 1]
        print(f"task {spec.id}: best epoch {best.epoch}, validation accuracy {best.val_accuracy:.4f}, weighted-F1 {best.val_weighted_f1:.4f}")
    else:
        print(f"task {spec.id}: no epochs run; saved the initialised model")
    print(f"wrote checkpoint to {out / 'checkpoint.json'}")
    return 0


def _check_compatible(model, ds, path):
    if (ds.text_dim, ds.image_dim) != model.dims:
        raise DataFormatError(f"checkpoint {path} expects feature widths {model.dims}, data has ({ds.text_dim}, {ds.image_dim})")


def _score_checkpoint(path, ds, splits, raw: bool, report: EvalReport, name: str | None = None):
    model = load_checkpoint(path)
    _check_compatible(model, ds, path)
    if name is not None and get_task(name).id != model.task.id:
        raise DataFormatError(f"checkpoint {path} was trained for task {model.task.id}, not {name}")
    key = name.upper() if name else model.task.id
    for s in splits:
        part = ds.split(s).labelled(model.task)
        if not len(part):
            raise UsageError(f"split {s!r} has no records labelled for task {model.task.id}")
        gold, pred = evaluate_split(model, part, adjusted=not raw)
        report.scores.setdefault(key, {})[s] = weighted_f1(gold, pred, model.task.class_count)
        report.accuracy.setdefault(key, {})[s] = accuracy(gold, pred)


def _group_checkpoint(directory: Path, task: str) -> Path:
    path = directory / task / "checkpoint.json"
    if not path.exists():
        alias = directory / get_task(task).id / "checkpoint.json"
        if alias.exists():
            return alias
        raise UsageError(f"no checkpoint for task {task} under {directory}")
    return path


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    splits = args.splits or ds.splits()
    if not splits:
        raise UsageError(f"{args.data} has no records to evaluate")
    missing = [s for s in splits if s not in ds.splits()]
    if missing:
        raise UsageError(f"split(s) {missing} are absent from {args.data}")
    report = EvalReport()
    if args.group:
        directory = Path(args.checkpoint_dir) if args.checkpoint_dir else default_output_dir()
        tasks = TASK_GROUPS[args.group]
        for t in tasks:
            _score_checkpoint(_group_checkpoint(directory, t), ds, splits, args.raw_logits, report, name=t)
        report.add_group_average(args.group, tasks)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --group")
        _score_checkpoint(args.checkpoint, ds, splits, args.raw_logits, report, name=args.task)
    print(report.format_table())
    if args.out:
        report.save(args.out)
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    lines = []
    if len(ds):
        _check_compatible(model, ds, args.checkpoint)
        xt, xi = ds.features()
        classes, probs = predict(model, xt, xi, adjusted=not args.raw_logits)
        names = model.task.label_names
        for rec, k, row in zip(ds, classes, probs):
            lines.append(json.dumps({"id": rec.id, "class": names[int(k)], "probabilities": [float(p) for p in row]}))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    if not args.reports and not args.scores:
        raise UsageError("report needs report files or --scores")
    if args.scores:
        print(f"average-weighted-F1: {average_weighted_f1(args.scores):.4f}")
    if args.reports:
        report = EvalReport()
        for path in args.reports:
            try:
                report.merge(EvalReport.load(path))
            except (OSError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"cannot read report {path}: {exc}") from None
        for group in ("B", "C"):
            tasks = TASK_GROUPS[group]
            if all(t in report.scores for t in tasks):
                report.add_group_average(group, tasks)
        print(report.format_table())
        if args.out:
            report.save(args.out)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except SEFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
