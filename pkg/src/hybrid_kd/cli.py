"""Command line entry point: ``python -m hybrid_kd <command> [flags]``."""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .csp import fit_csp_lda_pipeline
from .data import SyntheticConfig, generate_synthetic_dataset, load_dataset, loso_split, save_dataset
from .harness import (
    EvaluationReport,
    Split,
    TrainConfig,
    distill_student,
    evaluate,
    run_loso,
    train_student_no_kd,
    train_teacher,
    write_report,
)
from .models import TeacherModel, load_checkpoint, save_checkpoint

log = logging.getLogger("hybrid_kd")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", type=Path, help="dataset directory with manifest.txt; generated from the flags when absent")
    p.add_argument("--out", type=Path, default=Path("out"), help="output root (a timestamped run directory is created)")
    p.add_argument("--run-name", help="run directory name instead of a timestamp")
    p.add_argument("--seed", type=int, default=0, help="master seed for data, splits and initialization")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--temperature", type=float, default=4.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--trials-per-paradigm", type=int, default=80)
    p.add_argument("--class-separation", type=float, default=1.0)
    p.add_argument("--teacher-fraction", type=float, default=1.0)
    p.add_argument("--held-out", type=int, default=0, help="test subject for single-fold commands")
    p.add_argument("--workers", type=int, default=1, help="parallel LOSO folds")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-kd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {
        "gen-data": "generate a synthetic dataset into --data-dir",
        "train-teacher": "train the hierarchical teacher on one LOSO fold",
        "distill": "distill a student from a teacher checkpoint",
        "train-plain": "train the student without distillation",
        "evaluate": "score a checkpoint (or the CSP+LDA baseline) on the held-out subject",
        "loso": "full leave-one-subject-out run of all models",
        "grad-check": "finite-difference audit of ops and losses",
    }
    for name, text in cmds.items():
        p = sub.add_parser(name, help=text, description=text)
        _shared(p)
        if name == "distill":
            p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
        if name == "evaluate":
            group = p.add_mutually_exclusive_group(required=True)
            group.add_argument("--checkpoint", type=Path)
            group.add_argument("--csp-lda", action="store_true", help="fit and score the CSP+LDA baseline")
        if name == "grad-check":
            p.add_argument("--instances", type=int, default=20)
    return parser


def _data_config(args) -> SyntheticConfig:
    return SyntheticConfig(n_subjects=args.subjects, trials_per_paradigm=args.trials_per_paradigm,
                           class_separation=args.class_separation, master_seed=args.seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, patience=args.patience,
                       temperature=args.temperature, lam=args.lam, teacher_fraction=args.teacher_fraction,
                       seed=args.seed)


def _trials(args):
    if args.data_dir is not None and (args.data_dir / "manifest.txt").exists():
        return load_dataset(args.data_dir)
    return generate_synthetic_dataset(_data_config(args))


def _run_dir(args) -> Path:
    name = args.run_name or dt.datetime.now().strftime("%Y%m%dT%H%M%S")
    path = args.out / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fold(args):
    train, valid, test = loso_split(_trials(args), args.held_out, seed=args.seed)
    return train, valid, test


def _save_history(run, path: Path) -> None:
    rows = ["epoch,train_loss,valid_loss"]
    rows += [f"{i},{a:.6f},{b:.6f}" for i, (a, b) in enumerate(zip(run.train_loss, run.valid_loss))]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def cmd_gen_data(args) -> int:
    if args.data_dir is None:
        raise ValueError("gen-data needs --data-dir")
    trials = generate_synthetic_dataset(_data_config(args))
    manifest = save_dataset(trials, args.data_dir)
    print(f"wrote {len(trials)} trials, manifest {manifest}")
    return 0


def _train_and_save(args, name: str, trainer) -> int:
    train, valid, _ = _fold(args)
    run, model = trainer(Split.of(train), Split.of(valid), _train_config(args))
    out = _run_dir(args)
    save_checkpoint(model, out / f"{name}.hkdm")
    _save_history(run, out / f"{name}_history.csv")
    print(f"{name}: {run.stop_epoch} epochs, best {run.best_epoch}, checkpoint {out / f'{name}.hkdm'}")
    return 0


def cmd_train_teacher(args) -> int:
    return _train_and_save(args, "teacher", train_teacher)


def cmd_distill(args) -> int:
    teacher = load_checkpoint(args.teacher)
    if not isinstance(teacher, TeacherModel):
        raise ValueError(f"{args.teacher} is not a teacher checkpoint")
    return _train_and_save(args, "student_kd", lambda tr, va, cfg: distill_student(teacher, tr, va, cfg))


def cmd_train_plain(args) -> int:
    return _train_and_save(args, "student_plain", train_student_no_kd)


def cmd_evaluate(args) -> int:
    train, valid, test = _fold(args)
    if args.csp_lda:
        name, model = "csp_lda", fit_csp_lda_pipeline(train + valid)
    else:
        model = load_checkpoint(args.checkpoint)
        name = args.checkpoint.stem
    fold = evaluate(model, test, args.held_out)
    path = write_report({name: EvaluationReport(name, [fold])}, _run_dir(args), _data_config(args), _train_config(args))
    print(f"{name}: paradigm {fold.paradigm_acc:.4f} class {fold.class_acc:.4f} -> {path}")
    return 0


def cmd_loso(args) -> int:
    trials = _trials(args)
    reports, _ = run_loso(_data_config(args), _train_config(args), trials=trials, workers=args.workers)
    path = write_report(reports, _run_dir(args), _data_config(args), _train_config(args))
    for name, rep in reports.items():
        print(f"{name:14s} paradigm {rep.paradigm_mean:.4f} ({rep.paradigm_std:.4f})  "
              f"class {rep.class_mean:.4f} ({rep.class_std:.4f})")
    print(f"report: {path}")
    return 0


def cmd_grad_check(args) -> int:
    report = gradcheck.run_all(args.instances)
    bad = 0
    for name, err in report.items():
        ok = err <= gradcheck.TOLERANCE
        bad += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:32s} max rel err {err:.3e}")
    return 1 if bad else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-plain": cmd_train_plain,
    "evaluate": cmd_evaluate,
    "loso": cmd_loso,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError, KeyError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"hybrid-kd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
