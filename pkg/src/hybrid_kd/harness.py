"""Teacher training, distillation, the no-distillation control, evaluation and LOSO runs."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .csp import CspLdaPipeline, fit_csp_lda_pipeline
from .data import LabeledTrial, SyntheticConfig, generate_synthetic_dataset, loso_split, network_input, stack
from .losses import MI, N_MI, DistillationConfig, cross_entropy, distillation_loss, hierarchical_loss
from .models import ArchConfig, StudentModel, TeacherModel, teacher_predict
from .optim import AdamW, EarlyStopper
from .tensor import Tensor

log = logging.getLogger(__name__)

MODEL_KINDS = ("teacher", "student_kd", "student_plain", "csp_lda")
MAX_EPOCHS = 200


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = MAX_EPOCHS
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 5
    weight_decay: float = 0.01
    temperature: float = 4.0
    lam: float = 1.0
    teacher_fraction: float = 1.0
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if not 0 <= self.epochs <= MAX_EPOCHS:
            raise ValueError(f"epochs must be in [0, {MAX_EPOCHS}]")
        if not 0 < self.teacher_fraction <= 1:
            raise ValueError("teacher_fraction must be in (0, 1]")

    @property
    def distillation(self) -> DistillationConfig:
        return DistillationConfig(self.temperature, self.lam)


@dataclass
class TrainingRun:
    config: TrainConfig
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = -1
    checkpoint: str | None = None


@dataclass
class Split:
    x: np.ndarray  # z-scored network input (n, 1, 24, 1000)
    paradigm: np.ndarray
    cls: np.ndarray
    joint: np.ndarray
    subject: np.ndarray
    raw: np.ndarray | None = None  # unnormalized samples for the CSP baseline

    @classmethod
    def of(cls, trials: Sequence[LabeledTrial]) -> "Split":
        raw, paradigm, c, joint, subject = stack(trials)
        return cls(network_input(trials), paradigm, c, joint, subject, raw)

    def __len__(self):
        return len(self.joint)


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def _fit(model, train: Split, valid: Split, cfg: TrainConfig,
         batch_loss: Callable[[object, Split, np.ndarray], Tensor]) -> TrainingRun:
    """Mini-batch AdamW with early stopping on the validation loss; restores the best parameters."""
    run = TrainingRun(cfg)
    if cfg.epochs == 0:
        return run
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        total = 0.0
        for b, idx in enumerate(_batches(len(train), cfg.batch_size, order)):
            opt.zero_grad()
            loss = batch_loss(model, train, idx)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} batch {b}")
            T.backward(loss)
            opt.step()
            total += value * len(idx)
        run.train_loss.append(total / len(train))
        with T.no_grad():
            vloss = sum(float(batch_loss(model, valid, idx).data) * len(idx)
                        for idx in _batches(len(valid), cfg.eval_batch_size)) / len(valid)
        if not np.isfinite(vloss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        run.valid_loss.append(vloss)
        run.stop_epoch = epoch + 1
        log.debug("epoch %d train %.4f valid %.4f", epoch, run.train_loss[-1], vloss)
        stop = stopper.update(vloss, {n: p.data for n, p in params.items()})
        if stop:
            break
    run.best_epoch = stopper.best_epoch
    model.load_state_dict(stopper.best_parameters)
    return run


def _teacher_loss(model: TeacherModel, split: Split, idx: np.ndarray) -> Tensor:
    out = model.forward(Tensor(split.x[idx]), 1.0)
    return hierarchical_loss(out.paradigm_probs, out.mi_probs, out.si_probs, split.paradigm[idx], split.cls[idx]).total


def _subsample(split: Split, fraction: float, seed: int) -> Split:
    if fraction >= 1.0:
        return split
    n = max(1, int(round(fraction * len(split))))
    idx = np.sort(np.random.default_rng([seed, 7]).permutation(len(split))[:n])
    return Split(split.x[idx], split.paradigm[idx], split.cls[idx], split.joint[idx], split.subject[idx],
                  None if split.raw is None else split.raw[idx])


def _as_split(data) -> Split:
    return data if isinstance(data, Split) else Split.of(data)


def train_teacher(train, valid, cfg: TrainConfig = TrainConfig(), arch: ArchConfig = ArchConfig()):
    """Train the hierarchical teacher on the gated three-term loss. Returns (run, model)."""
    train, valid = _as_split(train), _as_split(valid)
    if len(train) == 0 or len(valid) == 0 or len(np.unique(train.paradigm)) < 2:
        raise ValueError("teacher training needs non-empty sets covering both paradigms")
    model = TeacherModel(seed=cfg.seed, arch=arch)
    run = _fit(model, _subsample(train, cfg.teacher_fraction, cfg.seed), valid, cfg, _teacher_loss)
    return run, model


def teacher_soft_targets(teacher: TeacherModel, x: np.ndarray, temperature: float, batch_size: int = 64) -> np.ndarray:
    """Composite 8-way teacher distribution with the temperature inside every softmax."""
    with T.no_grad():
        parts = [teacher.forward(Tensor(x[idx]), temperature).composite8.data
                 for idx in _batches(len(x), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, 8), dtype=x.dtype)


def distill_student(teacher: TeacherModel, train, valid, cfg: TrainConfig = TrainConfig(), arch: ArchConfig = ArchConfig()):
    """Train the student on the distillation objective against a frozen teacher. Returns (run, model)."""
    train, valid = _as_split(train), _as_split(valid)
    kd = cfg.distillation
    soft = {id(train): teacher_soft_targets(teacher, train.x, kd.temperature, cfg.eval_batch_size),
            id(valid): teacher_soft_targets(teacher, valid.x, kd.temperature, cfg.eval_batch_size)}

    def loss(model, split, idx):
        logits, _ = model.forward(Tensor(split.x[idx]), 1.0)
        return distillation_loss(logits, soft[id(split)][idx], split.joint[idx], kd)

    model = StudentModel(seed=cfg.seed + 1, arch=arch)
    return _fit(model, train, valid, cfg, loss), model


def train_student_no_kd(train, valid, cfg: TrainConfig = TrainConfig(), arch: ArchConfig = ArchConfig()):
    """Same student, same initialization and budget, plain 8-way cross-entropy. Returns (run, model)."""
    train, valid = _as_split(train), _as_split(valid)

    def loss(model, split, idx):
        _, probs = model.forward(Tensor(split.x[idx]), 1.0)
        return cross_entropy(probs, split.joint[idx]).mean()

    model = StudentModel(seed=cfg.seed + 1, arch=arch)
    return _fit(model, train, valid, cfg, loss), model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Predictions:
    paradigm: np.ndarray
    joint: np.ndarray


@dataclass
class FoldScore:
    subject: int
    paradigm_acc: float
    class_acc: float


def predict(model, split, batch_size: int = 64) -> Predictions:
    """Paradigm and joint 8-way decisions for any of the three model kinds.

    Teacher: paradigm from the shared module, class from the branch that
    paradigm selects.  Student: both read off the 8-way argmax.
    """
    split = _as_split(split)
    if isinstance(model, CspLdaPipeline):
        paradigm, _, joint = model.predict(split.raw.astype(np.float64))
        return Predictions(paradigm, joint)
    x = split.x
    paradigm, joint = [], []
    with T.no_grad():
        for idx in _batches(len(x), batch_size):
            xb = Tensor(x[idx])
            if isinstance(model, TeacherModel):
                pred = teacher_predict(model.forward(xb, 1.0))
                paradigm.append(pred.paradigm)
                joint.append(np.where(pred.paradigm == MI, pred.class_index, N_MI + pred.class_index))
            elif isinstance(model, StudentModel):
                _, probs = model.forward(xb, 1.0)
                j = np.argmax(probs.data, axis=-1)
                joint.append(j)
                paradigm.append((j >= N_MI).astype(np.int64))
            else:
                raise TypeError(f"cannot evaluate {type(model).__name__}")
    return Predictions(np.concatenate(paradigm), np.concatenate(joint))


def score(pred: Predictions, paradigm: np.ndarray, joint: np.ndarray) -> tuple[float, float]:
    if len(joint) == 0:
        raise ValueError("empty test set")
    return float(np.mean(pred.paradigm == paradigm)), float(np.mean(pred.joint == joint))


def chance_accuracy(predicted: np.ndarray, truth: np.ndarray, n_classes: int = 8) -> float:
    """Accuracy expected from a predictor independent of the input with the same output marginal."""
    q = np.bincount(predicted, minlength=n_classes) / len(predicted)
    pi = np.bincount(truth, minlength=n_classes) / len(truth)
    return float(q @ pi)


def evaluate(model, test, subject: int = -1) -> FoldScore:
    """Paradigm accuracy and exact joint-class accuracy on a test set."""
    test = _as_split(test)
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = predict(model, test)
    p, c = score(pred, test.paradigm, test.joint)
    return FoldScore(subject, p, c)


@dataclass
class EvaluationReport:
    model: str
    per_subject: list[FoldScore] = field(default_factory=list)

    def _col(self, name):
        return np.array([getattr(f, name) for f in self.per_subject], dtype=np.float64)

    @property
    def paradigm_mean(self) -> float:
        return float(self._col("paradigm_acc").mean())

    @property
    def paradigm_std(self) -> float:
        return float(self._col("paradigm_acc").std())

    @property
    def class_mean(self) -> float:
        return float(self._col("class_acc").mean())

    @property
    def class_std(self) -> float:
        return float(self._col("class_acc").std())


# ---------------------------------------------------------------------------
# leave-one-subject-out


@dataclass
class FoldResult:
    subject: int
    scores: dict[str, FoldScore]
    predictions: dict[str, Predictions]
    truth_paradigm: np.ndarray
    truth_joint: np.ndarray
    runs: dict[str, TrainingRun]


def run_fold(trials: Sequence[LabeledTrial], subject: int, cfg: TrainConfig, arch: ArchConfig = ArchConfig(),
             models: Sequence[str] = MODEL_KINDS) -> FoldResult:
    train_t, valid_t, test_t = loso_split(trials, subject, seed=cfg.seed)
    for t in (*train_t, *valid_t):
        assert t.subject_id != subject, "held-out subject leaked into training data"
    train, valid, test = Split.of(train_t), Split.of(valid_t), Split.of(test_t)
    fitted, runs = {}, {}
    if "teacher" in models or "student_kd" in models:
        runs["teacher"], fitted["teacher"] = train_teacher(train, valid, cfg, arch)
    if "student_kd" in models:
        runs["student_kd"], fitted["student_kd"] = distill_student(fitted["teacher"], train, valid, cfg, arch)
    if "student_plain" in models:
        runs["student_plain"], fitted["student_plain"] = train_student_no_kd(train, valid, cfg, arch)
    if "csp_lda" in models:
        fitted["csp_lda"] = fit_csp_lda_pipeline(train_t + valid_t)
    scores, preds = {}, {}
    for name in models:
        preds[name] = predict(fitted[name], test)
        p, c = score(preds[name], test.paradigm, test.joint)
        scores[name] = FoldScore(subject, p, c)
        log.info("subject %d %-13s paradigm %.3f class %.3f", subject, name, p, c)
    return FoldResult(subject, scores, preds, test.paradigm, test.joint, runs)


def _fold_worker(args):
    return run_fold(*args)


def run_loso(data_cfg: SyntheticConfig = SyntheticConfig(), cfg: TrainConfig = TrainConfig(),
             trials: Sequence[LabeledTrial] | None = None, subjects: Sequence[int] | None = None,
             models: Sequence[str] = MODEL_KINDS, arch: ArchConfig = ArchConfig(),
             workers: int = 1) -> tuple[dict[str, EvaluationReport], list[FoldResult]]:
    """Evaluate every model on every held-out subject. Folds may run in worker processes."""
    if trials is None:
        trials = generate_synthetic_dataset(data_cfg)
    if subjects is None:
        subjects = sorted({t.subject_id for t in trials})
    jobs = [(trials, s, cfg, arch, tuple(models)) for s in subjects]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_fold_worker, jobs))
    else:
        folds = []
        for job in jobs:
            try:
                folds.append(_fold_worker(job))
            except Exception as exc:
                raise RuntimeError(f"fold for subject {job[1]} failed: {exc}") from exc
    reports = {m: EvaluationReport(m, [f.scores[m] for f in folds]) for m in models}
    return reports, folds


def default_workers() -> int:
    return max(1, min(len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1, 10))


def report_csv(reports: dict[str, EvaluationReport]) -> str:
    """CSV with one row per (model, subject) and ``mean`` / ``std`` summary rows per model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "subject", "paradigm_acc", "class_acc"])
    for name, rep in reports.items():
        for f in rep.per_subject:
            w.writerow([name, f.subject, f"{f.paradigm_acc:.6f}", f"{f.class_acc:.6f}"])
    for name, rep in reports.items():
        w.writerow([name, "mean", f"{rep.paradigm_mean:.6f}", f"{rep.class_mean:.6f}"])
        w.writerow([name, "std", f"{rep.paradigm_std:.6f}", f"{rep.class_std:.6f}"])
    return buf.getvalue()


def write_report(reports: dict[str, EvaluationReport], run_dir, data_cfg: SyntheticConfig | None = None,
                 cfg: TrainConfig | None = None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "report.csv"
    path.write_text(report_csv(reports), encoding="utf-8")
    lines = []
    for label, obj in (("data", data_cfg), ("train", cfg)):
        if obj is not None:
            lines.extend(f"{label}.{k} = {v}" for k, v in asdict(obj).items())
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
