"""Training loop, ensemble inference, metrics, cross-validation, grad check.

Training operates on standardized slices; inference aggregates per-slice
softmax probabilities into one trial-level decision. Folds are assigned at
trial granularity so no trial's slices ever straddle the train/validation
boundary; ``run_cv`` audits that on every batch.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset, Slice, Trial, segment_and_standardize, stratified_trial_kfold
from .model import CamlpNet, ModelConfig
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


class SgdMomentum:
    """Heavy-ball SGD: v <- momentum*v + grad; theta <- theta - lr*v.

    ``step`` zeroes the gradients it consumed.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} has no gradient; run backward first")
            self.velocity[i] = self.momentum * self.velocity[i] + p.grad
            p.data = p.data - self.lr * self.velocity[i]
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    epoch_losses: list[float]
    seen_trial_ids: set[str]


def _slices_to_arrays(slices: list[Slice], dtype):
    x = np.stack([s.data for s in slices]).astype(dtype)
    y = np.array([s.label for s in slices], dtype=np.int64)
    ids = [s.trial_id for s in slices]
    return x, y, ids


def train_model(net: CamlpNet, slices: list[Slice], config: TrainConfig) -> TrainResult:
    """Seeded shuffle each epoch, minibatch cross-entropy, momentum SGD.

    Returns the mean loss per epoch and the set of trial ids that appeared
    in any training batch (for leakage audits).
    """
    if not slices:
        raise ValueError("training requires at least one slice")
    x_all, y_all, ids = _slices_to_arrays(slices, net.dtype)
    count = len(slices)
    rng = np.random.default_rng([config.seed, 1])
    opt = SgdMomentum(net.parameters(), config.lr, config.momentum)
    net.train()
    losses = []
    seen: set[str] = set()
    for _ in range(config.epochs):
        order = rng.permutation(count)
        total = 0.0
        for lo in range(0, count, config.batch_size):
            pick = order[lo:lo + config.batch_size]
            seen.update(ids[i] for i in pick)
            xb = Tensor.from_array(x_all[pick])
            loss = nn.softmax_cross_entropy(net(xb), y_all[pick])
            net.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(pick)
        losses.append(total / count)
    return TrainResult(epoch_losses=losses, seen_trial_ids=seen)


def predict_slices(net: CamlpNet, slices: list[Slice]) -> np.ndarray:
    """Eval-mode argmax prediction for each slice."""
    if net.training:
        raise ValueError("prediction requires the net in eval mode")
    x, _, _ = _slices_to_arrays(slices, net.dtype)
    logits = net(Tensor.from_array(x)).numpy()
    return logits.argmax(axis=1)


def ensemble_decision(slice_probs: np.ndarray) -> tuple[int, np.ndarray]:
    """Mean the per-slice probability rows; argmax ties break to the lowest
    class index."""
    mean = slice_probs.mean(axis=0)
    return int(mean.argmax()), mean


def ensemble_predict_trial(net: CamlpNet, trial: Trial, window: int,
                           overlap: int) -> tuple[int, np.ndarray]:
    """Trial decision: segment, standardize, average slice softmax outputs."""
    if net.training:
        raise ValueError("ensemble inference requires the net in eval mode")
    slices = segment_and_standardize(trial, window, overlap)
    x, _, _ = _slices_to_arrays(slices, net.dtype)
    logits = net(Tensor.from_array(x)).numpy()
    return ensemble_decision(nn.softmax_probs(logits))


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray  # rows = actual class, columns = predicted
    level: str


def compute_metrics(predictions, labels, num_classes: int, level: str) -> Metrics:
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ValueError(
            f"predictions and labels must be equal-length vectors, got "
            f"{preds.shape} vs {labs.shape}"
        )
    if preds.size == 0:
        raise ValueError("cannot compute metrics on empty inputs")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for a, p in zip(labs, preds):
        confusion[a, p] += 1
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    actual = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(num_classes), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes),
                   where=denom > 0)
    return Metrics(
        accuracy=float((preds == labs).mean()),
        macro_f1=float(f1.mean()),
        precision=precision,
        recall=recall,
        f1=f1,
        support=actual.astype(np.int64),
        confusion=confusion,
        level=level,
    )


@dataclass
class FoldResult:
    fold: int
    slice_metrics: Metrics
    trial_metrics: Metrics
    epoch_losses: list[float]
    train_trial_ids: set[str]
    val_trial_ids: set[str]


@dataclass
class CvResult:
    folds: list[FoldResult]
    summary: dict = field(default_factory=dict)

    def metric_values(self, level: str, name: str) -> np.ndarray:
        per_fold = [getattr(getattr(f, f"{level}_metrics"), name) for f in self.folds]
        return np.array(per_fold, dtype=np.float64)


def _summarize(result: CvResult) -> None:
    for level in ("slice", "trial"):
        for name in ("accuracy", "macro_f1"):
            vals = result.metric_values(level, name)
            result.summary[f"{level}_{name}_mean"] = float(vals.mean())
            # sample std across folds, matching the usual "mean +/- std" report
            result.summary[f"{level}_{name}_std"] = (
                float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            )


def run_cv(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
           k: int, window: int, overlap: int, fold_seed: int = 0) -> CvResult:
    """Trial-stratified k-fold: train on k-1 folds' slices, score the held-out
    fold at slice level and trial level (ensemble)."""
    plan = stratified_trial_kfold(dataset.trials, k, fold_seed)
    by_id = {t.id: t for t in dataset.trials}
    folds = []
    for fold in range(k):
        val_ids = set(plan.fold_trial_ids(fold))
        train_slices = []
        for trial in dataset.trials:
            if trial.id not in val_ids:
                train_slices.extend(segment_and_standardize(trial, window, overlap))
        fold_seed = train_config.seed * 1000 + fold
        net = CamlpNet(model_config, seed=fold_seed, dtype=train_config.dtype)
        fold_cfg = replace(train_config, seed=fold_seed)
        outcome = train_model(net, train_slices, fold_cfg)
        if outcome.seen_trial_ids & val_ids:
            raise RuntimeError(
                f"fold {fold}: validation trials leaked into training batches"
            )
        net.eval()
        val_slices, trial_preds, trial_labels = [], [], []
        for tid in sorted(val_ids):
            trial = by_id[tid]
            val_slices.extend(segment_and_standardize(trial, window, overlap))
            pred, _ = ensemble_predict_trial(net, trial, window, overlap)
            trial_preds.append(pred)
            trial_labels.append(trial.label)
        slice_preds = predict_slices(net, val_slices)
        slice_labels = [s.label for s in val_slices]
        folds.append(
            FoldResult(
                fold=fold,
                slice_metrics=compute_metrics(
                    slice_preds, slice_labels, dataset.num_classes, "slice"),
                trial_metrics=compute_metrics(
                    trial_preds, trial_labels, dataset.num_classes, "trial"),
                epoch_losses=outcome.epoch_losses,
                train_trial_ids=outcome.seen_trial_ids,
                val_trial_ids=val_ids,
            )
        )
    result = CvResult(folds=folds)
    _summarize(result)
    return result


# -- gradient checking ------------------------------------------------------

TINY_CONFIG = ModelConfig(
    channels=4, slice_len=18, kernel_size=3, base_filters=2, num_blocks=1,
    channel_hidden=8, time_hidden=6, num_classes=3,
)


@dataclass
class GradCheckGroup:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    groups: list[GradCheckGroup]
    tolerance: float
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    """max |a-n| / max(|a|, |n|, floor); the floor keeps noise on tiny
    gradients from registering as relative error."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_check(config: ModelConfig = TINY_CONFIG, tolerance: float = 1e-4,
               seed: int = 0, batch: int = 3, h: float = 1e-5) -> GradCheckReport:
    """Compare every parameter group's analytic gradient against central
    finite differences of the cross-entropy loss, in float64."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    net = CamlpNet(config, seed=seed, dtype=np.float64)
    net.train()
    x = rng.standard_normal((batch, config.channels, config.slice_len))
    targets = rng.integers(0, config.num_classes, size=batch)

    def loss_value() -> float:
        return nn.softmax_cross_entropy(net(Tensor.from_array(x)), targets).item()

    net.zero_grad()
    loss = nn.softmax_cross_entropy(net(Tensor.from_array(x)), targets)
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in net.named_parameters()}

    groups = []
    for name, p in net.named_parameters():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value()
            flat[i] = keep - h
            down = loss_value()
            flat[i] = keep
            num_flat[i] = (up - down) / (2 * h)
        err = _rel_err(analytic[name], numeric, floor=1e-4)
        groups.append(GradCheckGroup(name=name, max_rel_err=err, passed=err < tolerance))
    return GradCheckReport(
        groups=groups, tolerance=tolerance, elapsed_s=time.perf_counter() - start
    )


# -- emission ---------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_metrics_csv(path, result: CvResult, num_classes: int) -> None:
    """Per-fold rows for both levels, then mean/std summary rows."""
    cols = ["fold", "level", "accuracy", "macro_f1"]
    for c in range(num_classes):
        cols += [f"precision_{c}", f"recall_{c}", f"f1_{c}", f"support_{c}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for fr in result.folds:
            for m in (fr.slice_metrics, fr.trial_metrics):
                row = [fr.fold, m.level, _fmt(m.accuracy), _fmt(m.macro_f1)]
                for c in range(num_classes):
                    row += [_fmt(m.precision[c]), _fmt(m.recall[c]),
                            _fmt(m.f1[c]), int(m.support[c])]
                writer.writerow(row)
        for level in ("slice", "trial"):
            for stat in ("mean", "std"):
                writer.writerow(
                    [stat, level,
                     _fmt(result.summary[f"{level}_accuracy_{stat}"]),
                     _fmt(result.summary[f"{level}_macro_f1_{stat}"])]
                    + [""] * (4 * num_classes)
                )


def write_loss_curve_csv(path, losses_by_fold: dict[int, list[float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "epoch", "loss"])
        for fold in sorted(losses_by_fold):
            for epoch, loss in enumerate(losses_by_fold[fold]):
                writer.writerow([fold, epoch, _fmt(loss)])


def format_summary(result: CvResult) -> str:
    """Human-readable table mirroring the mean +/- std reporting convention."""
    lines = ["level    accuracy (%)      macro F1 (%)"]
    for level in ("slice", "trial"):
        acc_m = result.summary[f"{level}_accuracy_mean"] * 100
        acc_s = result.summary[f"{level}_accuracy_std"] * 100
        f1_m = result.summary[f"{level}_macro_f1_mean"] * 100
        f1_s = result.summary[f"{level}_macro_f1_std"] * 100
        lines.append(
            f"{level:<8} {acc_m:6.2f} ± {acc_s:<8.2f} {f1_m:6.2f} ± {f1_s:.2f}"
        )
    return "\n".join(lines)
