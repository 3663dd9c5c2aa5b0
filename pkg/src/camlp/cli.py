"""Command-line entry point.

Subcommands: synth, segment, train, eval, cv, sweep-blocks, gradcheck.
Configuration resolves in three layers (defaults, then config file, then
flags; rightmost wins) and the fully-resolved config is echoed into the
output directory so any run can be reproduced from it alone.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import data as data_mod
from . import train as train_mod
from .model import CamlpNet, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig


@dataclass
class RunConfig:
    data: str = ""
    out: str = ""
    model: str = ""
    seed: int = 0
    folds: int = 5
    epochs: int = 100
    lr: float = 0.001
    momentum: float = 0.9
    batch: int = 64
    blocks: int = 4
    window: int = 150
    overlap: int = 10
    precision: int = 32
    kernel_size: int = 3
    base_filters: int = 4
    channel_hidden: int = 256
    time_hidden: int = 128
    relu_slope: float = 0.01
    min_blocks: int = 1
    max_blocks: int = 6
    synth_channels: int = 16
    trials_per_class: int = 20
    noise_std: float = 0.25


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PARSERS = {"int": int, "float": float, "str": str}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        return _PARSERS[kind](raw)
    except (ValueError, TypeError):
        raise ValueError(f"config key {key!r} expects {kind}, got {raw!r}") from None


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(key, raw)
    return values


def resolve_config(file_path: str | None, flags: dict) -> RunConfig:
    """defaults, then file, then flags; rightmost wins; strict keys."""
    cfg = RunConfig()
    layers = []
    if file_path:
        layers.append(parse_config_file(file_path))
    layers.append(flags)
    for layer in layers:
        for key, value in layer.items():
            if key not in _FIELD_TYPES:
                raise ValueError(f"unknown config key {key!r}")
            if value is not None:
                setattr(cfg, key, value)
    if cfg.precision not in (32, 64):
        raise ValueError(f"config key 'precision' must be 32 or 64, got {cfg.precision}")
    return cfg


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> None:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if value == "":
            continue
        lines.append(f"{f.name} = {value}")
    (out_dir / "config.ini").write_text("\n".join(lines) + "\n")


def _model_config(cfg: RunConfig, dataset: data_mod.Dataset,
                  blocks: int | None = None) -> ModelConfig:
    return ModelConfig(
        channels=dataset.channels,
        slice_len=cfg.window,
        kernel_size=cfg.kernel_size,
        base_filters=cfg.base_filters,
        num_blocks=blocks if blocks is not None else cfg.blocks,
        channel_hidden=cfg.channel_hidden,
        time_hidden=cfg.time_hidden,
        num_classes=dataset.num_classes,
        relu_slope=cfg.relu_slope,
    )


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr,
        momentum=cfg.momentum,
        batch_size=cfg.batch,
        epochs=cfg.epochs,
        seed=cfg.seed,
        precision=cfg.precision,
    )


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ValueError("this subcommand requires --out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    return out


def _load_data(cfg: RunConfig) -> data_mod.Dataset:
    if not cfg.data:
        raise ValueError("this subcommand requires --data")
    return data_mod.load_dataset(cfg.data)


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    spec = data_mod.default_synth_spec(
        trials_per_class=cfg.trials_per_class,
        channels=cfg.synth_channels,
        noise_std=cfg.noise_std,
        seed=cfg.seed,
    )
    dataset = data_mod.synth_generate(spec)
    data_mod.save_dataset(dataset, out)
    print(f"wrote {len(dataset.trials)} trials "
          f"({dataset.channels} channels x {dataset.raw_len} samples) to {out}")
    return 0


def cmd_segment(cfg: RunConfig) -> int:
    dataset = _load_data(cfg)
    out = _out_dir(cfg)
    rows = 0
    with open(out / "slices.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial_id", "label", "slice_index", "start"])
        for trial in dataset.trials:
            slices = data_mod.sliding_window_segment(trial, cfg.window, cfg.overlap)
            for i, sl in enumerate(slices):
                writer.writerow([sl.trial_id, sl.label, i, sl.start])
                rows += 1
    print(f"{rows} slices from {len(dataset.trials)} trials "
          f"(window {cfg.window}, overlap {cfg.overlap})")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    dataset = _load_data(cfg)
    out = _out_dir(cfg)
    slices = []
    for trial in dataset.trials:
        slices.extend(data_mod.segment_and_standardize(trial, cfg.window, cfg.overlap))
    tc = _train_config(cfg)
    net = CamlpNet(_model_config(cfg, dataset), seed=cfg.seed, dtype=tc.dtype)
    result = train_mod.train_model(net, slices, tc)
    save_checkpoint(net, out / "model.camlp")
    train_mod.write_loss_curve_csv(out / "loss_curve.csv", {0: result.epoch_losses})
    print(f"trained {cfg.epochs} epochs on {len(slices)} slices; "
          f"final loss {result.epoch_losses[-1]:.4f}; model saved to "
          f"{out / 'model.camlp'}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.model:
        raise ValueError("eval requires --model pointing at a checkpoint")
    dataset = _load_data(cfg)
    out = _out_dir(cfg)
    net = load_checkpoint(cfg.model)
    preds, labels = [], []
    slice_preds, slice_labels = [], []
    for trial in dataset.trials:
        pred, _ = train_mod.ensemble_predict_trial(net, trial, cfg.window, cfg.overlap)
        preds.append(pred)
        labels.append(trial.label)
        slices = data_mod.segment_and_standardize(trial, cfg.window, cfg.overlap)
        slice_preds.extend(train_mod.predict_slices(net, slices))
        slice_labels.extend(s.label for s in slices)
    trial_m = train_mod.compute_metrics(preds, labels, dataset.num_classes, "trial")
    slice_m = train_mod.compute_metrics(
        slice_preds, slice_labels, dataset.num_classes, "slice")
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "accuracy", "macro_f1"])
        for m in (slice_m, trial_m):
            writer.writerow([m.level, repr(m.accuracy), repr(m.macro_f1)])
    print(f"trial accuracy {trial_m.accuracy * 100:.2f}%  "
          f"macro F1 {trial_m.macro_f1 * 100:.2f}%  "
          f"(slice accuracy {slice_m.accuracy * 100:.2f}%)")
    return 0


def cmd_cv(cfg: RunConfig) -> int:
    dataset = _load_data(cfg)
    out = _out_dir(cfg)
    result = train_mod.run_cv(
        dataset, _model_config(cfg, dataset), _train_config(cfg),
        k=cfg.folds, window=cfg.window, overlap=cfg.overlap, fold_seed=cfg.seed,
    )
    train_mod.write_metrics_csv(out / "metrics.csv", result, dataset.num_classes)
    train_mod.write_loss_curve_csv(
        out / "loss_curves.csv",
        {fr.fold: fr.epoch_losses for fr in result.folds},
    )
    print(train_mod.format_summary(result))
    return 0


def cmd_sweep_blocks(cfg: RunConfig) -> int:
    dataset = _load_data(cfg)
    out = _out_dir(cfg)
    if cfg.min_blocks < 1 or cfg.max_blocks < cfg.min_blocks:
        raise ValueError(
            f"invalid sweep range [{cfg.min_blocks}, {cfg.max_blocks}]"
        )
    rows = []
    for blocks in range(cfg.min_blocks, cfg.max_blocks + 1):
        result = train_mod.run_cv(
            dataset, _model_config(cfg, dataset, blocks=blocks), _train_config(cfg),
            k=cfg.folds, window=cfg.window, overlap=cfg.overlap, fold_seed=cfg.seed,
        )
        rows.append((
            blocks,
            result.summary["trial_accuracy_mean"],
            result.summary["trial_accuracy_std"],
            result.summary["trial_macro_f1_mean"],
            result.summary["trial_macro_f1_std"],
        ))
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["blocks", "trial_accuracy_mean", "trial_accuracy_std",
                         "trial_macro_f1_mean", "trial_macro_f1_std"])
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    print("blocks  accuracy (%)")
    for blocks, acc_m, acc_s, _, _ in rows:
        print(f"{blocks:>6}  {acc_m * 100:6.2f} ± {acc_s * 100:.2f}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = train_mod.grad_check()
    for g in report.groups:
        status = "pass" if g.passed else "FAIL"
        print(f"{status}  {g.name:<40} max rel err {g.max_rel_err:.3e}")
    print(f"{'all groups pass' if report.passed else 'FAILURES present'} "
          f"(tolerance {report.tolerance:g}, {report.elapsed_s:.1f}s)")
    return 0 if report.passed else 1


_COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "sweep-blocks": cmd_sweep_blocks,
    "gradcheck": cmd_gradcheck,
}

_FLAG_DESTS = (
    "data", "out", "model", "seed", "folds", "epochs", "lr", "momentum",
    "batch", "blocks", "window", "overlap", "precision",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camlp",
        description="Channel-attention MLP-mixer for multi-channel EEG decoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--out", help="output directory for artifacts")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--blocks", type=int)
        p.add_argument("--window", type=int)
        p.add_argument("--overlap", type=int)
        p.add_argument("--precision", type=int, choices=(32, 64))

    for name, help_text in (
        ("synth", "generate a synthetic dataset directory"),
        ("segment", "report the sliding-window segmentation of a dataset"),
        ("train", "train one model on every trial and save a checkpoint"),
        ("eval", "score a saved checkpoint on a dataset"),
        ("cv", "trial-stratified k-fold cross-validation"),
        ("sweep-blocks", "cross-validate across a range of block counts"),
        ("gradcheck", "verify analytic gradients against finite differences"),
    ):
        p = sub.add_parser(name, help=help_text)
        common(p)
        if name == "synth":
            p.add_argument("--trials-per-class", dest="trials_per_class", type=int)
            p.add_argument("--synth-channels", dest="synth_channels", type=int)
            p.add_argument("--noise-std", dest="noise_std", type=float)
        if name == "eval":
            p.add_argument("--model", help="checkpoint file written by train")
        if name == "sweep-blocks":
            p.add_argument("--min", dest="min_blocks", type=int)
            p.add_argument("--max", dest="max_blocks", type=int)
    return parser


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config") and value is not None
    }
    try:
        cfg = resolve_config(args.config, flags)
        return _COMMANDS[args.command](cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
