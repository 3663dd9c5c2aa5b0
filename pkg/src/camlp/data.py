"""Dataset handling: ingestion, sliding windows, standardization, folds.

A dataset directory holds ``manifest.json`` plus one raw file per trial
(little-endian float32, row-major channels x raw_len, no header). All
operations here are pure and deterministic given their seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS_STD = 1e-8


@dataclass
class Trial:
    """One raw recording: [channels, raw_len] float32 with a class label."""

    id: str
    label: int
    samples: np.ndarray


@dataclass
class Slice:
    """A fixed-length window cut from a trial; inherits the trial label."""

    trial_id: str
    label: int
    data: np.ndarray
    start: int = 0


@dataclass
class Dataset:
    num_classes: int
    channels: int
    raw_len: int
    sample_rate_hz: float
    trials: list[Trial] = field(default_factory=list)


@dataclass(frozen=True)
class FoldPlan:
    """Trial-level fold assignment; every trial appears in exactly one fold."""

    k: int
    assignment: dict
    seed: int

    def fold_trial_ids(self, fold: int) -> list[str]:
        return sorted(t for t, f in self.assignment.items() if f == fold)


@dataclass(frozen=True)
class ClassSignature:
    """Synthetic class fingerprint: a sinusoid on a subset of channels."""

    channels: tuple
    freq_hz: float
    amplitude: float


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    trials_per_class: int
    channels: int
    raw_len: int
    sample_rate_hz: float
    signatures: tuple
    noise_std: float
    seed: int

    def __post_init__(self):
        if len(self.signatures) != self.num_classes:
            raise ValueError(
                f"need {self.num_classes} class signatures, got {len(self.signatures)}"
            )
        for sig in self.signatures:
            if sig.freq_hz >= self.sample_rate_hz / 2:
                raise ValueError(
                    f"frequency {sig.freq_hz} Hz is at or above Nyquist "
                    f"({self.sample_rate_hz / 2} Hz)"
                )
            if any(c < 0 or c >= self.channels for c in sig.channels):
                raise ValueError(
                    f"signature channels {sig.channels} outside [0, {self.channels})"
                )


def sliding_window_segment(trial: Trial, window: int, overlap: int) -> list[Slice]:
    """Cut windows starting at 0, stride, 2*stride, ...; stride = window - overlap.

    A trailing stretch too short to fill a window is dropped.
    """
    raw_len = trial.samples.shape[1]
    if window > raw_len:
        raise ValueError(
            f"window {window} exceeds trial length {raw_len} (trial {trial.id})"
        )
    if not 0 <= overlap < window:
        raise ValueError(f"overlap must lie in [0, window), got {overlap}")
    stride = window - overlap
    count = (raw_len - window) // stride + 1
    return [
        Slice(
            trial_id=trial.id,
            label=trial.label,
            data=trial.samples[:, i * stride:i * stride + window].copy(),
            start=i * stride,
        )
        for i in range(count)
    ]


def zscore_standardize(sl: Slice) -> Slice:
    """Per channel row: (x - mean) / max(population std, eps)."""
    if sl.data.shape[1] < 2:
        raise ValueError(f"need at least 2 samples per row, got {sl.data.shape[1]}")
    mean = sl.data.mean(axis=1, keepdims=True)
    std = sl.data.std(axis=1, keepdims=True)
    out = (sl.data - mean) / np.maximum(std, EPS_STD)
    return Slice(sl.trial_id, sl.label, out.astype(sl.data.dtype), sl.start)


def segment_and_standardize(trial: Trial, window: int, overlap: int) -> list[Slice]:
    return [zscore_standardize(s) for s in sliding_window_segment(trial, window, overlap)]


def stratified_trial_kfold(trials: list[Trial], k: int, seed: int) -> FoldPlan:
    """Per class: shuffle trial ids and deal them round-robin into k folds."""
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    by_class: dict[int, list[str]] = {}
    for t in trials:
        by_class.setdefault(t.label, []).append(t.id)
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < k:
            raise ValueError(
                f"class {label} has {len(ids)} trials, fewer than k={k}"
            )
        order = rng.permutation(len(ids))
        for j, idx in enumerate(order):
            assignment[ids[idx]] = j % k
    return FoldPlan(k=k, assignment=assignment, seed=seed)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Per-class sinusoids on designated channels plus white noise everywhere."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.raw_len) / spec.sample_rate_hz
    trials = []
    for label in range(spec.num_classes):
        sig = spec.signatures[label]
        tone = sig.amplitude * np.sin(2 * math.pi * sig.freq_hz * t)
        for i in range(spec.trials_per_class):
            samples = np.zeros((spec.channels, spec.raw_len))
            samples[list(sig.channels), :] = tone
            samples += rng.standard_normal((spec.channels, spec.raw_len)) * spec.noise_std
            trials.append(
                Trial(
                    id=f"class{label}_trial{i:03d}",
                    label=label,
                    samples=samples.astype(np.float32),
                )
            )
    return Dataset(
        num_classes=spec.num_classes,
        channels=spec.channels,
        raw_len=spec.raw_len,
        sample_rate_hz=spec.sample_rate_hz,
        trials=trials,
    )


def default_synth_spec(
    num_classes: int = 3,
    trials_per_class: int = 20,
    channels: int = 16,
    raw_len: int = 800,
    sample_rate_hz: float = 200.0,
    noise_std: float = 0.25,
    seed: int = 0,
) -> SynthSpec:
    """Separable desk-scale dataset: one frequency band per class, each on
    its own contiguous channel group."""
    group = max(1, channels // (num_classes + 1))
    signatures = tuple(
        ClassSignature(
            channels=tuple(range(c * group, min((c + 1) * group, channels))),
            freq_hz=6.0 + 8.0 * c,
            amplitude=1.0,
        )
        for c in range(num_classes)
    )
    return SynthSpec(
        num_classes=num_classes,
        trials_per_class=trials_per_class,
        channels=channels,
        raw_len=raw_len,
        sample_rate_hz=sample_rate_hz,
        signatures=signatures,
        noise_std=noise_std,
        seed=seed,
    )


# -- directory format ------------------------------------------------------

def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_classes": dataset.num_classes,
        "C": dataset.channels,
        "T_raw": dataset.raw_len,
        "sample_rate_hz": dataset.sample_rate_hz,
        "trials": [],
    }
    for trial in dataset.trials:
        fname = f"{trial.id}.f32"
        arr = np.ascontiguousarray(trial.samples, dtype="<f4")
        if arr.shape != (dataset.channels, dataset.raw_len):
            raise ValueError(
                f"trial {trial.id} has shape {arr.shape}, expected "
                f"({dataset.channels}, {dataset.raw_len})"
            )
        (directory / fname).write_bytes(arr.tobytes())
        manifest["trials"].append(
            {"id": trial.id, "label": trial.label, "file": fname}
        )
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_dataset(path) -> Dataset:
    """Read a dataset directory (or its manifest.json path) with validation."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise ValueError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    for key in ("num_classes", "C", "T_raw", "sample_rate_hz", "trials"):
        if key not in manifest:
            raise ValueError(f"manifest is missing required key {key!r}")
    num_classes = int(manifest["num_classes"])
    channels = int(manifest["C"])
    raw_len = int(manifest["T_raw"])
    base = manifest_path.parent
    trials = []
    for entry in manifest["trials"]:
        tid = entry["id"]
        label = int(entry["label"])
        if not 0 <= label < num_classes:
            raise ValueError(
                f"trial {tid}: label {label} outside [0, {num_classes})"
            )
        fpath = base / entry["file"]
        if not fpath.exists():
            raise ValueError(f"trial {tid}: sample file {fpath} does not exist")
        raw = fpath.read_bytes()
        expected = channels * raw_len * 4
        if len(raw) != expected:
            raise ValueError(
                f"trial {tid}: file holds {len(raw)} bytes, expected {expected} "
                f"for shape ({channels}, {raw_len})"
            )
        samples = np.frombuffer(raw, dtype="<f4").reshape(channels, raw_len)
        trials.append(Trial(id=tid, label=label, samples=samples.copy()))
    return Dataset(
        num_classes=num_classes,
        channels=channels,
        raw_len=raw_len,
        sample_rate_hz=float(manifest["sample_rate_hz"]),
        trials=trials,
    )
