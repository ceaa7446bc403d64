"""Metrics and the experiment harness.

Evaluation always runs the deployment path: scenes are acquired through
the checkpoint's patterns (complementary differencing for signed ones),
optionally corrupted with measurement noise, and recognized from the
measurement vector alone. Sweeps train missing checkpoints on demand,
cache them, and emit a JSON report plus plots and a CSV table; the
plots and CSV are pure views of the report data.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .ctc import Alphabet, decode_greedy
from .data import CONDITION_TAGS, generate_corpus
from .errors import ConfigError, InputError
from .model import CRNN, ModelConfig, default_conv_spec
from .sensing import CLEAN, PatternSet, add_noise, measure, measure_signed
from .training import (
    PROJECTED,
    SR_STAGE1_EPOCHS,
    SR_TO_K,
    Checkpoint,
    LabeledDataset,
    TrainConfig,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
    train_full,
    train_stage2,
)

PATTERN_MODES = ("optimized_unit", "random_unit", "signed_binary")

# published accuracy table (percent): pattern mode x sampling rate.
# 90.283 is kept with its odd third decimal exactly as published;
# comparisons round to 2 decimals.
REFERENCE_TABLE = {
    "signed_binary": {0.03: 40.52, 0.05: 46.98, 0.07: 52.16, 0.09: 58.52},
    "random_unit": {0.03: 62.63, 0.05: 76.53, 0.07: 80.72, 0.09: 89.28},
    "optimized_unit": {0.03: 82.32, 0.05: 87.73, 0.07: 90.283, 0.09: 92.73},
}
# three published 5%-SR headline numbers that do not quite agree; all
# recorded, none reconciled
REFERENCE_POINTS = {
    "abstract_sr05_percent": 87.60,
    "experiment_sr05_percent": 87.0,
    "table2_sr05_percent": 87.73,
    "noise_10db_sr05_percent": 86.72,
    "latency_seconds": 0.0027,
}


def exact_match_accuracy(predictions, labels) -> float:
    """Fraction of samples whose prediction equals the label exactly."""
    if len(predictions) != len(labels):
        raise InputError(
            f"{len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        return 0.0
    hits = sum(1 for p, l in zip(predictions, labels)
               if tuple(_indices(p)) == tuple(_indices(l)))
    return hits / len(labels)


def per_position_accuracy(predictions, labels, length: int = 7) -> np.ndarray:
    """Per-slot match fractions; predictions are padded or truncated to
    ``length`` with a never-matching sentinel."""
    if len(predictions) != len(labels):
        raise InputError(
            f"{len(predictions)} predictions vs {len(labels)} labels")
    out = np.zeros(length)
    if not labels:
        return out
    for p, l in zip(predictions, labels):
        li = _indices(l)
        if len(li) != length:
            raise InputError(f"labels must have length {length}, got {len(li)}")
        pi = list(_indices(p))[:length]
        pi += [-1] * (length - len(pi))
        for j in range(length):
            out[j] += pi[j] == li[j]
    return out / len(labels)


def _indices(seq):
    return seq.indices if hasattr(seq, "indices") else tuple(seq)


@dataclass(frozen=True)
class ExperimentProfile:
    """Model and training sizing for one experiment family.

    The default is the full-size architecture; ``DESK_PROFILE`` shrinks
    the channel counts and recurrent width so a full sweep trains on a
    CPU in minutes while keeping every protocol step intact.
    """

    channels: tuple[int, int, int, int] = (64, 128, 256, 256)
    lstm_hidden: int = 256
    lstm_layers: int = 2
    standardize: bool = False
    stage1_epochs: int | None = None  # None: the per-rate schedule
    stage2_patience: int = 100
    stage2_max_epochs: int = 500
    batch_size: int = 64
    train_count: int = 2000
    val_count: int = 400
    test_count: int = 400
    corpus_seed: int = 0
    train_seed: int = 0
    train_noise_snr_db: float | None = None
    tags: tuple[str, ...] = ("base",)


PAPER_PROFILE = ExperimentProfile()
# Stage 2 restarts below the CTC blank-collapse plateau (the projection
# perturbs FC1, and for fixed patterns the recognizer trains from
# scratch), and validation exact match stays at zero until the loss
# breaks out, so the patience must outlast the plateau or early stopping
# fires before the model ever decodes a string. Measurement
# standardization is on because nonnegative frozen patterns otherwise
# feed the small recognizer a common-mode offset two orders of magnitude
# above the signal, which pins it on that plateau indefinitely.
DESK_PROFILE = ExperimentProfile(
    channels=(8, 16, 32, 48), lstm_hidden=64, lstm_layers=2,
    standardize=True,
    stage1_epochs=100, stage2_patience=70, stage2_max_epochs=150,
    train_count=3000)


def model_config_for(k: int, profile: ExperimentProfile) -> ModelConfig:
    return ModelConfig.plates(
        k, lstm_hidden=profile.lstm_hidden, lstm_layers=profile.lstm_layers,
        conv_spec=default_conv_spec(profile.channels),
        standardize=profile.standardize)


def make_datasets(profile: ExperimentProfile, alphabet: Alphabet = Alphabet()):
    """Deterministic (train, val, test) from the synthetic corpus: one
    contiguous generation split by position."""
    total = profile.train_count + profile.val_count + profile.test_count
    corpus = generate_corpus(total, seed=profile.corpus_seed,
                             alphabet=alphabet, tags=profile.tags)
    a = profile.train_count
    b = a + profile.val_count
    return corpus[:a], corpus[a:b], corpus[b:]


def train_config_for(k: int, sr: float | None,
                     profile: ExperimentProfile) -> TrainConfig:
    if profile.stage1_epochs is not None:
        stage1 = profile.stage1_epochs
    else:
        stage1 = SR_STAGE1_EPOCHS.get(sr, 100)
    return TrainConfig(
        k=k, sr=sr, stage1_epochs=stage1,
        stage2_patience=profile.stage2_patience,
        stage2_max_epochs=profile.stage2_max_epochs,
        batch_size=profile.batch_size, seed=profile.train_seed,
        train_noise_snr_db=profile.train_noise_snr_db)


def random_pattern_set(mode: str, k: int, config: ModelConfig,
                       seed: int) -> PatternSet:
    rng = np.random.default_rng(seed)
    shape = (k, config.m * config.n)
    if mode == "random_unit":
        values = rng.random(shape)
    elif mode == "signed_binary":
        values = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    else:
        raise ConfigError(f"no random patterns for mode {mode!r}")
    return PatternSet(values, mode=mode, height=config.n, width=config.m)


def train_point(
    k: int,
    pattern_mode: str,
    profile: ExperimentProfile,
    *,
    sr: float | None = None,
    train=None,
    val=None,
    alphabet: Alphabet = Alphabet(),
    history_path=None,
) -> Checkpoint:
    """Train one operating point.

    Optimized patterns run the full two-stage protocol. Random and
    signed patterns are fixed up front (they need no stage 1), so their
    checkpoint enters the protocol at the projected stage and only the
    recognizer trains.
    """
    if pattern_mode not in PATTERN_MODES:
        raise ConfigError(f"unknown pattern mode {pattern_mode!r}")
    cfg = model_config_for(k, profile)
    tcfg = train_config_for(k, sr, profile)
    if train is None or val is None:
        train_s, val_s, _ = make_datasets(profile, alphabet)
        train = LabeledDataset.from_samples(train_s)
        val = LabeledDataset.from_samples(val_s)
    model = CRNN(cfg, seed=profile.train_seed)
    if pattern_mode == "optimized_unit":
        _, _, final = train_full(model, train, val, tcfg, history_path)
        return final
    model.set_patterns(
        random_pattern_set(pattern_mode, k, cfg, profile.train_seed))
    frozen = Checkpoint.from_model(model, PROJECTED)
    return train_stage2(frozen, train, val, tcfg, history_path)


def train_point_cached(
    k: int,
    pattern_mode: str,
    profile: ExperimentProfile,
    cache_dir,
    *,
    sr: float | None = None,
    train=None,
    val=None,
    train_if_missing: bool = True,
) -> tuple[Checkpoint | None, Path, str | None]:
    """(checkpoint, path, error): loads from cache when present, trains
    when allowed, otherwise reports the miss as an error string."""
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    # the fingerprint covers every profile field, so any sizing/budget
    # change invalidates the cache instead of silently reusing results
    fp = hashlib.sha256(json.dumps(
        {"profile": asdict(profile), "k": k, "sr": sr},
        sort_keys=True).encode()).hexdigest()[:10]
    path = cache / f"{pattern_mode}_k{k}_{fp}.zip"
    if path.is_file():
        return load_checkpoint(path), path, None
    if not train_if_missing:
        return None, path, f"missing checkpoint {path.name} and training disabled"
    ckpt = train_point(k, pattern_mode, profile, sr=sr, train=train, val=val)
    save_checkpoint(ckpt, path)
    return ckpt, path, None


def evaluate_checkpoint(
    ckpt: Checkpoint,
    samples,
    *,
    snr_db=CLEAN,
    seed: int = 0,
    batch_size: int = 128,
) -> dict:
    """Measure every scene through the checkpoint's patterns, decode, and
    score. Signed patterns acquire via complementary differencing."""
    samples = list(samples)
    if not samples:
        raise InputError("cannot evaluate on an empty sample list")
    model = ckpt.build_model()
    patterns = ckpt.pattern_set()
    signed = patterns.mode == "signed_binary"
    acquire = measure_signed if signed else measure
    rng = np.random.default_rng(seed)
    vectors = np.empty((len(samples), patterns.k))
    realized = []
    for i, sample in enumerate(samples):
        mv = acquire(sample.scene, patterns)
        mv = add_noise(mv, snr_db, int(rng.integers(2 ** 63)))
        vectors[i] = mv.values
        if mv.snr_db is not None:
            realized.append(mv.snr_db)
    preds = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            batch = torch.from_numpy(vectors[lo:lo + batch_size]).to(model.dtype)
            probs = model.infer_grid(batch)
            preds.extend(decode_greedy(row).indices for row in probs.numpy())
    labels = [s.label for s in samples]
    exact = exact_match_accuracy(preds, labels)
    per_pos = per_position_accuracy(
        preds, labels, length=max(len(_indices(l)) for l in labels))
    per_tag: dict[str, list[int]] = {}
    for sample, pred in zip(samples, preds):
        per_tag.setdefault(sample.tag, []).append(
            tuple(pred) == sample.label.indices)
    return {
        "count": len(samples),
        "exact_match": exact,
        "percent": 100.0 * exact,
        "per_position": [float(v) for v in per_pos],
        "per_tag": {tag: float(np.mean(hits)) for tag, hits in per_tag.items()},
        "snr_db": snr_db if snr_db == CLEAN else float(snr_db),
        "realized_snr_db": float(np.mean(realized)) if realized else None,
        # stored unit-range patterns are indistinguishable by value, so
        # report the acquisition route rather than a guessed mode
        "acquisition": "differential" if signed else "direct",
    }


DEFAULT_AXIS_VALUES = {
    "sr": (0.03, 0.05, 0.07, 0.09),
    "snr": (CLEAN, 30.0, 20.0, 10.0, 5.0),
    "pattern_mode": PATTERN_MODES,
    "condition": CONDITION_TAGS,
}


@dataclass(frozen=True)
class SweepConfig:
    """One sweep: vary ``axis`` over ``values``, everything else fixed."""

    axis: str
    out_dir: str
    values: tuple = ()
    profile: ExperimentProfile = field(default_factory=lambda: DESK_PROFILE)
    base_sr: float = 0.05
    pattern_mode: str = "optimized_unit"
    snr_db: object = CLEAN
    eval_seed: int = 0
    train_if_missing: bool = True

    def __post_init__(self):
        if self.axis not in DEFAULT_AXIS_VALUES:
            raise ConfigError(
                f"unknown sweep axis {self.axis!r}; "
                f"choose from {sorted(DEFAULT_AXIS_VALUES)}")
        if not self.values:
            object.__setattr__(self, "values", DEFAULT_AXIS_VALUES[self.axis])
        object.__setattr__(self, "values", tuple(self.values))
        if self.pattern_mode not in PATTERN_MODES:
            raise ConfigError(f"unknown pattern mode {self.pattern_mode!r}")
        if self.base_sr not in SR_TO_K:
            raise ConfigError(f"base_sr must be a published rate, got {self.base_sr}")
        if self.axis == "sr":
            bad = [v for v in self.values if v not in SR_TO_K]
        elif self.axis == "pattern_mode":
            bad = [v for v in self.values if v not in PATTERN_MODES]
        elif self.axis == "condition":
            bad = [v for v in self.values if v not in CONDITION_TAGS]
        else:
            bad = [v for v in self.values
                   if v != CLEAN and not np.isfinite(float(v))]
        if bad:
            raise ConfigError(f"invalid {self.axis} sweep values: {bad!r}")


def run_sweep(config: SweepConfig) -> dict:
    """Train (or load) the checkpoints a sweep needs, evaluate each point
    on the held-out test split, and write report.json, a plot, and a
    Table-2-layout CSV under ``config.out_dir``."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = out_dir / "checkpoints"
    profile = config.profile
    alphabet = Alphabet()
    train_s, val_s, test_s = make_datasets(profile, alphabet)
    train = LabeledDataset.from_samples(train_s)
    val = LabeledDataset.from_samples(val_s)

    points: list[dict] = []
    errors: list[str] = []

    def add_point(value, ckpt, path, err, *, samples=test_s, snr=config.snr_db):
        if err is not None:
            errors.append(err)
            points.append({"value": value, "error": err})
            return
        result = evaluate_checkpoint(ckpt, samples, snr_db=snr,
                                     seed=config.eval_seed)
        points.append({
            "value": value,
            "k": ckpt.config.k,
            "checkpoint": path.name,
            "checkpoint_hash": checkpoint_hash(ckpt),
            **result,
        })

    if config.axis == "sr":
        for sr in config.values:
            k = SR_TO_K[sr]
            ckpt, path, err = train_point_cached(
                k, config.pattern_mode, profile, cache, sr=sr,
                train=train, val=val,
                train_if_missing=config.train_if_missing)
            add_point(sr, ckpt, path, err)
    elif config.axis == "pattern_mode":
        k = SR_TO_K[config.base_sr]
        for mode in config.values:
            ckpt, path, err = train_point_cached(
                k, mode, profile, cache, sr=config.base_sr,
                train=train, val=val,
                train_if_missing=config.train_if_missing)
            add_point(mode, ckpt, path, err)
    elif config.axis == "snr":
        k = SR_TO_K[config.base_sr]
        ckpt, path, err = train_point_cached(
            k, config.pattern_mode, profile, cache, sr=config.base_sr,
            train=train, val=val, train_if_missing=config.train_if_missing)
        for snr in config.values:
            add_point(snr, ckpt, path, err, snr=snr)
    else:  # condition
        k = SR_TO_K[config.base_sr]
        ckpt, path, err = train_point_cached(
            k, config.pattern_mode, profile, cache, sr=config.base_sr,
            train=train, val=val, train_if_missing=config.train_if_missing)
        for tag in config.values:
            # fresh per-condition test sets; the offset seed keeps them
            # disjoint from the training corpus
            cond_samples = generate_corpus(
                profile.test_count, seed=profile.corpus_seed + 1,
                alphabet=alphabet, tags=(tag,))
            add_point(tag, ckpt, path, err, samples=cond_samples)

    report = {
        "axis": config.axis,
        "values": list(config.values),
        "pattern_mode": config.pattern_mode,
        "base_sr": config.base_sr,
        "snr_db": config.snr_db,
        "eval_seed": config.eval_seed,
        "profile": asdict(profile),
        "points": points,
        "errors": errors,
        "reference_table_percent": REFERENCE_TABLE,
        "reference_points": REFERENCE_POINTS,
    }
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, default=str), encoding="utf-8")
    plot_sweep(report, out_dir / f"sweep_{config.axis}.png")
    export_table2_csv(report, out_dir / "table2.csv")
    return report


def plot_sweep(report: dict, out_path) -> Path:
    """Render accuracy against the sweep axis; a pure view of the report."""
    points = [p for p in report["points"] if "error" not in p]
    labels = [str(p["value"]) for p in points]
    accs = [p["percent"] for p in points]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    if report["axis"] in ("sr", "snr"):
        ax.plot(range(len(points)), accs, marker="o")
        ax.set_xticks(range(len(points)), labels)
    else:
        ax.bar(range(len(points)), accs)
        ax.set_xticks(range(len(points)), labels, rotation=20)
    ax.set_xlabel(report["axis"])
    ax.set_ylabel("exact match (%)")
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def export_table2_csv(report: dict, out_path) -> Path:
    """CSV in the published table's layout: one row per pattern mode, one
    column per sampling rate; cells are measured percentages where this
    report has them, blank elsewhere."""
    rates = DEFAULT_AXIS_VALUES["sr"]
    cells: dict[tuple[str, float], float] = {}
    for p in report["points"]:
        if "error" in p:
            continue
        if report["axis"] == "sr":
            cells[(report["pattern_mode"], p["value"])] = p["percent"]
        elif report["axis"] == "pattern_mode":
            cells[(p["value"], report["base_sr"])] = p["percent"]
    lines = ["pattern_mode," + ",".join(f"sr_{r}" for r in rates)]
    for mode in PATTERN_MODES:
        row = [mode]
        for r in rates:
            row.append(f"{cells[(mode, r)]:.2f}" if (mode, r) in cells else "")
        lines.append(",".join(row))
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(out_path)


def measure_latency(ckpt: Checkpoint, n_samples: int, *, seed: int = 0,
                    warmup: int = 10) -> dict:
    """Wall-time statistics for single-sample recognition (forward pass
    plus greedy decode), warm-up iterations excluded."""
    stats = {"count": 0, "median_s": None, "p95_s": None, "mean_s": None}
    if n_samples <= 0:
        return stats
    model = ckpt.build_model()
    rng = np.random.default_rng(seed)
    k = ckpt.config.k
    scale = float(np.abs(ckpt.state["fc1_weight"]).sum(axis=1).mean())
    vectors = rng.random((max(n_samples, 1), k)) * scale
    times = []
    with torch.no_grad():
        for i in range(warmup):
            batch = torch.from_numpy(vectors[i % n_samples][None, :]).to(model.dtype)
            decode_greedy(model.infer_grid(batch)[0].numpy())
        for i in range(n_samples):
            t0 = time.perf_counter()
            batch = torch.from_numpy(vectors[i][None, :]).to(model.dtype)
            decode_greedy(model.infer_grid(batch)[0].numpy())
            times.append(time.perf_counter() - t0)
    arr = np.array(times)
    return {
        "count": n_samples,
        "median_s": float(np.median(arr)),
        "p95_s": float(np.percentile(arr, 95)),
        "mean_s": float(arr.mean()),
    }
