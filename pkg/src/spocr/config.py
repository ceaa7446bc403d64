"""Run configuration: one JSON document drives every CLI workflow.

The document has five sections (geometry, model, train, data, eval)
plus a top-level ``out_dir``. Every key has a default, so ``{}`` is a
valid config; unknown keys and out-of-range values are rejected with
the dotted path of the offending field. Command-line overrides use the
same dotted paths (``train.seed=3``).

``model.conv_spec``, when non-null, takes precedence over
``model.channels``; it is the escape hatch for non-plate geometries.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .ctc import Alphabet, LabelSequence
from .data import CONDITION_TAGS, generate_corpus, ingest_ccpd, read_corpus, split
from .errors import ConfigError
from .model import ConvStage, ModelConfig, default_conv_spec
from .sensing import CLEAN, Scene
from .training import SR_STAGE1_EPOCHS, SR_TO_K, TrainConfig

DATA_SOURCES = ("plates", "random", "corpus", "ccpd")
SWEEP_AXES = ("sr", "snr", "pattern_mode", "condition")

DEFAULT_CONFIG = {
    "out_dir": "runs/default",
    "geometry": {"m": 96, "n": 32},
    "model": {
        "k": 150,
        "alphabet_size": 65,
        "lstm_hidden": 256,
        "lstm_layers": 2,
        "cell": "standard",
        "standardize": False,
        "channels": [64, 128, 256, 256],
        "conv_spec": None,
    },
    "train": {
        "sr": None,
        "stage1_epochs": None,
        "stage2_patience": 100,
        "stage2_max_epochs": 500,
        "batch_size": 64,
        "seed": 0,
        "projection": "clamp",
        "optimizer": "adadelta",
        "rho": 0.9,
        "eps": 1e-6,
        "lr": 0.01,
        "momentum": 0.9,
        "train_noise_snr_db": None,
        "stage2_init": "reinit",
    },
    "data": {
        "source": "plates",
        "train_count": 2000,
        "val_count": 400,
        "test_count": 400,
        "seed": 0,
        "tags": ["base"],
        "dir": None,
        "label_length": 2,
    },
    "eval": {
        "axis": "sr",
        "values": [],
        "pattern_mode": "optimized_unit",
        "base_sr": 0.05,
        "snr_db": CLEAN,
        "seed": 0,
        "train_if_missing": True,
        "latency_samples": 0,
    },
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return _is_int(v) or isinstance(v, float)


def _int_min(lo):
    return lambda v: _is_int(v) and v >= lo, f"an integer >= {lo}"


def _num_range(lo, hi, *, open_hi=False):
    def check(v):
        if not _is_num(v):
            return False
        return lo <= v < hi if open_hi else lo <= v <= hi

    bound = f"[{lo}, {hi})" if open_hi else f"[{lo}, {hi}]"
    return check, f"a number in {bound}"


def _choice(options):
    return lambda v: v in options, f"one of {sorted(options)}"


def _nullable(check, desc):
    return lambda v: v is None or check(v), f"null or {desc}"


def _snr(v) -> bool:
    return v == CLEAN or (_is_num(v) and np.isfinite(v))


# leaf validators keyed by dotted path
_CHECKS = {
    "out_dir": (lambda v: isinstance(v, str) and v != "", "a non-empty string"),
    "geometry.m": _int_min(1),
    "geometry.n": _int_min(1),
    "model.k": _int_min(1),
    "model.alphabet_size": _int_min(1),
    "model.lstm_hidden": _int_min(1),
    "model.lstm_layers": _int_min(1),
    "model.cell": _choice(("standard", "paper_simplified")),
    "model.standardize": (lambda v: isinstance(v, bool), "a boolean"),
    "model.channels": (
        lambda v: isinstance(v, list) and len(v) == 4
        and all(_is_int(c) and c >= 1 for c in v),
        "a list of 4 positive integers",
    ),
    "model.conv_spec": _nullable(
        lambda v: isinstance(v, list) and v
        and all(isinstance(s, dict) for s in v),
        "a non-empty list of conv stage objects",
    ),
    "train.sr": _nullable(*_num_range(1e-9, 1.0)),
    "train.stage1_epochs": _nullable(*_int_min(1)),
    "train.stage2_patience": _int_min(1),
    "train.stage2_max_epochs": _int_min(1),
    "train.batch_size": _int_min(1),
    "train.seed": _int_min(0),
    "train.projection": _choice(("clamp", "reflect")),
    "train.optimizer": _choice(("adadelta", "sgd")),
    "train.rho": _num_range(0.0, 1.0, open_hi=True),
    "train.eps": (lambda v: _is_num(v) and v > 0, "a positive number"),
    "train.lr": (lambda v: _is_num(v) and v > 0, "a positive number"),
    "train.momentum": _num_range(0.0, 1.0, open_hi=True),
    "train.train_noise_snr_db": _nullable(
        lambda v: _is_num(v) and np.isfinite(v), "a finite number"),
    "train.stage2_init": _choice(("reinit", "inherit")),
    "data.source": _choice(DATA_SOURCES),
    "data.train_count": _int_min(1),
    "data.val_count": _int_min(1),
    "data.test_count": _int_min(1),
    "data.seed": _int_min(0),
    "data.tags": (
        lambda v: isinstance(v, list) and v
        and all(isinstance(t, str) for t in v),
        "a non-empty list of strings",
    ),
    "data.dir": _nullable(lambda v: isinstance(v, str) and v != "",
                          "a non-empty string"),
    "data.label_length": _int_min(1),
    "eval.axis": _choice(SWEEP_AXES),
    "eval.values": (lambda v: isinstance(v, list), "a list"),
    "eval.pattern_mode": _choice(
        ("optimized_unit", "random_unit", "signed_binary")),
    "eval.base_sr": _choice(tuple(SR_TO_K)),
    "eval.snr_db": (_snr, "'clean' or a finite number"),
    "eval.seed": _int_min(0),
    "eval.train_if_missing": (lambda v: isinstance(v, bool), "a boolean"),
    "eval.latency_samples": _int_min(0),
}


def load_config(path) -> dict:
    """Read, merge with defaults, and validate a JSON config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return validate_config(merge_config(user))


def merge_config(user: dict) -> dict:
    """Defaults overlaid with the user document (sections merge by key)."""
    merged = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def apply_overrides(config: dict, assignments) -> dict:
    """Apply ``section.key=json_value`` overrides; bare words read as strings."""
    out = copy.deepcopy(config)
    for item in assignments or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {part} is not a section")
        node[parts[-1]] = value
    return out


def validate_config(config: dict) -> dict:
    """Check key names, leaf types/ranges, and cross-field constraints.

    Returns the config unchanged; every rejection names the dotted path.
    """
    for section, default in DEFAULT_CONFIG.items():
        if not isinstance(default, dict):
            continue
        got = config.get(section)
        if not isinstance(got, dict):
            raise ConfigError(f"{section}: must be an object")
        unknown = sorted(set(got) - set(default))
        if unknown:
            raise ConfigError(f"unknown config key: {section}.{unknown[0]}")
    unknown = sorted(set(config) - set(DEFAULT_CONFIG))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    for path, (check, desc) in _CHECKS.items():
        section, _, leaf = path.partition(".")
        value = config[section][leaf] if leaf else config[section]
        if not check(value):
            raise ConfigError(f"{path}: expected {desc}, got {value!r}")

    data = config["data"]
    if data["source"] in ("corpus", "ccpd") and data["dir"] is None:
        raise ConfigError(f"data.dir: required when data.source is {data['source']!r}")
    if data["source"] == "plates":
        geo = config["geometry"]
        if (geo["m"], geo["n"]) != (96, 32):
            raise ConfigError(
                "data.source: 'plates' renders 96x32 scenes; geometry is "
                f"{geo['m']}x{geo['n']}")
        if config["model"]["alphabet_size"] != 65:
            raise ConfigError(
                "data.source: 'plates' uses the 65-symbol plate alphabet; "
                f"model.alphabet_size is {config['model']['alphabet_size']}")
        bad = [t for t in data["tags"] if t not in CONDITION_TAGS]
        if bad:
            raise ConfigError(f"data.tags: unknown condition {bad[0]!r}")
    return config


def build_model_config(config: dict) -> ModelConfig:
    model = config["model"]
    if model["conv_spec"] is not None:
        spec = tuple(ConvStage.from_json(s) for s in model["conv_spec"])
    else:
        spec = default_conv_spec(tuple(model["channels"]))
    return ModelConfig(
        m=config["geometry"]["m"],
        n=config["geometry"]["n"],
        k=model["k"],
        alphabet_size=model["alphabet_size"],
        lstm_hidden=model["lstm_hidden"],
        lstm_layers=model["lstm_layers"],
        conv_spec=spec,
        cell=model["cell"],
        standardize=model["standardize"],
    )


def build_train_config(config: dict) -> TrainConfig:
    train = config["train"]
    stage1 = train["stage1_epochs"]
    if stage1 is None:
        stage1 = SR_STAGE1_EPOCHS.get(train["sr"], 100)
    return TrainConfig(
        k=config["model"]["k"],
        sr=train["sr"],
        stage1_epochs=stage1,
        stage2_patience=train["stage2_patience"],
        stage2_max_epochs=train["stage2_max_epochs"],
        batch_size=train["batch_size"],
        seed=train["seed"],
        projection=train["projection"],
        optimizer=train["optimizer"],
        rho=train["rho"],
        eps=train["eps"],
        lr=train["lr"],
        momentum=train["momentum"],
        train_noise_snr_db=train["train_noise_snr_db"],
        stage2_init=train["stage2_init"],
    )


class ToySample(NamedTuple):
    """Random-scene sample for non-plate geometries (tests, smoke runs)."""

    scene: Scene
    label: LabelSequence
    tag: str = "random"


def build_datasets(config: dict, alphabet: Alphabet | None = None):
    """(train, val, test) sample lists for the configured data source."""
    data = config["data"]
    counts = (data["train_count"], data["val_count"], data["test_count"])
    total = sum(counts)
    if data["source"] == "plates":
        corpus = generate_corpus(
            total, seed=data["seed"], alphabet=alphabet or Alphabet(),
            tags=tuple(data["tags"]))
        a, b = counts[0], counts[0] + counts[1]
        return corpus[:a], corpus[a:b], corpus[b:]
    if data["source"] == "random":
        return _random_datasets(config, counts)
    if data["source"] == "corpus":
        samples = read_corpus(data["dir"], alphabet or Alphabet())
    else:
        samples = ingest_ccpd(data["dir"], alphabet=alphabet or Alphabet())
    fractions = tuple(c / total for c in counts)
    return split(samples, fractions, seed=data["seed"])


def _random_datasets(config: dict, counts):
    """Uniform-noise scenes with uniform random labels; geometry-agnostic."""
    geo, model, data = config["geometry"], config["model"], config["data"]
    rng = np.random.default_rng(data["seed"])
    parts = []
    for count in counts:
        samples = []
        for _ in range(count):
            scene = Scene(rng.random((geo["n"], geo["m"])))
            label = LabelSequence(tuple(
                int(v) for v in rng.integers(
                    1, model["alphabet_size"] + 1, size=data["label_length"])))
            samples.append(ToySample(scene, label))
        parts.append(samples)
    return tuple(parts)
