"""Command-line surface tying the modules into operator workflows.

Every subcommand is a thin wrapper: parse flags, load and override the
JSON config where one applies, call into the library, map exceptions to
exit codes (0 success, 2 config, 3 training abort, 4 data/geometry,
5 protocol). Outputs are deterministic for identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .ctc import Alphabet, LabelSequence
from .data import write_corpus
from .errors import (
    ConfigError,
    GeometryError,
    InputError,
    ProtocolError,
    SpocrError,
    TrainingAbort,
)
from .evaluation import (
    SweepConfig,
    ExperimentProfile,
    evaluate_checkpoint,
    measure_latency,
    run_sweep,
)
from .model import CRNN
from .sensing import (
    CLEAN,
    Scene,
    add_noise,
    export_dmd_pngs,
    measure,
    measure_signed,
    read_measurement_csv,
    read_pattern_file,
    write_measurement_csv,
    write_pattern_file,
)
from .training import (
    STAGE1,
    Checkpoint,
    LabeledDataset,
    checkpoint_hash,
    load_checkpoint,
    project_stage,
    save_checkpoint,
    train_full,
)


def _load_config(args) -> dict:
    config = cfgmod.load_config(args.config)
    if getattr(args, "set", None):
        config = cfgmod.validate_config(cfgmod.apply_overrides(config, args.set))
    return config


def _load_checkpoint(path) -> Checkpoint:
    if not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _out_dir(config: dict) -> Path:
    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    """Full protocol: stage 1, projection, stage 2; writes all three
    checkpoints, their hashes, and the epoch history."""
    config = _load_config(args)
    out = _out_dir(config)
    model_cfg = cfgmod.build_model_config(config)
    train_cfg = cfgmod.build_train_config(config)
    train_s, val_s, _ = cfgmod.build_datasets(config)
    train = LabeledDataset.from_samples(train_s)
    val = LabeledDataset.from_samples(val_s)
    model = CRNN(model_cfg, seed=train_cfg.seed)
    history = out / "history.jsonl"
    if history.exists():
        history.unlink()
    try:
        checkpoints = train_full(model, train, val, train_cfg, history)
    except TrainingAbort as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint_aborted.zip")
            print(f"aborted; last finite state in {out / 'checkpoint_aborted.zip'}",
                  file=sys.stderr)
        raise
    hashes = {}
    for ckpt in checkpoints:
        path = out / f"checkpoint_{ckpt.stage}.zip"
        save_checkpoint(ckpt, path)
        hashes[ckpt.stage] = checkpoint_hash(ckpt)
        print(f"{ckpt.stage}: {path} {hashes[ckpt.stage]}")
    (out / "hashes.json").write_text(
        json.dumps(hashes, indent=2, sort_keys=True), encoding="utf-8")
    write_pattern_file(checkpoints[-1].pattern_set(), out / "patterns.bin")
    print(f"patterns: {out / 'patterns.bin'}")
    return 0


def cmd_project(args) -> int:
    """Project a stage-1 checkpoint's patterns onto the displayable range."""
    ckpt = _load_checkpoint(args.checkpoint)
    projected = project_stage(ckpt, strategy=args.strategy)
    save_checkpoint(projected, args.out)
    print(f"projected: {args.out} {checkpoint_hash(projected)}")
    return 0


def cmd_eval(args) -> int:
    """Evaluate a checkpoint on the configured test split."""
    config = _load_config(args)
    ckpt = _load_checkpoint(args.checkpoint)
    _, _, test = cfgmod.build_datasets(config)
    ev = config["eval"]
    report = evaluate_checkpoint(
        ckpt, test, snr_db=ev["snr_db"], seed=ev["seed"])
    if ev["latency_samples"] > 0:
        report["latency"] = measure_latency(
            ckpt, ev["latency_samples"], seed=ev["seed"])
    report["checkpoint_hash"] = checkpoint_hash(ckpt)
    out_path = Path(args.out) if args.out else _out_dir(config) / "eval.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, indent=2, default=str),
                        encoding="utf-8")
    print(f"exact_match: {report['exact_match']:.4f} ({report['count']} samples)")
    print(f"report: {out_path}")
    return 0


def _profile_from(config: dict) -> ExperimentProfile:
    if config["model"]["conv_spec"] is not None:
        raise ConfigError(
            "eval.axis sweeps size the model from model.channels; "
            "model.conv_spec is not supported here")
    train, data = config["train"], config["data"]
    return ExperimentProfile(
        channels=tuple(config["model"]["channels"]),
        lstm_hidden=config["model"]["lstm_hidden"],
        lstm_layers=config["model"]["lstm_layers"],
        standardize=config["model"]["standardize"],
        stage1_epochs=train["stage1_epochs"],
        stage2_patience=train["stage2_patience"],
        stage2_max_epochs=train["stage2_max_epochs"],
        batch_size=train["batch_size"],
        train_count=data["train_count"],
        val_count=data["val_count"],
        test_count=data["test_count"],
        corpus_seed=data["seed"],
        train_seed=train["seed"],
        train_noise_snr_db=train["train_noise_snr_db"],
        tags=tuple(data["tags"]),
    )


def cmd_sweep(args) -> int:
    """Sweep one axis; trains missing checkpoints unless disabled."""
    config = _load_config(args)
    if config["data"]["source"] != "plates":
        raise ConfigError("data.source: sweeps run on the synthetic plate "
                          f"corpus, got {config['data']['source']!r}")
    ev = config["eval"]
    sweep_cfg = SweepConfig(
        axis=ev["axis"],
        out_dir=config["out_dir"],
        values=tuple(ev["values"]),
        profile=_profile_from(config),
        base_sr=ev["base_sr"],
        pattern_mode=ev["pattern_mode"],
        snr_db=ev["snr_db"],
        eval_seed=ev["seed"],
        train_if_missing=ev["train_if_missing"],
    )
    report = run_sweep(sweep_cfg)
    # missing-checkpoint misses are recorded in the report, not raised,
    # so a written report is success even when some points carry errors
    for point in report["points"]:
        if "error" in point:
            print(f"{point['value']}: ERROR {point['error']}")
        else:
            print(f"{point['value']}: {point['percent']:.2f}%")
    print(f"report: {Path(config['out_dir']) / 'report.json'}")
    return 0


def _load_scene(path, patterns) -> Scene:
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            pixels = np.asarray(gray, dtype=np.float64) / 255.0
    except OSError as exc:
        raise InputError(f"{path}: cannot read image: {exc}") from exc
    if pixels.shape != (patterns.height, patterns.width):
        raise GeometryError(
            f"{path}: image is {pixels.shape[1]}x{pixels.shape[0]}, patterns "
            f"display at {patterns.width}x{patterns.height}")
    return Scene(pixels)


def cmd_simulate(args) -> int:
    """Acquire images through a pattern file; one CSV row per image."""
    if not Path(args.patterns).is_file():
        raise InputError(f"pattern file not found: {args.patterns}")
    patterns = read_pattern_file(args.patterns)
    acquire = measure_signed if patterns.mode == "signed_binary" else measure
    rng = np.random.default_rng(args.seed)
    rows = []
    for image_path in args.images:
        mv = acquire(_load_scene(image_path, patterns), patterns)
        if args.snr is not None:
            mv = add_noise(mv, args.snr, int(rng.integers(2 ** 63)))
        rows.append((Path(image_path).stem, mv.values))
    write_measurement_csv(args.out, rows)
    print(f"wrote {len(rows)} measurement rows to {args.out}")
    return 0


def _decode_with_confidence(grid: np.ndarray):
    """Greedy decode plus one confidence per emitted character: the max
    posterior the character reached inside its argmax run."""
    ids = grid.argmax(axis=1)
    indices: list[int] = []
    confs: list[float] = []
    prev = 0
    for t, c in enumerate(ids):
        c = int(c)
        if c != 0:
            if c != prev:
                indices.append(c)
                confs.append(float(grid[t, c]))
            else:
                confs[-1] = max(confs[-1], float(grid[t, c]))
        prev = c
    return LabelSequence(tuple(indices)), tuple(confs)


def _read_rows_isolated(path):
    """(sample_id, values-or-None, error-or-None) per CSV row; value
    parse failures are isolated to their row."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            sid = row[0] if row[0] else f"line{lineno}"
            try:
                values = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as exc:
                rows.append((sid, None, f"malformed row {lineno}: {exc}"))
                continue
            rows.append((sid, values, None))
    return rows


def cmd_infer(args) -> int:
    """Decode measurement CSV rows; text plus per-character confidence."""
    ckpt = _load_checkpoint(args.checkpoint)
    if not Path(args.measurements).is_file():
        raise InputError(f"measurement file not found: {args.measurements}")
    rows = _read_rows_isolated(args.measurements)
    k = ckpt.config.k
    for sid, values, err in rows:
        if err is None and len(values) != k:
            raise GeometryError(
                f"{sid}: {len(values)} measurements, checkpoint expects {k}")
    model = ckpt.build_model()
    # plate-alphabet text when the checkpoint uses it, raw indices otherwise
    alphabet = Alphabet()
    plate = ckpt.config.alphabet_size == alphabet.size
    out_rows = []
    with torch.no_grad():
        for sid, values, err in rows:
            if err is not None:
                out_rows.append([sid, "ERROR", err])
                continue
            batch = torch.from_numpy(values[None, :]).to(model.dtype)
            grid = model.infer_grid(batch)[0].numpy()
            label, confs = _decode_with_confidence(grid)
            text = (alphabet.decode_text(label) if plate
                    else "".join(f"<{i}>" for i in label.indices))
            out_rows.append([sid, text, ";".join(f"{c:.6f}" for c in confs)])
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(out_rows)
    for row in out_rows:
        print(",".join(row))
    return 0


def cmd_export_dmd(args) -> int:
    """Quantize a checkpoint's patterns into 8-bit DMD frames."""
    ckpt = _load_checkpoint(args.checkpoint)
    if ckpt.stage == STAGE1:
        raise ProtocolError(
            "stage1 checkpoints are unprojected (patterns may be negative); "
            "project before exporting")
    manifest = export_dmd_pngs(ckpt.pattern_set(), args.out_dir)
    print(f"wrote {len(manifest['files'])} frames to {args.out_dir}")
    return 0


def cmd_gen_data(args) -> int:
    """Render the configured corpus to PNG files plus manifests."""
    config = _load_config(args)
    if config["data"]["source"] == "random":
        raise ConfigError("data.source: gen-data writes plate corpora; "
                          "'random' scenes have no renderable labels")
    train, val, test = cfgmod.build_datasets(config)
    out = Path(args.out_dir)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_corpus(part, out / name)
        print(f"{name}: {len(part)} samples -> {out / name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spocr",
        description="single-pixel character recognition workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key by dotted path")

    p = sub.add_parser("train", help="run the two-stage training protocol")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("project", help="project stage-1 patterns to [0,1]")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("clamp", "reflect"), default="clamp")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report path (default <out_dir>/eval.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep one experiment axis")
    with_config(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="measure images through patterns")
    p.add_argument("--patterns", required=True, help="binary pattern file")
    p.add_argument("--out", required=True, help="measurement CSV to write")
    p.add_argument("--snr", type=float, default=None,
                   help="add measurement noise at this SNR (dB)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("images", nargs="+", help="grayscale images to acquire")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="decode a measurement CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--out", help="also write results to this CSV")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-dmd", help="export patterns as DMD frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_dmd)

    p = sub.add_parser("gen-data", help="render a synthetic corpus to disk")
    with_config(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpocrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
