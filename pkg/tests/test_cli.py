"""Tests for the JSON config layer and the command-line surface."""

import json

import numpy as np
import pytest
import torch
from PIL import Image

from spocr import cli
from spocr import config as cfgmod
from spocr.ctc import Alphabet
from spocr.data import generate_corpus, write_corpus
from spocr.errors import ConfigError
from spocr.sensing import Scene, measure, read_measurement_csv, write_pattern_file
from spocr.training import load_checkpoint

ALPHABET = Alphabet()

TOY_CONV = [
    {"kernel": 3, "stride": 1, "padding": 0, "channels": 2, "pool": [2, 2]},
    {"kernel": 3, "stride": 1, "padding": 1, "channels": 3, "pool": [3, 1]},
]


def toy_config(out_dir) -> dict:
    """8x8 scenes, K=4, 20 training samples; trains in seconds."""
    return {
        "out_dir": str(out_dir),
        "geometry": {"m": 8, "n": 8},
        "model": {"k": 4, "alphabet_size": 3, "lstm_hidden": 5,
                  "lstm_layers": 1, "conv_spec": TOY_CONV},
        "train": {"stage1_epochs": 2, "stage2_patience": 2,
                  "stage2_max_epochs": 3, "batch_size": 5, "seed": 0},
        "data": {"source": "random", "train_count": 20, "val_count": 5,
                 "test_count": 5, "seed": 1, "label_length": 2},
    }


def write_config(path, cfg) -> str:
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


# ----------------------------------------------------------------- config


def test_empty_config_gets_defaults(tmp_path):
    cfg = cfgmod.load_config(write_config(tmp_path / "c.json", {}))
    assert cfg["model"]["k"] == 150
    assert cfg["train"]["stage1_epochs"] is None
    assert cfg["data"]["source"] == "plates"
    assert cfg["eval"]["snr_db"] == "clean"


def test_config_file_missing():
    with pytest.raises(ConfigError, match="not found"):
        cfgmod.load_config("/nonexistent/config.json")


def test_config_file_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON"):
        cfgmod.load_config(path)


def test_unknown_section_key_named(tmp_path):
    with pytest.raises(ConfigError, match=r"model\.channelz"):
        cfgmod.load_config(write_config(
            tmp_path / "c.json", {"model": {"channelz": [1, 2, 3, 4]}}))


def test_unknown_top_level_key_named(tmp_path):
    with pytest.raises(ConfigError, match="outdir"):
        cfgmod.load_config(write_config(tmp_path / "c.json", {"outdir": "x"}))


def test_bad_leaf_value_names_path(tmp_path):
    with pytest.raises(ConfigError, match=r"train\.rho"):
        cfgmod.load_config(write_config(
            tmp_path / "c.json", {"train": {"rho": 1.5}}))
    with pytest.raises(ConfigError, match=r"model\.channels"):
        cfgmod.load_config(write_config(
            tmp_path / "c.json", {"model": {"channels": [8, 16]}}))


def test_override_parses_json_and_strings():
    base = cfgmod.merge_config({})
    out = cfgmod.apply_overrides(
        base, ["train.seed=3", "data.dir=/some/path",
               "model.channels=[8,16,32,48]", "eval.train_if_missing=false"])
    assert out["train"]["seed"] == 3
    assert out["data"]["dir"] == "/some/path"
    assert out["model"]["channels"] == [8, 16, 32, 48]
    assert out["eval"]["train_if_missing"] is False
    assert base["train"]["seed"] == 0  # original untouched


def test_override_requires_assignment():
    with pytest.raises(ConfigError, match="key=value"):
        cfgmod.apply_overrides(cfgmod.merge_config({}), ["train.seed"])


def test_corpus_source_requires_dir(tmp_path):
    with pytest.raises(ConfigError, match=r"data\.dir"):
        cfgmod.load_config(write_config(
            tmp_path / "c.json", {"data": {"source": "corpus"}}))


def test_plates_requires_plate_geometry(tmp_path):
    with pytest.raises(ConfigError, match="96x32"):
        cfgmod.load_config(write_config(
            tmp_path / "c.json", {"geometry": {"m": 64, "n": 32}}))


def test_plates_requires_plate_alphabet(tmp_path):
    with pytest.raises(ConfigError, match="alphabet"):
        cfgmod.load_config(write_config(
            tmp_path / "c.json", {"model": {"alphabet_size": 10}}))


def test_plates_rejects_unknown_tag(tmp_path):
    with pytest.raises(ConfigError, match=r"data\.tags"):
        cfgmod.load_config(write_config(
            tmp_path / "c.json", {"data": {"tags": ["fog"]}}))


def test_build_model_config_default_plates():
    cfg = cfgmod.validate_config(cfgmod.merge_config({}))
    mc = cfgmod.build_model_config(cfg)
    assert (mc.m, mc.n, mc.k, mc.t) == (96, 32, 150, 24)
    assert mc.conv_spec[0].channels == 64


def test_build_model_config_toy_conv_spec(tmp_path):
    cfg = cfgmod.load_config(write_config(tmp_path / "c.json", toy_config(tmp_path)))
    mc = cfgmod.build_model_config(cfg)
    assert (mc.m, mc.n, mc.k, mc.t, mc.feature_dim) == (8, 8, 4, 3, 3)


def test_build_model_config_standardize_flag():
    cfg = cfgmod.validate_config(cfgmod.merge_config({}))
    assert cfgmod.build_model_config(cfg).standardize is False
    cfg = cfgmod.validate_config(cfgmod.merge_config(
        {"model": {"standardize": True}}))
    assert cfgmod.build_model_config(cfg).standardize is True
    with pytest.raises(ConfigError, match=r"model\.standardize"):
        cfgmod.validate_config(cfgmod.merge_config(
            {"model": {"standardize": 1}}))


def test_build_train_config_stage1_schedule():
    cfg = cfgmod.validate_config(cfgmod.merge_config(
        {"train": {"sr": 0.07}, "model": {"k": 200}}))
    assert cfgmod.build_train_config(cfg).stage1_epochs == 200
    cfg = cfgmod.validate_config(cfgmod.merge_config({}))
    assert cfgmod.build_train_config(cfg).stage1_epochs == 100
    cfg = cfgmod.validate_config(cfgmod.merge_config(
        {"train": {"stage1_epochs": 7, "sr": 0.07}, "model": {"k": 200}}))
    assert cfgmod.build_train_config(cfg).stage1_epochs == 7


def test_build_datasets_plates_counts():
    cfg = cfgmod.validate_config(cfgmod.merge_config(
        {"data": {"train_count": 6, "val_count": 2, "test_count": 3}}))
    train, val, test = cfgmod.build_datasets(cfg)
    assert (len(train), len(val), len(test)) == (6, 2, 3)
    assert all(len(s.label.indices) == 7 for s in train)


def test_build_datasets_random_geometry(tmp_path):
    cfg = cfgmod.load_config(write_config(tmp_path / "c.json", toy_config(tmp_path)))
    train, val, test = cfgmod.build_datasets(cfg)
    assert (len(train), len(val), len(test)) == (20, 5, 5)
    assert train[0].scene.pixels.shape == (8, 8)
    assert len(train[0].label.indices) == 2
    assert all(1 <= i <= 3 for s in train for i in s.label.indices)
    again, _, _ = cfgmod.build_datasets(cfg)
    assert np.array_equal(train[0].scene.pixels, again[0].scene.pixels)


def test_build_datasets_corpus_round_trip(tmp_path):
    samples = generate_corpus(10, seed=3, alphabet=ALPHABET)
    write_corpus(samples, tmp_path / "corpus", ALPHABET)
    cfg = cfgmod.validate_config(cfgmod.merge_config({
        "data": {"source": "corpus", "dir": str(tmp_path / "corpus"),
                 "train_count": 6, "val_count": 2, "test_count": 2},
    }))
    train, val, test = cfgmod.build_datasets(cfg)
    assert len(train) + len(val) + len(test) == 10
    assert (len(train), len(val), len(test)) == (6, 2, 2)


# ------------------------------------------------------------ CLI fixtures


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """One trained toy run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("toy")
    out = root / "run"
    cfg = toy_config(out)
    cfg_path = write_config(root / "toy.json", cfg)
    rc = cli.main(["train", "--config", cfg_path])
    assert rc == 0
    ckpts = {
        "stage1": out / "checkpoint_stage1.zip",
        "projected": out / "checkpoint_projected.zip",
        "final": out / "checkpoint_stage2-final.zip",
    }
    patterns = out / "patterns.bin"
    final = load_checkpoint(ckpts["final"])
    reference = root / "patterns_ref.bin"
    write_pattern_file(final.pattern_set(), reference)
    assert patterns.read_bytes() == reference.read_bytes()
    config = cfgmod.load_config(cfg_path)
    _, _, test_samples = cfgmod.build_datasets(config)
    images = []
    for i, sample in enumerate(test_samples[:2]):
        arr = np.floor(sample.scene.pixels * 255.0 + 0.5).astype(np.uint8)
        path = root / f"scene{i}.png"
        Image.fromarray(arr, mode="L").save(path)
        images.append(path)
    zero = root / "zero.png"
    Image.fromarray(np.zeros((8, 8), np.uint8), mode="L").save(zero)
    return {"root": root, "out": out, "config": cfg_path, "ckpts": ckpts,
            "patterns": patterns, "images": images, "zero": zero}


# ------------------------------------------------------------------- train


def test_train_writes_checkpoints_history_hashes(toy_run):
    for path in toy_run["ckpts"].values():
        assert path.is_file()
    history = (toy_run["out"] / "history.jsonl").read_text().splitlines()
    stages = {json.loads(line)["stage"] for line in history}
    assert stages == {"stage1", "projected", "stage2-final"}
    hashes = json.loads((toy_run["out"] / "hashes.json").read_text())
    assert set(hashes) == {"stage1", "projected", "stage2-final"}


def test_train_rerun_reproduces_hashes(toy_run, tmp_path):
    cfg = toy_config(tmp_path / "rerun")
    cfg_path = write_config(tmp_path / "c.json", cfg)
    assert cli.main(["train", "--config", cfg_path]) == 0
    first = json.loads((toy_run["out"] / "hashes.json").read_text())
    second = json.loads((tmp_path / "rerun" / "hashes.json").read_text())
    assert first == second


def test_train_missing_config_exits_2(capsys):
    assert cli.main(["train", "--config", "/nope/cfg.json"]) == 2
    assert "error:" in capsys.readouterr().err


def test_train_bad_override_exits_2(toy_run):
    rc = cli.main(["train", "--config", toy_run["config"],
                   "--set", "train.rho=1.5"])
    assert rc == 2


# ----------------------------------------------------------------- project


def test_project_stage1_and_wrong_stage(toy_run, tmp_path):
    out = tmp_path / "proj.zip"
    rc = cli.main(["project", "--checkpoint", str(toy_run["ckpts"]["stage1"]),
                   "--out", str(out), "--strategy", "reflect"])
    assert rc == 0
    assert load_checkpoint(out).stage == "projected"
    rc = cli.main(["project", "--checkpoint", str(out),
                   "--out", str(tmp_path / "again.zip")])
    assert rc == 5


def test_project_missing_checkpoint_exits_4(tmp_path):
    rc = cli.main(["project", "--checkpoint", str(tmp_path / "no.zip"),
                   "--out", str(tmp_path / "o.zip")])
    assert rc == 4


# -------------------------------------------------------------------- eval


def test_eval_writes_report(toy_run, tmp_path, capsys):
    report_path = tmp_path / "eval.json"
    rc = cli.main(["eval", "--config", toy_run["config"],
                   "--checkpoint", str(toy_run["ckpts"]["final"]),
                   "--out", str(report_path),
                   "--set", "eval.latency_samples=3"])
    assert rc == 0
    assert "exact_match:" in capsys.readouterr().out
    report = json.loads(report_path.read_text())
    assert report["count"] == 5
    assert 0.0 <= report["exact_match"] <= 1.0
    assert report["latency"]["count"] == 3
    assert len(report["checkpoint_hash"]) == 64


# ---------------------------------------------------------------- simulate


def test_simulate_writes_k_columns(toy_run, tmp_path):
    out = tmp_path / "m.csv"
    rc = cli.main(["simulate", "--patterns", str(toy_run["patterns"]),
                   "--out", str(out)] + [str(p) for p in toy_run["images"]])
    assert rc == 0
    rows = read_measurement_csv(out)
    assert len(rows) == 2
    assert all(len(values) == 4 for _, values in rows)
    assert rows[0][0] == "scene0"


def test_simulate_zero_image_zero_row(toy_run, tmp_path):
    out = tmp_path / "m.csv"
    assert cli.main(["simulate", "--patterns", str(toy_run["patterns"]),
                     "--out", str(out), str(toy_run["zero"])]) == 0
    (_, values), = read_measurement_csv(out)
    assert np.all(values == 0.0)


def test_simulate_noiseless_is_exact_and_idempotent(toy_run, tmp_path):
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["simulate", "--patterns", str(toy_run["patterns"])]
    image = str(toy_run["images"][0])
    assert cli.main(args + ["--out", str(out1), image]) == 0
    assert cli.main(args + ["--out", str(out2), image]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    pixels = np.asarray(Image.open(image).convert("L"), np.float64) / 255.0
    final = load_checkpoint(toy_run["ckpts"]["final"])
    expected = measure(Scene(pixels), final.pattern_set())
    (_, values), = read_measurement_csv(out1)
    assert np.array_equal(values, expected.values)


def test_simulate_noise_seeded(toy_run, tmp_path):
    image = str(toy_run["images"][0])
    base = ["simulate", "--patterns", str(toy_run["patterns"]), image]
    a, b, c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
    assert cli.main(base[:3] + ["--out", str(a), "--snr", "20", image]) == 0
    assert cli.main(base[:3] + ["--out", str(b), "--snr", "20", image]) == 0
    assert cli.main(base[:3] + ["--out", str(c), "--snr", "20",
                                "--seed", "1", image]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_simulate_geometry_mismatch_exits_4(toy_run, tmp_path):
    wrong = tmp_path / "wrong.png"
    Image.fromarray(np.zeros((5, 5), np.uint8), mode="L").save(wrong)
    rc = cli.main(["simulate", "--patterns", str(toy_run["patterns"]),
                   "--out", str(tmp_path / "m.csv"), str(wrong)])
    assert rc == 4


def test_simulate_missing_patterns_exits_4(toy_run, tmp_path):
    rc = cli.main(["simulate", "--patterns", str(tmp_path / "no.bin"),
                   "--out", str(tmp_path / "m.csv"),
                   str(toy_run["images"][0])])
    assert rc == 4


# ------------------------------------------------------------------- infer


def simulate_csv(toy_run, tmp_path):
    out = tmp_path / "m.csv"
    assert cli.main(["simulate", "--patterns", str(toy_run["patterns"]),
                     "--out", str(out)]
                    + [str(p) for p in toy_run["images"]]) == 0
    return out


def test_infer_round_trips_simulate(toy_run, tmp_path, capsys):
    csv_path = simulate_csv(toy_run, tmp_path)
    out = tmp_path / "decoded.csv"
    rc = cli.main(["infer", "--checkpoint", str(toy_run["ckpts"]["final"]),
                   "--measurements", str(csv_path), "--out", str(out)])
    assert rc == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2

    final = load_checkpoint(toy_run["ckpts"]["final"])
    model = final.build_model()
    patterns = final.pattern_set()
    for line, image in zip(lines, toy_run["images"]):
        pixels = np.asarray(Image.open(image).convert("L"), np.float64) / 255.0
        mv = measure(Scene(pixels), patterns)
        with torch.no_grad():
            grid = model.infer_grid(
                torch.from_numpy(mv.values[None, :]).to(model.dtype))[0].numpy()
        label, confs = cli._decode_with_confidence(grid)
        expected = "".join(f"<{i}>" for i in label.indices)
        sid, text, confstr = line.split(",")
        assert sid == image.stem
        assert text == expected
        assert confstr == ";".join(f"{c:.6f}" for c in confs)


def test_infer_empty_csv_exits_0(toy_run, tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    rc = cli.main(["infer", "--checkpoint", str(toy_run["ckpts"]["final"]),
                   "--measurements", str(empty)])
    assert rc == 0
    assert capsys.readouterr().out == ""


def test_infer_malformed_row_isolated(toy_run, tmp_path, capsys):
    csv_path = simulate_csv(toy_run, tmp_path)
    capsys.readouterr()  # drain the simulate output
    lines = csv_path.read_text().splitlines()
    lines.insert(1, "bad,1.0,not_a_number,3.0,4.0")
    csv_path.write_text("\n".join(lines) + "\n")
    rc = cli.main(["infer", "--checkpoint", str(toy_run["ckpts"]["final"]),
                   "--measurements", str(csv_path)])
    assert rc == 0
    out_lines = capsys.readouterr().out.splitlines()
    assert len(out_lines) == 3
    assert "ERROR" in out_lines[1]
    assert "ERROR" not in out_lines[0]
    assert "ERROR" not in out_lines[2]


def test_infer_k_mismatch_exits_4(toy_run, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("row0,1.0,2.0,3.0\n")
    rc = cli.main(["infer", "--checkpoint", str(toy_run["ckpts"]["final"]),
                   "--measurements", str(bad)])
    assert rc == 4


def test_infer_missing_checkpoint_exits_4(tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("row0,1.0\n")
    rc = cli.main(["infer", "--checkpoint", str(tmp_path / "no.zip"),
                   "--measurements", str(m)])
    assert rc == 4


# -------------------------------------------------------------- export-dmd


def test_export_dmd_counts_and_order(toy_run, tmp_path):
    out = tmp_path / "dmd"
    rc = cli.main(["export-dmd", "--checkpoint",
                   str(toy_run["ckpts"]["final"]), "--out-dir", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["files"]) == 4
    final = load_checkpoint(toy_run["ckpts"]["final"])
    patterns = final.pattern_set()
    for i, name in enumerate(manifest["files"]):
        frame = np.asarray(Image.open(out / name), np.float64)
        expected = np.floor(
            255.0 * patterns.as_images()[i] + 0.5)
        assert np.array_equal(frame, expected)


def test_export_dmd_stage1_exits_5(toy_run, tmp_path, capsys):
    rc = cli.main(["export-dmd", "--checkpoint",
                   str(toy_run["ckpts"]["stage1"]),
                   "--out-dir", str(tmp_path / "dmd")])
    assert rc == 5
    assert "project" in capsys.readouterr().err


def test_export_dmd_quantization_measurement_bound(toy_run, tmp_path):
    out = tmp_path / "dmd"
    assert cli.main(["export-dmd", "--checkpoint",
                     str(toy_run["ckpts"]["final"]),
                     "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    final = load_checkpoint(toy_run["ckpts"]["final"])
    patterns = final.pattern_set()
    rows = []
    for name in manifest["files"]:
        frame = np.asarray(Image.open(out / name), np.uint8)
        rows.append(frame.astype(np.float64).ravel() / 255.0)
    from spocr.sensing import PatternSet

    deq = PatternSet(np.stack(rows), mode=patterns.mode,
                     height=patterns.height, width=patterns.width)
    pixels = np.asarray(
        Image.open(toy_run["images"][0]).convert("L"), np.float64) / 255.0
    scene = Scene(pixels)
    got = measure(scene, deq).values
    ref = measure(scene, patterns).values
    bound = (1.0 / 510.0) * pixels.sum() + 1e-9
    assert np.all(np.abs(got - ref) <= bound)


# ---------------------------------------------------------------- gen-data


def test_gen_data_idempotent(tmp_path):
    cfg = {"data": {"train_count": 4, "val_count": 2, "test_count": 2,
                    "seed": 5}}
    cfg_path = write_config(tmp_path / "c.json", cfg)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen-data", "--config", cfg_path,
                     "--out-dir", str(a)]) == 0
    assert cli.main(["gen-data", "--config", cfg_path,
                     "--out-dir", str(b)]) == 0
    for part in ("train", "val", "test"):
        assert ((a / part / "manifest.jsonl").read_bytes()
                == (b / part / "manifest.jsonl").read_bytes())
    png = sorted((a / "train").glob("*.png"))[0]
    assert png.read_bytes() == (b / "train" / png.name).read_bytes()
    assert len(list((a / "train").glob("*.png"))) == 4


def test_gen_data_random_source_rejected(tmp_path):
    cfg_path = write_config(tmp_path / "c.json", toy_config(tmp_path))
    rc = cli.main(["gen-data", "--config", cfg_path,
                   "--out-dir", str(tmp_path / "d")])
    assert rc == 2


# ------------------------------------------------------------------- sweep


def sweep_overrides(out_dir):
    return [
        "--set", f"out_dir={out_dir}",
        "--set", "model.channels=[2,4,8,8]",
        "--set", "model.lstm_hidden=8",
        "--set", "model.lstm_layers=1",
        "--set", "train.stage1_epochs=1",
        "--set", "train.stage2_patience=1",
        "--set", "train.stage2_max_epochs=1",
        "--set", "train.batch_size=4",
        "--set", "data.train_count=8",
        "--set", "data.val_count=4",
        "--set", "data.test_count=4",
        "--set", "data.seed=1",
        "--set", "eval.axis=pattern_mode",
        "--set", 'eval.values=["random_unit"]',
        "--set", "eval.base_sr=0.03",
    ]


def test_sweep_cli_smoke(tmp_path, capsys):
    cfg_path = write_config(tmp_path / "c.json", {})
    rc = cli.main(["sweep", "--config", cfg_path]
                  + sweep_overrides(tmp_path / "run"))
    assert rc == 0
    out = capsys.readouterr().out
    assert "random_unit:" in out and "%" in out
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["axis"] == "pattern_mode"
    assert report["points"][0]["k"] == 100
    assert (tmp_path / "run" / "sweep_pattern_mode.png").is_file()


def test_sweep_cli_train_disabled_errors_in_band(tmp_path, capsys):
    cfg_path = write_config(tmp_path / "c.json", {})
    rc = cli.main(["sweep", "--config", cfg_path]
                  + sweep_overrides(tmp_path / "run")
                  + ["--set", "eval.train_if_missing=false"])
    assert rc == 0
    assert "ERROR" in capsys.readouterr().out
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["errors"]


def test_sweep_requires_plate_source(tmp_path):
    cfg_path = write_config(tmp_path / "c.json", toy_config(tmp_path))
    assert cli.main(["sweep", "--config", cfg_path]) == 2


# ------------------------------------------------------------------ parser


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_entry_point_installed():
    import importlib.metadata as md

    eps = md.entry_points(group="console_scripts")
    assert any(ep.name == "spocr" for ep in eps)
