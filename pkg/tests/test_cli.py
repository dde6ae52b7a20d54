import csv
import json

import numpy as np
import pytest
import yaml

from latentvad.cli import main
from latentvad.config import ConfigError, build_config
from latentvad.data import SyntheticSpec, generate_dataset, write_split

TINY = {
    "preset": "moving_mnist",
    "model": {"input_size": [32, 32], "k": 4, "encoder_blocks": 2, "base_channels": 4, "latent_channels": 8,
              "t_offset": 2},
    "schedule": {"total_epochs": 2, "lr": 1e-3, "phase_switch_epoch": 1},
    "synthetic": {"sequence_length": 14},
    "n_train": 2,
    "n_test": 1,
    "max_steps_per_epoch": 2,
    "brightness": [1.0, 0.5],
    "rain": ["none", "heavy"],
    "d_values": [1, 2],
}


@pytest.fixture(scope="module")
def tiny_yaml(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_yaml):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", tiny_yaml, "--out", str(out), "--seed", "1", "--plots"]) == 0
    return out


# configuration

def test_precedence_preset_file_flags(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"preset": "avenue", "metric": "latent_cosine", "window": 32}))
    cfg = build_config(file=str(p), overrides={"window": 16})
    assert cfg.model.k == 6 and cfg.metric == "latent_cosine" and cfg.window == 16
    assert build_config("avenue").metric == "latent_mse"


def test_config_problems_are_listed():
    with pytest.raises(ConfigError) as err:
        build_config(overrides={"metric": "psnr", "brightness": [1.5], "bogus": 1})
    text = str(err.value)
    assert "metric" in text and "brightness" in text and "bogus" in text


def test_config_hash_is_stable():
    assert build_config("ucsd_ped2").hash() == build_config("ucsd_ped2").hash()
    assert build_config("ucsd_ped2").hash() != build_config("ucsd_ped1").hash()


# exit codes

def test_unknown_preset_exits_2_without_output(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--preset", "nope", "--out", str(out)]) == 2
    assert not out.exists()
    assert "preset" in capsys.readouterr().err


def test_missing_dataset_exits_2(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--preset", "ucsd_ped2", "--data", str(tmp_path / "missing"), "--out", str(out)]) == 2
    assert not out.exists()
    assert "data_root" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(tmp_path, tiny_yaml):
    assert main(["score", "--config", tiny_yaml, "--checkpoint", str(tmp_path / "x.pt"),
                 "--out", str(tmp_path / "o")]) == 3


# commands

def test_train_outputs(trained):
    for name in ("last.pt", "best.pt", "loss.csv", "loss.png", "config.yaml", "manifest.json"):
        assert (trained / name).exists()
    man = json.loads((trained / "manifest.json").read_text())
    assert man["command"] == "train" and "last" in man["checkpoints"]
    assert man["finished"] >= man["started"]


def test_score_is_byte_identical(trained, tiny_yaml, tmp_path):
    args = ["score", "--config", tiny_yaml, "--checkpoint", str(trained / "last.pt")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "scores.csv").read_bytes(), (tmp_path / "b" / "scores.csv").read_bytes()
    assert a == b
    header = a.decode().splitlines()[0]
    assert header == "video_id,frame_index,raw_score,normalized_score,metric"


def test_score_with_localize_and_plots(trained, tiny_yaml, tmp_path):
    out = tmp_path / "s"
    assert main(["score", "--config", tiny_yaml, "--checkpoint", str(trained / "last.pt"), "--out", str(out),
                 "--localize", "--plots", "--metric", "pixel_prediction", "--window", "5"]) == 0
    assert (out / "regions.csv").exists()
    assert list((out / "plots").glob("*.png"))
    assert list((out / "regions").glob("*.png"))


def test_checkpoint_size_mismatch_names_both(trained, tmp_path, capsys):
    (tmp_path / "test").mkdir()
    code = main(["score", "--preset", "ucsd_ped2", "--checkpoint", str(trained / "last.pt"),
                 "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == 2
    assert "(128, 192)" in err and "(32, 32)" in err


def test_eval_perfect_fixture(tmp_path, capsys):
    labels = tmp_path / "labels.csv"
    scores = tmp_path / "scores.csv"
    with open(labels, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "frame_index", "label"])
        for i in range(10):
            w.writerow(["v", i, int(i >= 5)])
    with open(scores, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "frame_index", "raw_score", "normalized_score", "metric"])
        for i in range(10):
            w.writerow(["v", i, i / 10, i / 10, "latent_mse"])
    assert main(["eval", "--scores", str(scores), "--labels", str(labels)]) == 0
    assert "auc 1.0" in capsys.readouterr().out


def test_synth_hash_is_reproducible(tiny_yaml, tmp_path, capsys):
    assert main(["synth", "--config", tiny_yaml, "--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out.split()[-1]
    assert main(["synth", "--config", tiny_yaml, "--out", str(tmp_path / "b")]) == 0
    second = capsys.readouterr().out.split()[-1]
    assert first == second and len(first) == 64
    assert (tmp_path / "a" / "test" / "labels.csv").exists()


def test_score_and_eval_on_dataset_on_disk(trained, tiny_yaml, tmp_path, capsys):
    spec = SyntheticSpec(sequence_length=14)
    vids = generate_dataset(spec, 1, tag="n") + generate_dataset(SyntheticSpec(sequence_length=14, speed=4), 1,
                                                                 tag="a")
    write_split(tmp_path / "ds", "test", vids)
    out = tmp_path / "o"
    assert main(["score", "--checkpoint", str(trained / "last.pt"), "--data", str(tmp_path / "ds"),
                 "--out", str(out), "--metric", "latent_mse"]) == 0
    capsys.readouterr()
    assert main(["eval", "--scores", str(out / "scores.csv"), "--data", str(tmp_path / "ds")]) == 0
    auc = float(capsys.readouterr().out.split()[1])
    assert 0.0 <= auc <= 1.0


def test_sweep(trained, tiny_yaml, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", tiny_yaml, "--checkpoint", str(trained / "last.pt"), "--out", str(out),
                 "--plots"]) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert len(rows) == 2 * 2 * 2
    assert (out / "sweep.png").exists()


def test_bench(trained, tiny_yaml, tmp_path, capsys):
    out = tmp_path / "b"
    assert main(["bench", "--config", tiny_yaml, "--checkpoint", str(trained / "last.pt"), "--out", str(out),
                 "--frames", "30", "--warmup", "5"]) == 0
    text = (out / "bench.txt").read_text()
    assert "mode: cached" in text and "mode: naive" in text and "speedup" in text


def test_stream_from_directory(trained, tiny_yaml, tmp_path, capsys):
    vids = generate_dataset(SyntheticSpec(sequence_length=12), 1, tag="s")
    write_split(tmp_path, "x", vids)
    assert main(["stream", "--config", tiny_yaml, "--checkpoint", str(trained / "last.pt"),
                 "--input", str(tmp_path / "x" / "s0000")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "frame_index,raw_score,normalized"
    assert len(lines) - 1 == 12 - (4 - 1 + 2)
    assert lines[1].split(",")[0] == "5"
    out = tmp_path / "st"
    assert main(["stream", "--config", tiny_yaml, "--checkpoint", str(trained / "last.pt"),
                 "--input", str(tmp_path / "x" / "s0000"), "--out", str(out)]) == 0
    assert (out / "stream.csv").read_text().splitlines() == lines
    assert (out / "manifest.json").exists() and (out / "config.yaml").exists()


def test_stream_from_stdin(trained, tiny_yaml, monkeypatch, capsys):
    import io
    import sys

    frames = (np.random.default_rng(0).uniform(0, 1, (8, 32, 32, 3)) * 255).astype(np.uint8)
    monkeypatch.setattr(sys, "stdin", io.TextIOWrapper(io.BytesIO(frames.tobytes())))
    assert main(["stream", "--config", tiny_yaml, "--checkpoint", str(trained / "last.pt"), "--input", "-",
                 "--frame-size", "32x32"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 1 + 8 - 5


def test_lowfps(tiny_yaml, tmp_path):
    out = tmp_path / "lf"
    assert main(["lowfps", "--config", tiny_yaml, "--out", str(out), "--plots"]) == 0
    rows = list(csv.DictReader(open(out / "lowfps.csv")))
    assert {r["d"] for r in rows} == {"1", "2"}
    assert (out / "lowfps.png").exists()


def test_mnist_exp(tiny_yaml, tmp_path):
    out = tmp_path / "mm"
    assert main(["mnist-exp", "--config", tiny_yaml, "--out", str(out), "--plots"]) == 0
    rows = list(csv.DictReader(open(out / "mnist_auc.csv")))
    assert {r["axis"] for r in rows} == {"shapes", "speed", "digits"}
    assert (out / "frame_grid.png").exists() and (out / "model.pt").exists()
