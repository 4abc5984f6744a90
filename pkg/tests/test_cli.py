import csv
import json

import numpy as np
import pytest

from rbfcnn.cli import COMMANDS, main
from rbfcnn.config import ConfigError, ExperimentConfig, parse_override
from rbfcnn.imageio import read_pnm, write_pnm

SMALL = """
seed = 11

[data]
kind = "synthetic"
n = 120
classes = 2
image_size = 10
n_train = 80
n_test = 40

[rbf]
threshold = -3.0
max_images = 40
calibration_iters = 4
target_count = 4

[recon]
beta2 = 1.0
m = 2

[cnn]
conv_channels = [3, 4]

[train]
epochs = 2
batch_size = 20
harvest_epoch = 1
harvest_steps = 2

[attack]
names = ["fgsm", "pgd"]
steps = 3
n_images = 8
eot_samples = 2
spsa_samples = 4
dump_images = 2

[smoothing]
n_samples = 60
n0 = 10
n_images = 3

[sweep]
beta2 = [0.0, 1.0]

[bounds]
n_trials = 500
contraction_images = 10

[images]
ids = [0, 3]
"""

ORDER = ["train-rbf", "calibrate-threshold", "train", "attack", "certify", "sweep-beta2", "saliency",
         "reconstruct", "verify-bounds"]


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(SMALL)
    return p


def run_all(config, out):
    codes = {}
    for cmd in ORDER:
        codes[cmd] = main([cmd, "--config", str(config), "--out", str(out)])
    return codes


def snapshot(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.is_file()}


def test_every_subcommand_listed():
    assert sorted(COMMANDS) == sorted(ORDER)


def test_full_run_is_byte_identical(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert set(run_all(config, a).values()) == {0}
    assert set(run_all(config, b).values()) == {0}
    sa, sb = snapshot(a), snapshot(b)
    assert sa.keys() == sb.keys()
    for name in sa:
        assert sa[name] == sb[name], name
    expected = {"bank.json", "fit_report.json", "calibration.json", "checkpoint.json", "checkpoint.bin",
                "train_log.csv", "attack.csv", "certify.csv", "certify_curve.csv", "sweep_beta2.csv",
                "saliency_0.pgm", "saliency_3.pgm", "recon_0.pgm", "input_0.pgm", "bounds.json"}
    assert expected <= set(sa)


def test_outputs_content(config, tmp_path):
    out = tmp_path / "o"
    run_all(config, out)
    h = ExperimentConfig.load(config).hash()
    for name in ("train_log.csv", "attack.csv", "certify.csv", "certify_curve.csv", "sweep_beta2.csv"):
        rows = list(csv.DictReader(open(out / name)))
        assert rows and all(r["config_hash"] == h for r in rows), name

    log = list(csv.DictReader(open(out / "train_log.csv")))
    assert len(log) == 2

    rows = list(csv.DictReader(open(out / "attack.csv")))
    for name in ("fgsm", "pgd"):
        per = [r for r in rows if r["attack"] == name and r["row"] == "image"]
        summary = [r for r in rows if r["attack"] == name and r["row"] == "summary"]
        assert len(per) == 8 and len(summary) == 1
        assert float(summary[0]["robust_acc"]) == pytest.approx(np.mean([1 - int(r["success"]) for r in per]))
        assert all(float(r["achieved_norm"]) <= 0.1 + 1e-6 for r in per)

    cert = list(csv.DictReader(open(out / "certify.csv")))
    for r in cert:
        assert float(r["radius"]) >= 0
        if r["abstained"] == "1":
            assert float(r["radius"]) == 0

    sweep = list(csv.DictReader(open(out / "sweep_beta2.csv")))
    assert list(sweep[0]) == ["beta2", "clean_acc", "fgsm_acc", "pgd_acc", "config_hash"]
    assert sweep[0]["beta2"] == "0"

    report = json.loads((out / "fit_report.json").read_text())
    assert report["n_filters"] >= 1
    bounds = json.loads((out / "bounds.json").read_text())
    assert bounds["total_violations"] == 0 and all(r["trials"] == 500 for r in bounds["reports"])
    assert bounds["contraction"]["mean_ratio_linf"] < 1

    img = (out / "recon_0.pgm").read_bytes()
    assert img.startswith(b"P5\n10 10\n255\n") and len(img) == len(b"P5\n10 10\n255\n") + 100


def test_attack_eps_zero_keeps_clean_accuracy(config, tmp_path):
    out = tmp_path / "o"
    for cmd in ("train-rbf", "train"):
        assert main([cmd, "--config", str(config), "--out", str(out)]) == 0
    assert main(["attack", "--config", str(config), "--out", str(out), "--set", "attack.epsilon=0.0"]) == 0
    rows = [r for r in csv.DictReader(open(out / "attack.csv")) if r["row"] == "image"]
    assert all(r["clean_pred"] == r["adv_pred"] for r in rows)


def test_toy_two_cluster_bank(tmp_path):
    out = tmp_path / "o"
    args = ["train-rbf", "--out", str(out), "--set", "data.snr=inf", "--set", "data.n=40", "--set", "data.n_train=30",
            "--set", "data.n_test=10", "--set", "rbf.patch_size=12", "--set", "rbf.threshold=-20.0"]
    assert main(args) == 0
    assert json.loads((out / "fit_report.json").read_text())["n_filters"] == 2


def test_mnist_run_logs_reference_count(mnist_dir, tmp_path):
    out = tmp_path / "o"
    args = ["train-rbf", "--out", str(out), "--set", 'data.kind="mnist_idx"',
            "--set", f'data.images="{mnist_dir / "images-idx3-ubyte"}"',
            "--set", f'data.labels="{mnist_dir / "labels-idx1-ubyte"}"',
            "--set", "data.n_train=50", "--set", "data.n_test=10", "--set", "rbf.max_epochs=2"]
    assert main(args) == 0
    assert json.loads((out / "fit_report.json").read_text())["reference_filter_count"] == 24


def test_error_paths(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 2
    assert "filter bank not found" in capsys.readouterr().err
    main(["train-rbf", "--config", str(config), "--out", str(out)])
    main(["train", "--config", str(config), "--out", str(out)])
    assert main(["attack", "--config", str(config), "--out", str(out), "--set", 'attack.names=["cw"]']) == 2
    err = capsys.readouterr().err
    assert "cw" in err and all(n in err for n in ("fgsm", "pgd", "mi_fgsm", "bpda_eot", "spsa"))
    assert main(["saliency", "--config", str(config), "--out", str(out), "--set", "images.ids=[999]"]) == 2
    assert "image id 999" in capsys.readouterr().err
    assert main(["train-rbf", "--config", str(tmp_path / "missing.toml"), "--out", str(out)]) == 2
    assert main(["train-rbf", "--out", str(out), "--set", "rbf.nope=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_verify_bounds_fails_on_violation(tmp_path, monkeypatch):
    from rbfcnn import bounds
    monkeypatch.setattr(bounds, "TOL", -1.0)
    assert main(["verify-bounds", "--out", str(tmp_path / "o"), "--set", "bounds.n_trials=50"]) == 1


def test_lock_blocks_second_run(tmp_path):
    from filelock import FileLock
    out = tmp_path / "o"
    out.mkdir()
    with FileLock(str(out / ".rbfcnn.lock")):
        assert main(["verify-bounds", "--out", str(out), "--set", "bounds.n_trials=10"]) == 3


def test_seed_flag_changes_subseeds(config):
    a = ExperimentConfig.load(config)
    b = ExperimentConfig.load(config, seed=12)
    assert a.seed == 11 and b.seed == 12
    assert a.sub_seed("em") != b.sub_seed("em") and a.sub_seed("em") != a.sub_seed("train")
    assert a.sub_seed("em") == ExperimentConfig.load(config).sub_seed("em")
    assert a.hash() != b.hash()


def test_override_parsing():
    assert parse_override("recon.beta2=0.5") == {"recon": {"beta2": 0.5}}
    assert parse_override('attack.names=["pgd"]') == {"attack": {"names": ["pgd"]}}
    assert parse_override("data.kind=synthetic") == {"data": {"kind": "synthetic"}}
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gray = rng.random((5, 7, 1))
    color = rng.random((4, 3, 3))
    write_pnm(tmp_path / "g.pgm", gray)
    write_pnm(tmp_path / "c.ppm", color)
    assert (tmp_path / "g.pgm").read_bytes()[:2] == b"P5"
    assert (tmp_path / "c.ppm").read_bytes()[:2] == b"P6"
    assert np.abs(read_pnm(tmp_path / "g.pgm") - gray).max() <= 0.5 / 255 + 1e-12
    assert read_pnm(tmp_path / "c.ppm").shape == (4, 3, 3)
    with pytest.raises(ValueError):
        write_pnm(tmp_path / "bad.pgm", np.zeros((2, 2, 2)))


def test_pure_python_env_selects_fallback():
    import subprocess
    import sys
    code = "import rbfcnn; print(rbfcnn.BACKEND)"
    env = {"RBFCNN_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
