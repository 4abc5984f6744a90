"""Command-line entry point: ``rbfcnn <subcommand> [--config F] [--seed N] [--out DIR]``.

Every subcommand reads the experiment config, writes its outputs into the
output directory and is a pure function of (config, input files, seed).
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import bounds, certify
from .attacks import ATTACK_FUNCS, ATTACKS, AttackConfig, run_attack
from .classifier import (CnnConfig, Pipeline, TrainConfig, TrainLog, accuracy, load_checkpoint, save_checkpoint,
                         saliency, train)
from .config import ConfigError, ExperimentConfig
from .datasets import (DatasetFormatError, load_cifar10_binary, load_mnist_idx, synthetic_blobs,
                       train_test_split)
from .imageio import write_pnm
from .rbf import REFERENCE_FILTER_COUNTS, FilterBank, calibrate_threshold, em_fit, image_patches
from .reconstruction import ReconstructionConfig, reconstruct_image

log = logging.getLogger("rbfcnn")

THREADS_ENV = "RBFCNN_THREADS"
LOCK_NAME = ".rbfcnn.lock"


class CliError(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _load_data(cfg):
    d = cfg["data"]
    kind = d["kind"]
    if kind == "synthetic":
        full = synthetic_blobs(d["n"], d["classes"], d["image_size"], seed=cfg.sub_seed("data"),
                               channels=d["channels"], snr=d["snr"])
    elif kind == "mnist_idx":
        full = load_mnist_idx(cfg.require("data", "images", "image file"), cfg.require("data", "labels", "label file"))
    elif kind == "cifar10":
        if not d["batches"]:
            raise ConfigError("data.batches must list CIFAR-10 batch files")
        paths = [cfg.path(p) for p in d["batches"]]
        for p in paths:
            if not p.exists():
                raise ConfigError(f"CIFAR-10 batch not found: {p}")
        full = load_cifar10_binary(paths)
    else:
        raise ConfigError(f"data.kind must be synthetic, mnist_idx or cifar10, got {kind!r}")
    n_train = min(d["n_train"], len(full))
    n_test = min(d["n_test"], len(full) - n_train)
    return train_test_split(full, n_train, n_test, seed=cfg.sub_seed("split"))


def _bank_path(cfg, out):
    p = cfg.path(cfg["rbf"]["bank"])
    return p if p is not None else out / "bank.json"


def _load_bank(cfg, out):
    p = _bank_path(cfg, out)
    if not p.exists():
        raise CliError(f"filter bank not found at {p}; run train-rbf first or set rbf.bank")
    return FilterBank.load(p)


def _checkpoint_path(cfg, out):
    p = cfg.path(cfg["train"]["checkpoint"])
    return p if p is not None else out / "checkpoint"


def _recon_cfg(cfg, **changes):
    r = cfg["recon"]
    return ReconstructionConfig(beta1=r["beta1"], beta2=r["beta2"], m=r["m"],
                                sample_sharing=r["sample_sharing"]).replace(**changes)


def _pipeline(cfg, out, recon=None):
    ckpt = _checkpoint_path(cfg, out)
    if not ckpt.with_suffix(".json").exists():
        raise CliError(f"checkpoint not found at {ckpt}.json; run train first or set train.checkpoint")
    params, cnn_cfg, _ = load_checkpoint(ckpt)
    bank = _load_bank(cfg, out) if params.meta.get("defended", True) else None
    return Pipeline(params, cnn_cfg, bank, recon or _recon_cfg(cfg))


def _attack_cfg(cfg, seed):
    a = cfg["attack"]
    return AttackConfig(norm=a["norm"], epsilon=a["epsilon"], steps=a["steps"], step_size=a["step_size"] or None,
                        eot_samples=a["eot_samples"], spsa_samples=a["spsa_samples"], spsa_lr=a["spsa_lr"],
                        seed=seed)


def _attack_names(cfg):
    names = list(cfg["attack"]["names"])
    bad = [n for n in names if n not in ATTACK_FUNCS]
    if bad:
        raise CliError(f"unknown attack {bad[0]!r}; valid attacks: {', '.join(ATTACKS)}")
    return names


def _write_csv(path, fields, rows, config_hash):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields) + ["config_hash"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "config_hash": config_hash})


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fmt(x):
    return f"{float(x):.9g}"


def _image_ids(cfg, n):
    ids = [int(i) for i in cfg["images"]["ids"]]
    for i in ids:
        if not 0 <= i < n:
            raise CliError(f"image id {i} out of range for {n} test images")
    return ids


# -- subcommands -------------------------------------------------------------

def cmd_train_rbf(cfg, out):
    r = cfg["rbf"]
    train_set, _ = _load_data(cfg)
    images = train_set.images[:r["max_images"]]
    patches = image_patches(images, r["patch_size"], r["max_patches"], seed=cfg.sub_seed("patches"))
    bank, report = em_fit(patches, r["threshold"], max_epochs=r["max_epochs"], seed=cfg.sub_seed("em"),
                          patch_size=r["patch_size"], channels=images.shape[-1], with_report=True)
    bank.save(out / "bank.json")
    doc = report.as_dict()
    doc["n_patches"] = int(patches.shape[0])
    ref = REFERENCE_FILTER_COUNTS.get(cfg["data"]["kind"].replace("_idx", ""))
    if ref is not None:
        doc["reference_filter_count"] = ref
        log.info("learned %d filters (reference count on the full dataset: %d)", len(bank), ref)
    else:
        log.info("learned %d filters", len(bank))
    _write_json(out / "fit_report.json", doc)
    return 0


def cmd_calibrate_threshold(cfg, out):
    r = cfg["rbf"]
    train_set, _ = _load_data(cfg)
    images = train_set.images[:r["max_images"]]
    patches = image_patches(images, r["patch_size"], r["max_patches"], seed=cfg.sub_seed("patches"))
    thr, count = calibrate_threshold(patches, r["target_count"], seed=cfg.sub_seed("em"),
                                     max_epochs=r["calibration_epochs"], iters=r["calibration_iters"],
                                     patch_size=r["patch_size"], channels=images.shape[-1])
    _write_json(out / "calibration.json", {"threshold": thr, "filter_count": count, "target_count": r["target_count"]})
    log.info("threshold %.6g gives %d filters (target %d)", thr, count, r["target_count"])
    return 0


def cmd_train(cfg, out):
    t = cfg["train"]
    train_set, test_set = _load_data(cfg)
    defended = bool(t["defended"])
    bank = _load_bank(cfg, out) if defended else None
    cnn_cfg = CnnConfig(input_shape=train_set.image_shape, n_classes=int(cfg["data"]["classes"])
                        if cfg["data"]["kind"] == "synthetic" else 10,
                        conv_channels=tuple(cfg["cnn"]["conv_channels"]), kernel=cfg["cnn"]["kernel"])
    train_cfg = TrainConfig(regime=t["regime"], label_smoothing=t["label_smoothing"], lr=t["lr"],
                            lr_decay=t["lr_decay"], momentum=t["momentum"], epochs=t["epochs"],
                            batch_size=t["batch_size"], seed=cfg.sub_seed("train"), noise_std=t["noise_std"],
                            noise_clip=t["noise_clip"],
                            harvest_epoch=t["harvest_epoch"] if t["harvest_epoch"] >= 0 else None,
                            harvest_eps=t["harvest_eps"], harvest_steps=t["harvest_steps"])
    tlog = TrainLog()
    params = train(train_set, bank, train_cfg, cnn_cfg, beta1=cfg["recon"]["beta1"], train_log=tlog)
    params.meta["defended"] = defended
    save_checkpoint(out / "checkpoint", params, cnn_cfg, train_cfg)
    rows = [{"epoch": e["epoch"], "loss": _fmt(e["loss"]), "accuracy": _fmt(e["accuracy"]), "lr": _fmt(e["lr"])}
            for e in tlog.epochs]
    _write_csv(out / "train_log.csv", ("epoch", "loss", "accuracy", "lr"), rows, cfg.hash())
    pipe = Pipeline(params, cnn_cfg, bank, _recon_cfg(cfg, beta2=0.0, m=1))
    log.info("held-out accuracy (beta2 = 0): %.4f", accuracy(pipe, test_set.images, test_set.labels))
    return 0


def cmd_attack(cfg, out):
    names = _attack_names(cfg)
    pipe = _pipeline(cfg, out)
    _, test_set = _load_data(cfg)
    test_set = test_set.head(cfg["attack"]["n_images"])
    rows, fields = [], ("row", "image_id", "norm", "epsilon", "attack", "label", "success", "achieved_norm",
                        "clean_pred", "adv_pred", "robust_acc")
    ext = "pgm" if test_set.image_shape[-1] == 1 else "ppm"
    for name in names:
        acfg = _attack_cfg(cfg, cfg.sub_seed(f"attack:{name}"))
        res = run_attack(name, test_set.images, test_set.labels, pipe, acfg)
        common = {"norm": acfg.norm, "epsilon": _fmt(acfg.epsilon), "attack": name}
        for i in range(len(test_set)):
            rows.append({"row": "image", "image_id": i, **common, "label": int(test_set.labels[i]),
                         "success": int(res.success[i]), "achieved_norm": _fmt(res.achieved_norm[i]),
                         "clean_pred": int(res.clean_pred[i]), "adv_pred": int(res.adv_pred[i])})
        robust = float(np.mean(~res.success))
        rows.append({"row": "summary", **common, "achieved_norm": _fmt(res.achieved_norm.max()),
                     "robust_acc": _fmt(robust)})
        log.info("%s: robust accuracy %.4f", name, robust)
        for i in range(min(cfg["attack"]["dump_images"], len(test_set))):
            write_pnm(out / f"adv_{name}_{i}.{ext}", res.adversarial[i])
    _write_csv(out / "attack.csv", fields, rows, cfg.hash())
    return 0


def cmd_certify(cfg, out):
    s = cfg["smoothing"]
    pipe = _pipeline(cfg, out)
    _, test_set = _load_data(cfg)
    test_set = test_set.head(s["n_images"])
    scfg = certify.SmoothingConfig(tau=s["tau"], n_samples=s["n_samples"], alpha=s["alpha"], n0=s["n0"])
    results = certify.certify_dataset(test_set.images, pipe, scfg, seed=cfg.sub_seed("certify"))
    h = cfg.hash()
    rows = certify.result_rows(results, scfg, {"label": None})
    for row, y in zip(rows, test_set.labels):
        row["label"] = int(y)
    _write_csv(out / "certify.csv", list(certify.CSV_FIELDS) + ["label"], rows, h)
    curve = [{"radius": _fmt(r), "certified_accuracy": _fmt(certify.accuracy_at_radius(results, test_set.labels, r))}
             for r in s["radii"]]
    _write_csv(out / "certify_curve.csv", ("radius", "certified_accuracy"), curve, h)
    return 0


def cmd_sweep_beta2(cfg, out):
    names = _attack_names(cfg)
    base = _pipeline(cfg, out)
    _, test_set = _load_data(cfg)
    test_set = test_set.head(cfg["attack"]["n_images"])
    rows = []
    for b2 in cfg["sweep"]["beta2"]:
        pipe = base.with_recon(base.recon.replace(beta2=float(b2)))
        rng = np.random.default_rng(cfg.sub_seed("sweep"))
        row = {"beta2": _fmt(b2), "clean_acc": _fmt(accuracy(pipe, test_set.images, test_set.labels, rng))}
        for name in names:
            res = run_attack(name, test_set.images, test_set.labels, pipe, _attack_cfg(cfg, cfg.sub_seed(f"attack:{name}")))
            row[f"{name}_acc"] = _fmt(np.mean(~res.success))
        rows.append(row)
        log.info("beta2 %s: %s", b2, row)
    _write_csv(out / "sweep_beta2.csv", ["beta2", "clean_acc"] + [f"{n}_acc" for n in names], rows, cfg.hash())
    return 0


def cmd_saliency(cfg, out):
    pipe = _pipeline(cfg, out)
    _, test_set = _load_data(cfg)
    ext = "pgm" if test_set.image_shape[-1] == 1 else "ppm"
    for i in _image_ids(cfg, len(test_set)):
        g = saliency(test_set.images[i], pipe.bank, pipe.params, int(test_set.labels[i]), pipe.cnn_cfg,
                     beta1=pipe.recon.beta1)
        write_pnm(out / f"saliency_{i}.{ext}", g)
    return 0


def cmd_reconstruct(cfg, out):
    bank = _load_bank(cfg, out)
    recon = _recon_cfg(cfg)
    _, test_set = _load_data(cfg)
    ext = "pgm" if test_set.image_shape[-1] == 1 else "ppm"
    for i in _image_ids(cfg, len(test_set)):
        rng = np.random.default_rng([cfg.sub_seed("reconstruct"), i])
        write_pnm(out / f"input_{i}.{ext}", test_set.images[i])
        write_pnm(out / f"recon_{i}.{ext}", reconstruct_image(test_set.images[i], bank, recon, rng))
    return 0


def cmd_verify_bounds(cfg, out):
    b = cfg["bounds"]
    reports = bounds.run_bound_suite(b["n_trials"], b["dim"], tuple(b["delta_max"]), seed=cfg.sub_seed("bounds"))
    contraction = None
    if _bank_path(cfg, out).exists():
        bank = _load_bank(cfg, out)
        _, test_set = _load_data(cfg)
        imgs = test_set.images[:b["contraction_images"]]
        recon = _recon_cfg(cfg, beta2=0.0, m=1)
        contraction = {"epsilon": b["contraction_eps"], "images": len(imgs)}
        for p in ("1", "2", "inf"):
            mean, _ = bounds.contraction_measure(imgs, bank, recon, p, b["contraction_eps"],
                                                 seed=cfg.sub_seed(f"contraction:{p}"))
            contraction[f"mean_ratio_l{p}"] = mean
    doc = json.loads(bounds.suite_json(reports, contraction))
    doc["config_hash"] = cfg.hash()
    _write_json(out / "bounds.json", doc)
    total = doc["total_violations"]
    log.info("%d bound violations over %d checks", total, sum(r.trials for r in reports))
    return 1 if total else 0


HELP = {
    "train-rbf": "fit the RBF filter bank with non-parametric EM",
    "train": "train the CNN (optionally behind the reconstruction layer)",
    "attack": "run the configured attacks and report robust accuracy",
    "certify": "randomized-smoothing l2 certification",
    "sweep-beta2": "clean and robust accuracy across beta2 values",
    "saliency": "dump input-gradient saliency maps",
    "reconstruct": "dump inputs and their reconstructions",
    "verify-bounds": "numerically check the match-score perturbation bounds",
    "calibrate-threshold": "search the creation threshold for a target filter count",
}

COMMANDS = {
    "train-rbf": cmd_train_rbf,
    "train": cmd_train,
    "attack": cmd_attack,
    "certify": cmd_certify,
    "sweep-beta2": cmd_sweep_beta2,
    "saliency": cmd_saliency,
    "reconstruct": cmd_reconstruct,
    "verify-bounds": cmd_verify_bounds,
    "calibrate-threshold": cmd_calibrate_threshold,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="rbfcnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", type=Path, help="TOML experiment config")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        cfg = ExperimentConfig.load(args.config, args.set, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(args.out / LOCK_NAME), timeout=0):
            with threadpool_limits(limits=int(threads) if threads else None):
                return COMMANDS[args.command](cfg, args.out)
    except Timeout:
        print(f"rbfcnn: another run holds the lock on {args.out}", file=sys.stderr)
        return 3
    except (CliError, ConfigError, DatasetFormatError, ValueError, KeyError) as exc:
        print(f"rbfcnn {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
