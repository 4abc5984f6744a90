"""Small CNN behind the reconstruction layer: training, inference, saliency.

Training always runs through the deterministic (beta2 = 0) reconstruction
surrogate. Inference can use the stochastic reconstruction and average the
softmax outputs of ``m`` runs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .datasets import MNIST_NOISE_CLIP, MNIST_NOISE_STD, gaussian_clipped_noise
from .reconstruction import ReconstructionConfig, reconstruct_image, surrogate_reconstruct

log = logging.getLogger(__name__)

REGIMES = ("rcnn", "rcnn_plus")
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class CnnConfig:
    input_shape: tuple = (28, 28, 1)
    n_classes: int = 10
    conv_channels: tuple = (16, 32)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        h, w, _ = self.input_shape
        shrink = len(self.conv_channels) * (self.kernel - 1)
        if h - shrink < 2 or w - shrink < 2 or (h - shrink) % 2 or (w - shrink) % 2:
            raise ValueError(f"input {self.input_shape} does not fit {len(self.conv_channels)} convs + 2x2 pool")

    def param_shapes(self):
        h, w, c = self.input_shape
        shapes = {}
        for i, f in enumerate(self.conv_channels):
            shapes[f"conv{i}.w"] = (self.kernel, self.kernel, c, f)
            shapes[f"conv{i}.b"] = (f,)
            c = f
            h, w = h - self.kernel + 1, w - self.kernel + 1
        shapes["dense.w"] = ((h // 2) * (w // 2) * c, self.n_classes)
        shapes["dense.b"] = (self.n_classes,)
        return shapes


@dataclass
class ModelParams:
    tensors: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg, seed=0):
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in cfg.param_shapes().items():
            if name.endswith(".b"):
                tensors[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        return cls(tensors, {"seed": seed})

    @classmethod
    def zeros(cls, cfg):
        return cls({k: np.zeros(s) for k, s in cfg.param_shapes().items()})

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))


@dataclass
class TrainConfig:
    regime: str = "rcnn"
    label_smoothing: float = 0.1
    lr: float = 0.05
    lr_decay: float = 1.0  # multiplicative, applied after every epoch
    momentum: float = 0.9
    epochs: int = 5
    batch_size: int = 50
    seed: int = 0
    noise_std: float = MNIST_NOISE_STD
    noise_clip: float = MNIST_NOISE_CLIP
    harvest_epoch: int | None = None  # after this many epochs, harvest adversarial noise
    harvest_eps: float = MNIST_NOISE_CLIP
    harvest_steps: int = 10
    adv_noise_prob: float = 0.5  # share of noisy copies using harvested noise

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.noise_clip < 0:
            raise ValueError("noise_clip must be >= 0")


def cnn_logits(x, weights, cfg):
    """conv-relu (per conv layer) - maxpool - dense on an (N, H, W, C) tensor."""
    h = x
    for i in range(len(cfg.conv_channels)):
        h = ad.relu(ad.conv2d(h, weights[f"conv{i}.w"], weights[f"conv{i}.b"]))
    h = ad.maxpool2x2(h)
    h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
    return ad.dense(h, weights["dense.w"], weights["dense.b"])


def smoothed_targets(labels, n_classes, alpha):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    t = np.full((labels.size, n_classes), alpha / n_classes)
    t[np.arange(labels.size), labels] += 1.0 - alpha
    return t


def loss_label_smoothing(probs, label, alpha):
    """Cross-entropy of ``probs`` against ``(1 - alpha) * onehot + alpha / K``."""
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    probs = np.asarray(probs, dtype=np.float64)
    target = smoothed_targets([label], probs.shape[-1], alpha)[0]
    used = target > 0
    return float(-np.sum(target[used] * np.log(probs[used])))


class Pipeline:
    """RBF + reconstruction + CNN, or the bare CNN when ``bank`` is None."""

    def __init__(self, params, cnn_cfg, bank=None, recon=None):
        self.params = params
        self.cnn_cfg = cnn_cfg
        self.bank = bank
        self.recon = recon if recon is not None else ReconstructionConfig(beta2=0.0, m=1)
        self._const = {k: ad.const(v) for k, v in params.tensors.items()}

    @property
    def defended(self):
        return self.bank is not None

    def with_recon(self, recon):
        return Pipeline(self.params, self.cnn_cfg, self.bank, recon)

    def static_logits(self, x):
        """Logits through the beta2 = 0 surrogate, as a graph node."""
        if self.bank is not None:
            x = surrogate_reconstruct(x, self.bank, self.recon.beta1, clip=self.recon.clip_output)
        return cnn_logits(x, self._const, self.cnn_cfg)

    def reconstruct(self, images, rng=None):
        if self.bank is None:
            return np.asarray(images, dtype=np.float64)
        return reconstruct_image(images, self.bank, self.recon, rng)

    def proba(self, images, rng=None):
        """Softmax output of one (possibly stochastic) run."""
        r = self.reconstruct(images, rng)
        return ad.softmax_fwd(cnn_logits(ad.const(r), self._const, self.cnn_cfg).data)

    def predict_averaged(self, images, rng=None, m=None):
        m = self.recon.m if m is None else m
        if m < 1:
            raise ValueError("m must be >= 1")
        if self.bank is None or self.recon.deterministic:
            probs = self.proba(images, rng)
        else:
            probs = self.proba(images, rng)
            for _ in range(m - 1):
                probs = probs + self.proba(images, rng)
            probs = probs / m
        return probs.argmax(axis=-1), probs

    def loss(self, images, labels, rng=None, stochastic=False):
        """Per-example plain cross-entropy (no graph)."""
        if stochastic:
            probs = self.proba(images, rng)
        else:
            probs = ad.softmax_fwd(self.static_logits(ad.const(images)).data)
        labels = np.asarray(labels)
        return -np.log(np.maximum(probs[np.arange(labels.size), labels], 1e-300))

    def static_loss_grad(self, images, labels, alpha=0.0):
        """Summed cross-entropy and its input gradient through the surrogate."""
        x = ad.param(images)
        loss = ad.softmax_ce(self.static_logits(x), smoothed_targets(labels, self.cnn_cfg.n_classes, alpha), "sum")
        (g,) = ad.grad(loss, [x])
        return float(loss.data), g

    def bpda_loss_grad(self, images, labels, rng):
        """Stochastic forward, surrogate backward (BPDA)."""
        if self.bank is None:
            return self.static_loss_grad(images, labels)
        r = ad.param(self.reconstruct(images, rng))
        loss = ad.softmax_ce(cnn_logits(r, self._const, self.cnn_cfg),
                             smoothed_targets(labels, self.cnn_cfg.n_classes, 0.0), "sum")
        (g_r,) = ad.grad(loss, [r])
        x = ad.param(images)
        r0 = surrogate_reconstruct(x, self.bank, self.recon.beta1, clip=self.recon.clip_output)
        (g_x,) = ad.grad(ad.sum(ad.mul(r0, ad.const(g_r))), [x])
        return float(loss.data), g_x


def forward(image, bank, beta1, params, cnn_cfg, recon=None, rng=None):
    """Class probabilities for one image or a batch.

    Without ``recon`` (or with beta2 = 0) the deterministic surrogate path is
    used; otherwise one stochastic reconstruction is drawn from ``rng``.
    """
    recon = recon or ReconstructionConfig(beta1=beta1, beta2=0.0, m=1)
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    if tuple(image.shape[-3:]) != cnn_cfg.input_shape:
        raise ad.ShapeError("forward", f"image shape {image.shape[-3:]} != {cnn_cfg.input_shape}")
    probs = Pipeline(params, cnn_cfg, bank, recon).proba(image[None] if single else image, rng)
    return probs[0] if single else probs


def predict_averaged(image, bank, cfg, params, cnn_cfg, rng):
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    cls, probs = Pipeline(params, cnn_cfg, bank, cfg).predict_averaged(image[None] if single else image, rng)
    return (int(cls[0]), probs[0]) if single else (cls, probs)


def saliency(image, bank, params, label, cnn_cfg, beta1=25.0, raw=False):
    """One-step loss gradient w.r.t. the input, min-max scaled to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    batch = image[None] if single else image
    labels = np.atleast_1d(label)
    pipe = Pipeline(params, cnn_cfg, bank, ReconstructionConfig(beta1=beta1, beta2=0.0, m=1))
    _, g = pipe.static_loss_grad(batch, labels)
    if not raw:
        lo = g.min(axis=(1, 2, 3), keepdims=True)
        span = g.max(axis=(1, 2, 3), keepdims=True) - lo
        g = np.clip(np.divide(g - lo, span, out=np.zeros_like(g), where=span > 0), 0.0, 1.0)
    return g[0] if single else g


# -- training ----------------------------------------------------------------

@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, accuracy, lr
    noisy_batches: int = 0
    adversarial_batches: int = 0
    harvested: int = 0


def _batch_grads(weights, images, targets, bank, beta1, cfg):
    x = ad.const(images)
    if bank is not None:
        x = surrogate_reconstruct(x, bank, beta1)
    logits = cnn_logits(x, weights, cfg)
    loss = ad.softmax_ce(logits, targets)
    names = list(weights)
    grads = ad.grad(loss, [weights[n] for n in names])
    return float(loss.data), logits.data, dict(zip(names, grads))


def harvest_adversarial_noise(params, dataset_images, labels, cnn_cfg, bank, attack_cfg, beta1=25.0, batch_size=200):
    """PGD(x) - x for every training image, against the static pipeline."""
    pipe = Pipeline(params, cnn_cfg, bank, ReconstructionConfig(beta1=beta1, beta2=0.0, m=1))
    noise = np.zeros_like(dataset_images)
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        res = pgd(dataset_images[sl], labels[sl], pipe, attack_cfg)
        noise[sl] = res.adversarial - dataset_images[sl]
    return noise


def train(dataset, bank, train_cfg, cnn_cfg, beta1=25.0, init_params=None, train_log=None):
    """Minibatch SGD with momentum through the beta2 = 0 pipeline.

    ``rcnn`` trains on clean images. ``rcnn_plus`` pairs every clean batch
    with a noisy copy: Gaussian noise clipped to ``noise_clip``, or, once
    adversarial noise has been harvested, a random harvested noise pattern
    with probability ``adv_noise_prob``.
    """
    params = init_params.copy() if init_params is not None else ModelParams.init(cnn_cfg, train_cfg.seed)
    if tuple(dataset.image_shape) != cnn_cfg.input_shape:
        raise ad.ShapeError("train", f"dataset images {dataset.image_shape} != {cnn_cfg.input_shape}")
    rng = np.random.default_rng(train_cfg.seed)
    weights = {k: ad.param(v) for k, v in params.tensors.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    train_log = train_log if train_log is not None else TrainLog()
    harvested = None
    lr = train_cfg.lr
    n = len(dataset)
    k = cnn_cfg.n_classes

    for epoch in range(train_cfg.epochs):
        if (train_cfg.regime == "rcnn_plus" and train_cfg.harvest_epoch is not None
                and epoch == train_cfg.harvest_epoch and harvested is None):
            snapshot = ModelParams({kk: w.data.copy() for kk, w in weights.items()})
            acfg = AttackConfig(norm="inf", epsilon=train_cfg.harvest_eps, steps=train_cfg.harvest_steps,
                                seed=train_cfg.seed + 1)
            harvested = harvest_adversarial_noise(snapshot, dataset.images, dataset.labels, cnn_cfg, bank, acfg, beta1)
            train_log.harvested = len(harvested)
            log.info("harvested %d adversarial noise patterns at epoch %d", len(harvested), epoch)

        order = rng.permutation(n)
        total, correct, seen = 0.0, 0, 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            if train_cfg.regime == "rcnn_plus":
                noisy = gaussian_clipped_noise(xb, train_cfg.noise_std, train_cfg.noise_clip, rng)
                train_log.noisy_batches += 1
                if harvested is not None:
                    use_adv = rng.random(len(idx)) < train_cfg.adv_noise_prob
                    picks = rng.integers(0, len(harvested), len(idx))
                    adv = np.clip(xb + harvested[picks], 0.0, 1.0)
                    noisy = np.where(use_adv[:, None, None, None], adv, noisy)
                    train_log.adversarial_batches += 1
                xb = np.concatenate([xb, noisy])
                yb = np.concatenate([yb, yb])
            try:
                loss, logits, grads = _batch_grads(weights, xb, smoothed_targets(yb, k, train_cfg.label_smoothing),
                                                   bank, beta1, cnn_cfg)
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch) from exc
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            for name, w in weights.items():
                v = velocity[name]
                v *= train_cfg.momentum
                v += grads[name]
                w.data = w.data - lr * v
            total += loss * len(yb)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(yb)
        train_log.epochs.append({"epoch": epoch + 1, "loss": total / seen, "accuracy": correct / seen, "lr": lr})
        log.info("epoch %d loss %.4f acc %.4f", epoch + 1, total / seen, correct / seen)
        lr *= train_cfg.lr_decay

    out = ModelParams({kk: w.data.copy() for kk, w in weights.items()},
                      {"seed": train_cfg.seed, "epochs": train_cfg.epochs, "regime": train_cfg.regime})
    return out


def accuracy(pipeline, images, labels, rng=None, batch_size=250, averaged=True):
    correct = 0
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        if averaged:
            pred, _ = pipeline.predict_averaged(images[sl], rng)
        else:
            pred = pipeline.proba(images[sl], rng).argmax(axis=1)
        correct += int((pred == labels[sl]).sum())
    return correct / len(labels)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params, cnn_cfg, train_cfg=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 LE blob)."""
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "len": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "version": CHECKPOINT_VERSION,
        "cnn_config": asdict(cnn_cfg),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "meta": params.meta,
        "blob": path.with_suffix(".bin").name,
        "tensor_index": index,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    path.with_suffix(".bin").write_bytes(b"".join(blobs))


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    tensors = {}
    for entry in manifest["tensor_index"]:
        chunk = blob[entry["offset"]:entry["offset"] + entry["len"]]
        if chunk.size != entry["len"]:
            raise ValueError(f"checkpoint blob truncated at tensor {entry['name']}")
        tensors[entry["name"]] = chunk.astype(np.float64).reshape(entry["shape"])
    cnn_cfg = CnnConfig(**manifest["cnn_config"])
    train_cfg = TrainConfig(**manifest["train_config"]) if manifest.get("train_config") else None
    return ModelParams(tensors, manifest.get("meta", {})), cnn_cfg, train_cfg
