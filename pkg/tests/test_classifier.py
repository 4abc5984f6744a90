import math

import numpy as np
import pytest

from rbfcnn import autodiff as ad
from rbfcnn.attacks import AttackConfig
from rbfcnn.classifier import (CnnConfig, ModelParams, Pipeline, TrainConfig, TrainLog, TrainingDivergedError,
                               accuracy, forward, harvest_adversarial_noise, load_checkpoint, loss_label_smoothing,
                               predict_averaged, saliency, save_checkpoint, smoothed_targets, train)
from rbfcnn.datasets import gaussian_clipped_noise
from rbfcnn.reconstruction import ReconstructionConfig


def test_forward_sums_to_one(small_bank, small_cnn_cfg, blobs):
    params = ModelParams.init(small_cnn_cfg, seed=0)
    p = forward(blobs.images[:5], small_bank, 25.0, params, small_cnn_cfg)
    assert p.shape == (5, 2) and np.allclose(p.sum(1), 1, atol=1e-9)
    assert np.array_equal(p, forward(blobs.images[:5], small_bank, 25.0, params, small_cnn_cfg))


def test_zero_weights_uniform(small_bank, small_cnn_cfg, blobs):
    p = forward(blobs.images[0], small_bank, 25.0, ModelParams.zeros(small_cnn_cfg), small_cnn_cfg)
    assert np.allclose(p, 0.5, atol=1e-15)


def test_forward_shape_mismatch(small_bank, small_cnn_cfg):
    with pytest.raises(ad.ShapeError):
        forward(np.zeros((9, 9, 1)), small_bank, 25.0, ModelParams.init(small_cnn_cfg), small_cnn_cfg)


def test_cnn_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        CnnConfig(input_shape=(7, 7, 1), conv_channels=(4, 4))


def test_label_smoothing_zero_is_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        y = int(rng.integers(5))
        assert abs(loss_label_smoothing(p, y, 0.0) + math.log(p[y])) < 1e-12


def test_label_smoothing_minimum_is_entropy():
    t = smoothed_targets([1], 4, 0.2)[0]
    assert loss_label_smoothing(t, 1, 0.2) == pytest.approx(-(t * np.log(t)).sum(), abs=1e-12)


def test_label_smoothing_example():
    assert loss_label_smoothing([0.9, 0.1], 0, 0.2) == pytest.approx(0.325083, abs=1e-6)
    with pytest.raises(ValueError):
        loss_label_smoothing([0.5, 0.5], 0, 1.0)


def test_softmax_ce_alpha_zero_matches_plain(small_pipeline, blobs):
    x, y = blobs.images[:6], blobs.labels[:6]
    logits = small_pipeline.static_logits(ad.const(x))
    ce = float(ad.softmax_ce(logits, smoothed_targets(y, 2, 0.0), "sum").data)
    assert abs(ce - small_pipeline.loss(x, y).sum()) < 1e-12


def test_lr_zero_leaves_params(small_bank, small_cnn_cfg, blobs):
    init = ModelParams.init(small_cnn_cfg, seed=3)
    out = train(blobs.head(10), small_bank, TrainConfig(lr=0.0, epochs=1, batch_size=5), small_cnn_cfg,
                init_params=init)
    for k in init.tensors:
        assert np.array_equal(out.tensors[k], init.tensors[k])


def test_rcnn_never_adds_noise(small_bank, small_cnn_cfg, blobs):
    log = TrainLog()
    train(blobs.head(20), small_bank, TrainConfig(regime="rcnn", epochs=1, batch_size=10), small_cnn_cfg,
          train_log=log)
    assert log.noisy_batches == 0 and log.adversarial_batches == 0


def test_rcnn_plus_uses_noise_and_harvest(small_bank, small_cnn_cfg, blobs):
    log = TrainLog()
    cfg = TrainConfig(regime="rcnn_plus", epochs=2, batch_size=10, harvest_epoch=1, harvest_steps=2)
    train(blobs.head(20), small_bank, cfg, small_cnn_cfg, train_log=log)
    assert log.noisy_batches == 4 and log.adversarial_batches == 2 and log.harvested == 20


def test_training_learns_and_is_reproducible(small_bank, small_cnn_cfg, blobs):
    cfg = TrainConfig(epochs=4, batch_size=20, lr=0.05, seed=2)
    log = TrainLog()
    a = train(blobs, small_bank, cfg, small_cnn_cfg, train_log=log)
    b = train(blobs, small_bank, cfg, small_cnn_cfg)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])
    losses = [e["loss"] for e in log.epochs]
    assert losses[-1] < losses[0]
    pipe = Pipeline(a, small_cnn_cfg, small_bank)
    assert accuracy(pipe, blobs.images, blobs.labels) >= 0.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(small_bank, small_cnn_cfg, blobs):
    with pytest.raises(TrainingDivergedError, match=r"epoch \d") as exc:
        train(blobs.head(20), small_bank, TrainConfig(lr=1e200, epochs=3, batch_size=10), small_cnn_cfg)
    assert 0 <= exc.value.epoch < 3


def test_harvest_zero_eps_is_zero(small_bank, small_cnn_cfg, blobs):
    params = ModelParams.init(small_cnn_cfg, seed=0)
    noise = harvest_adversarial_noise(params, blobs.images[:6], blobs.labels[:6], small_cnn_cfg, small_bank,
                                      AttackConfig(norm="inf", epsilon=0.0, steps=3))
    assert np.array_equal(noise, np.zeros_like(noise))
    noise = harvest_adversarial_noise(params, blobs.images[:6], blobs.labels[:6], small_cnn_cfg, small_bank,
                                      AttackConfig(norm="inf", epsilon=0.2, steps=3))
    assert np.abs(noise).max() <= 0.2 + 1e-12
    assert np.all((blobs.images[:6] + noise >= 0) & (blobs.images[:6] + noise <= 1))


def test_noisy_copies_within_clip():
    x = np.random.default_rng(0).random((10, 5, 5, 1))
    noisy = gaussian_clipped_noise(x, 0.35, 0.3, np.random.default_rng(1))
    raw = np.clip(np.random.default_rng(1).normal(0.0, 0.35, x.shape), -0.3, 0.3)
    assert np.abs(raw).max() <= 0.3
    assert np.array_equal(noisy, np.clip(x + raw, 0, 1))
    # subtracting back re-rounds, so allow one ulp of the pixel scale
    assert np.abs(noisy - x).max() <= 0.3 + 1e-15


def test_predict_averaged_m_reductions(small_pipeline, blobs):
    x = blobs.images[:4]
    det = small_pipeline.with_recon(ReconstructionConfig(beta2=0.0, m=1))
    det10 = small_pipeline.with_recon(ReconstructionConfig(beta2=0.0, m=10))
    assert np.array_equal(det.predict_averaged(x)[1], det10.predict_averaged(x)[1])
    stoch1 = small_pipeline.with_recon(ReconstructionConfig(beta2=1.75, m=1))
    p_avg = stoch1.predict_averaged(x, np.random.default_rng(5))[1]
    assert np.array_equal(p_avg, stoch1.proba(x, np.random.default_rng(5)))
    cfg10 = ReconstructionConfig(beta2=1.75, m=10)
    c1, p1 = predict_averaged(x, small_pipeline.bank, cfg10, small_pipeline.params, small_pipeline.cnn_cfg,
                              np.random.default_rng(9))
    c2, p2 = predict_averaged(x, small_pipeline.bank, cfg10, small_pipeline.params, small_pipeline.cnn_cfg,
                              np.random.default_rng(9))
    assert np.array_equal(c1, c2) and np.all((p1 >= 0) & (p1 <= 1)) and np.allclose(p1.sum(1), 1, atol=1e-9)


def test_saliency_shape_and_zero_net(small_bank, small_cnn_cfg, blobs):
    zeros = ModelParams.zeros(small_cnn_cfg)
    raw = saliency(blobs.images[0], small_bank, zeros, 0, small_cnn_cfg, raw=True)
    assert raw.shape == blobs.images[0].shape and np.all(raw == 0)
    s = saliency(blobs.images[0], small_bank, ModelParams.init(small_cnn_cfg), 0, small_cnn_cfg)
    assert s.shape == blobs.images[0].shape and s.min() >= 0 and s.max() <= 1


def test_saliency_matches_finite_differences(small_bank, small_cnn_cfg, blobs):
    params = ModelParams.init(small_cnn_cfg, seed=4)
    pipe = Pipeline(params, small_cnn_cfg, small_bank)
    img = blobs.images[1]
    label = int(blobs.labels[1])
    g = saliency(img, small_bank, params, label, small_cnn_cfg, raw=True)
    rng = np.random.default_rng(0)
    h = 1e-5
    checked = 0
    for i in rng.choice(img.size, 80, replace=False):
        c = np.unravel_index(i, img.shape)
        if not 1e-3 < img[c] < 1 - 1e-3:
            continue
        xp, xm = img.copy(), img.copy()
        xp[c] += h
        xm[c] -= h
        num = (pipe.loss(xp[None], [label])[0] - pipe.loss(xm[None], [label])[0]) / (2 * h)
        assert abs(num - g[c]) <= 1e-3 * max(abs(num), abs(g[c])) + 1e-9
        checked += 1
    assert checked >= 50


def test_checkpoint_round_trip(tmp_path, small_bank, small_cnn_cfg, blobs):
    params = ModelParams.init(small_cnn_cfg, seed=5)
    save_checkpoint(tmp_path / "ck", params, small_cnn_cfg, TrainConfig())
    manifest = (tmp_path / "ck.json").read_text()
    assert '"tensor_index"' in manifest and '"cnn_config"' in manifest
    back, cnn_cfg, train_cfg = load_checkpoint(tmp_path / "ck")
    assert cnn_cfg == small_cnn_cfg and train_cfg == TrainConfig()
    a = forward(blobs.images[:3], small_bank, 25.0, params, small_cnn_cfg)
    b = forward(blobs.images[:3], small_bank, 25.0, back, cnn_cfg)
    assert np.abs(a - b).max() < 1e-6
