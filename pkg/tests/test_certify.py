import csv

import numpy as np
import pytest
from scipy.stats import binom, norm

from rbfcnn.certify import (ABSTAIN, CertificationResult, SmoothingConfig, SmoothingConfigError,
                            accuracy_at_radius, certified_accuracy, certify_dataset, clopper_pearson_lower, clopper_pearson_upper,
                            radius_from_plower, smoothed_predict, write_csv)
from rbfcnn.datasets import Dataset


class LinearTwoClass:
    """Class 1 iff <w, x> > b; its smoothed probability is a Gaussian CDF."""

    def __init__(self, w, b):
        self.w, self.b = np.asarray(w, dtype=np.float64), float(b)

    def __call__(self, batch, rng):
        return (batch.reshape(len(batch), -1) @ self.w.ravel() > self.b).astype(np.int64)

    def p_class1(self, x, tau):
        return norm.cdf((x.ravel() @ self.w.ravel() - self.b) / (tau * np.linalg.norm(self.w)))


def cp_lower_oracle(k, n, alpha, iters=200):
    """Bisection on P(Binom(n, p) >= k) = alpha, from the binomial tail directly."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if binom.sf(k - 1, n, mid) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_clopper_pearson_examples():
    assert clopper_pearson_lower(0, 50, 0.01) == 0.0
    assert clopper_pearson_lower(100, 100, 0.001) == pytest.approx(0.001 ** (1 / 100), abs=1e-12)
    assert clopper_pearson_lower(90, 100, 0.05) == pytest.approx(0.8363, abs=1e-4)
    for k, n, a in [(90, 100, 0.05), (7, 20, 0.001), (999, 1000, 0.001), (513, 1000, 0.01)]:
        assert clopper_pearson_lower(k, n, a) == pytest.approx(cp_lower_oracle(k, n, a), abs=1e-9)
    with pytest.raises(ValueError):
        clopper_pearson_lower(5, 4, 0.1)


def test_all_votes_radius():
    p = 0.001 ** (1 / 100)
    assert p == pytest.approx(0.933, abs=1e-3)
    assert radius_from_plower(p, 0.25) == pytest.approx(0.25 * norm.ppf(p), abs=1e-12)


def test_radius_values_and_boundary():
    assert radius_from_plower(0.975, 0.2) == pytest.approx(0.391993, abs=1e-6)
    assert radius_from_plower(0.5, 0.2) == 0.0
    r = [radius_from_plower(p, 0.3) for p in np.linspace(0.5, 0.999, 40)]
    assert np.all(np.diff(r) >= 0)
    assert radius_from_plower(0.9, 0.6) == pytest.approx(2 * radius_from_plower(0.9, 0.3), abs=1e-12)


def test_config_validation():
    for bad in (dict(tau=0.0), dict(alpha=1.0), dict(alpha=0.0), dict(n_samples=50, n0=100), dict(n0=0)):
        with pytest.raises(SmoothingConfigError):
            SmoothingConfig(**bad)


def test_abstain_exactly_when_plower_at_most_half():
    clf = LinearTwoClass([1.0], 0.0)
    cfg = SmoothingConfig(tau=1.0, n_samples=200, n0=20, alpha=0.001)
    for i, x in enumerate(np.linspace(-0.4, 0.8, 25)):
        res = smoothed_predict(np.array([x]), clf, cfg, np.random.default_rng(i))
        assert res.abstained == (res.p_lower <= 0.5)
        if res.abstained:
            assert res.prediction == ABSTAIN and res.radius == 0.0
        else:
            assert res.radius > 0 and res.radius == pytest.approx(cfg.tau * norm.ppf(res.p_lower))


def test_radii_agree_with_closed_form_within_ci():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 4, 1))
    clf = LinearTwoClass(w, 0.0)
    cfg = SmoothingConfig(tau=0.5, n_samples=1000, n0=100, alpha=0.001)
    for i in range(30):
        x = rng.normal(0, 0.4, (4, 4, 1))
        res = smoothed_predict(x, clf, cfg, np.random.default_rng([1, i]))
        top = int(np.argmax(res.votes))
        p_true = clf.p_class1(x, cfg.tau)
        p_true = p_true if top == 1 else 1 - p_true
        k = int(res.votes[top])
        lo, hi = clopper_pearson_lower(k, cfg.n_samples, cfg.alpha), clopper_pearson_upper(k, cfg.n_samples, cfg.alpha)
        assert lo <= p_true <= hi
        if not res.abstained:
            assert cfg.tau * norm.ppf(lo) <= cfg.tau * norm.ppf(p_true)
            assert res.radius <= cfg.tau * norm.ppf(p_true)


def test_reproducible_votes():
    clf = LinearTwoClass([1.0, -1.0], 0.1)
    cfg = SmoothingConfig(tau=0.3, n_samples=300, n0=30)
    a = smoothed_predict(np.array([0.5, 0.2]), clf, cfg, np.random.default_rng(4))
    b = smoothed_predict(np.array([0.5, 0.2]), clf, cfg, np.random.default_rng(4))
    assert np.array_equal(a.votes, b.votes) and a.radius == b.radius


def test_abstention_vanishes_with_more_samples():
    clf = LinearTwoClass([1.0], 0.0)
    x = np.array([0.1])  # true top-class probability 0.54
    rates = []
    for n in (100, 10_000):
        cfg = SmoothingConfig(tau=1.0, n_samples=n, n0=min(n, 100), alpha=0.001, batch_size=5000)
        res = [smoothed_predict(x, clf, cfg, np.random.default_rng([n, i])) for i in range(20)]
        rates.append(np.mean([r.abstained for r in res]))
    assert rates[1] < rates[0]
    cfg = SmoothingConfig(tau=1.0, n_samples=200_000, n0=100, alpha=0.001, batch_size=50_000)
    assert not smoothed_predict(x, clf, cfg, np.random.default_rng(1)).abstained


def test_certified_accuracy_curve():
    clf = LinearTwoClass([1.0], 0.5)
    xs = np.array([[0.0], [1.0], [2.0], [0.4]])
    labels = np.array([0, 1, 1, 1])
    cfg = SmoothingConfig(tau=0.5, n_samples=500, n0=50)
    results = certify_dataset(xs, clf, cfg, seed=3, n_classes=2)
    at0 = accuracy_at_radius(results, labels, 0.0)
    correct = np.mean([(not r.abstained) and r.prediction == y for r, y in zip(results, labels)])
    assert at0 == correct
    pmax = clopper_pearson_lower(cfg.n_samples, cfg.n_samples, cfg.alpha)
    assert accuracy_at_radius(results, labels, cfg.tau * norm.ppf(pmax) + 1e-9) == 0.0


def test_pipeline_interface(small_pipeline, blobs):
    cfg = SmoothingConfig(tau=0.1, n_samples=40, n0=10, batch_size=20)
    acc = certified_accuracy(Dataset(blobs.images[:3], blobs.labels[:3]), small_pipeline, cfg, 0.0)
    assert 0.0 <= acc <= 1.0


def test_csv_export(tmp_path):
    results = [CertificationResult(1, 0.3, np.array([10, 90]), 100, 0.9),
               CertificationResult(ABSTAIN, 0.0, np.array([55, 45]), 100, 0.4)]
    write_csv(tmp_path / "c.csv", results, SmoothingConfig(n_samples=100, n0=10))
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert list(rows[0]) == ["image_id", "prediction", "abstained", "radius", "votes_top", "n", "tau", "alpha"]
    assert rows[1]["abstained"] == "1" and float(rows[1]["radius"]) == 0.0 and rows[0]["votes_top"] == "90"
