"""Randomized-smoothing certification of l2 robustness.

The smoothed classifier votes over Gaussian-noised copies of the input. A
one-sided Clopper-Pearson bound on the top-class probability turns the vote
count into a certified l2 radius ``tau * Phi^-1(p_lower)``.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import beta as beta_dist
from scipy.stats import norm

ABSTAIN = -1
CSV_FIELDS = ("image_id", "prediction", "abstained", "radius", "votes_top", "n", "tau", "alpha")


class SmoothingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothingConfig:
    tau: float = 0.2
    n_samples: int = 1000
    alpha: float = 0.001
    n0: int = 100
    batch_size: int = 250

    def __post_init__(self):
        if not self.tau > 0:
            raise SmoothingConfigError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.alpha < 1:
            raise SmoothingConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.n_samples >= self.n0 >= 1:
            raise SmoothingConfigError(f"need n_samples >= n0 >= 1, got {self.n_samples}, {self.n0}")
        if self.batch_size < 1:
            raise SmoothingConfigError("batch_size must be >= 1")


@dataclass
class CertificationResult:
    prediction: int
    radius: float
    votes: np.ndarray  # per-class counts over the n_samples estimation draws
    n: int
    p_lower: float

    @property
    def abstained(self):
        return self.prediction == ABSTAIN


def clopper_pearson_lower(k, n, alpha):
    """Exact one-sided lower confidence bound for a binomial proportion."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if k == 0:
        return 0.0
    return float(beta_dist.ppf(alpha, k, n - k + 1))


def clopper_pearson_upper(k, n, alpha):
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if k == n:
        return 1.0
    return float(beta_dist.ppf(1 - alpha, k + 1, n - k))


def radius_from_plower(p_lower, tau):
    """Certified radius, 0 when the bound does not clear one half."""
    if p_lower <= 0.5:
        return 0.0
    return float(tau * norm.ppf(p_lower))


def _classifier(pipeline):
    """Adapt a Pipeline (one stochastic run per input) or a plain callable."""
    if hasattr(pipeline, "proba"):
        return lambda batch, rng: pipeline.proba(batch, rng).argmax(axis=-1)
    return pipeline


def _count_votes(classify, image, tau, n, batch_size, n_classes, rng):
    counts = np.zeros(n_classes, dtype=np.int64)
    done = 0
    while done < n:
        b = min(batch_size, n - done)
        noisy = image[None] + tau * rng.standard_normal((b,) + image.shape)
        pred = np.asarray(classify(noisy, rng), dtype=np.int64)
        counts += np.bincount(pred, minlength=n_classes)[:n_classes]
        done += b
    return counts


def smoothed_predict(image, pipeline, cfg, rng, n_classes=None):
    """Select the top class on ``n0`` draws, then certify it on ``n_samples`` fresh draws."""
    image = np.asarray(image, dtype=np.float64)
    if n_classes is None:
        n_classes = pipeline.cnn_cfg.n_classes if hasattr(pipeline, "cnn_cfg") else 2
    classify = _classifier(pipeline)
    selection = _count_votes(classify, image, cfg.tau, cfg.n0, cfg.batch_size, n_classes, rng)
    top = int(selection.argmax())
    votes = _count_votes(classify, image, cfg.tau, cfg.n_samples, cfg.batch_size, n_classes, rng)
    p_lower = clopper_pearson_lower(int(votes[top]), cfg.n_samples, cfg.alpha)
    if p_lower <= 0.5:
        return CertificationResult(ABSTAIN, 0.0, votes, cfg.n_samples, p_lower)
    return CertificationResult(top, radius_from_plower(p_lower, cfg.tau), votes, cfg.n_samples, p_lower)


def certify_dataset(images, pipeline, cfg, seed=0, n_classes=None):
    """Certify every image; image ``i`` draws from its own seeded stream."""
    return [smoothed_predict(img, pipeline, cfg, np.random.default_rng([seed, i]), n_classes)
            for i, img in enumerate(np.asarray(images, dtype=np.float64))]


def accuracy_at_radius(results, labels, radius):
    """Fraction of images predicted correctly with certified radius >= ``radius``."""
    labels = np.asarray(labels)
    if len(results) == 0:
        return 0.0
    ok = [(not r.abstained) and r.prediction == y and r.radius >= radius for r, y in zip(results, labels)]
    return float(np.mean(ok))


def certified_accuracy(dataset, pipeline, cfg, radius, seed=0):
    results = certify_dataset(dataset.images, pipeline, cfg, seed)
    return accuracy_at_radius(results, dataset.labels, radius)


def result_rows(results, cfg, extra=None):
    rows = []
    for i, r in enumerate(results):
        top = r.prediction if not r.abstained else int(np.argmax(r.votes))
        row = {"image_id": i, "prediction": r.prediction, "abstained": int(r.abstained),
               "radius": f"{r.radius:.9g}", "votes_top": int(r.votes[top]), "n": r.n,
               "tau": cfg.tau, "alpha": cfg.alpha}
        row.update(extra or {})
        rows.append(row)
    return rows


def write_csv(path, results, cfg, extra=None):
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CSV_FIELDS) + list(extra), lineterminator="\n")
        w.writeheader()
        w.writerows(result_rows(results, cfg, extra))
