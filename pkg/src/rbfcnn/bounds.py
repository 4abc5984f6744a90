"""Numerical checks of how bounded input perturbations move RBF match scores.

Three facts are verified on random trials:

* the exact expansion of ``s(z + d)`` around ``s(z)``;
* an interval that contains the score shift whenever ``|d|_inf <= dmax``;
* an upper bound on the score a far-away filter can reach under such a ``d``.

``contraction_measure`` complements them empirically: it reports how much the
deterministic reconstruction shrinks random input perturbations.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .reconstruction import reconstruct_image

TOL = 1e-9
HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def _score(z, mu, sigma):
    """Match score along the last axis; ``sigma`` broadcasts against ``z[..., 0]``."""
    d2 = np.sum((z - mu) ** 2, axis=-1)
    return -(HALF_LOG_2PI + np.log(sigma)) - d2 / (2 * sigma ** 2)


def score_shift_exact(z, delta, mu, sigma):
    """(lhs, rhs): the perturbed score directly and via the expansion around ``z``."""
    z, delta, mu = (np.asarray(a, dtype=np.float64) for a in (z, delta, mu))
    if not z.shape == delta.shape == mu.shape:
        raise ValueError(f"shape mismatch {z.shape}, {delta.shape}, {mu.shape}")
    sigma = np.asarray(sigma, dtype=np.float64)
    var = sigma ** 2
    lhs = _score(z + delta, mu, sigma)
    rhs = (_score(z, mu, sigma) - np.sum(delta ** 2, axis=-1) / (2 * var)
           - np.sum(delta * (z - mu), axis=-1) / var)
    return lhs, rhs


def linf_shift_bounds(z, mu, sigma, delta_max):
    """Interval holding ``s(z + d) - s(z)`` for every ``|d|_inf <= delta_max``."""
    if np.any(np.asarray(delta_max) < 0):
        raise ValueError("delta_max must be >= 0")
    z, mu = np.asarray(z, dtype=np.float64), np.asarray(mu, dtype=np.float64)
    n = z.shape[-1]
    var = np.asarray(sigma, dtype=np.float64) ** 2
    dist = np.linalg.norm(z - mu, axis=-1)
    cross = delta_max * np.sqrt(n) * dist / var
    lower = -n * delta_max ** 2 / (2 * var) - cross
    return lower, cross


def low_match_upper_bound(z, mu, sigma, delta_max):
    """Largest score filter (mu, sigma) can give ``z + d`` for ``|d|_inf <= delta_max``."""
    if np.any(np.asarray(delta_max) < 0):
        raise ValueError("delta_max must be >= 0")
    z, mu = np.asarray(z, dtype=np.float64), np.asarray(mu, dtype=np.float64)
    n = z.shape[-1]
    sigma = np.asarray(sigma, dtype=np.float64)
    dist = np.linalg.norm(z - mu, axis=-1)
    return -(HALF_LOG_2PI + np.log(sigma)) - (dist - 2 * delta_max * np.sqrt(n)) * dist / (2 * sigma ** 2)


@dataclass
class TrialSet:
    z: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray
    delta_max: float


def random_trials(n_trials, dim, delta_max, seed=0):
    """z, mu ~ U[0,1]^dim, sigma ~ U[0.1, 2], delta ~ U of the l_inf ball of radius ``delta_max``."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, (n_trials, dim))
    mu = rng.uniform(0.0, 1.0, (n_trials, dim))
    sigma = rng.uniform(0.1, 2.0, n_trials)
    delta = rng.uniform(-delta_max, delta_max, (n_trials, dim))
    return TrialSet(z, mu, sigma, delta, delta_max)


@dataclass
class BoundReport:
    name: str
    delta_max: float
    trials: int
    violations: int
    max_slack: float  # most negative margin to the bound; < 0 means a violation
    shift: list = field(default_factory=list, repr=False)
    lower: list = field(default_factory=list, repr=False)
    upper: list = field(default_factory=list, repr=False)

    def as_dict(self, per_trial=False):
        d = asdict(self)
        if not per_trial:
            for k in ("shift", "lower", "upper"):
                d.pop(k)
        return d


def identity_report(trials, keep=False):
    lhs, rhs = score_shift_exact(trials.z, trials.delta, trials.mu, trials.sigma)
    err = np.abs(lhs - rhs)
    return BoundReport("expansion", trials.delta_max, len(err), int(np.sum(err >= TOL)), float(TOL - err.max()),
                       *(a.tolist() for a in ((lhs, rhs, rhs) if keep else ())))


def envelope_report(trials, keep=False):
    shift = _score(trials.z + trials.delta, trials.mu, trials.sigma) - _score(trials.z, trials.mu, trials.sigma)
    lower, upper = linf_shift_bounds(trials.z, trials.mu, trials.sigma, trials.delta_max)
    slack = np.minimum(shift - (lower - TOL), (upper + TOL) - shift)
    return BoundReport("linf_envelope", trials.delta_max, len(shift), int(np.sum(slack < 0)), float(slack.min()),
                       *(a.tolist() for a in ((shift, lower, upper) if keep else ())))


def low_match_report(trials, keep=False):
    score = _score(trials.z + trials.delta, trials.mu, trials.sigma)
    bound = low_match_upper_bound(trials.z, trials.mu, trials.sigma, trials.delta_max)
    slack = bound + TOL - score
    return BoundReport("low_match", trials.delta_max, len(score), int(np.sum(slack < 0)), float(slack.min()),
                       *(a.tolist() for a in ((score, np.full_like(bound, -np.inf), bound) if keep else ())))


def run_bound_suite(n_trials=10_000, dim=25, delta_maxes=(0.05, 0.1, 0.3), seed=0, keep=False):
    """All three checks at every ``delta_max``; one report per (check, delta_max)."""
    reports = []
    for i, dmax in enumerate(delta_maxes):
        trials = random_trials(n_trials, dim, dmax, seed=[seed, i])
        reports += [identity_report(trials, keep), envelope_report(trials, keep), low_match_report(trials, keep)]
    return reports


def suite_json(reports, contraction=None):
    doc = {"tolerance": TOL, "total_violations": sum(r.violations for r in reports),
           "reports": [r.as_dict() for r in reports]}
    if contraction is not None:
        doc["contraction"] = contraction
    return json.dumps(doc, indent=2, sort_keys=True)


def random_perturbation(shape, p, epsilon, rng):
    """A random direction with ``|d|_p == epsilon`` exactly."""
    if p in ("inf", np.inf):
        return epsilon * rng.choice([-1.0, 1.0], size=shape)
    if p in (1, "1"):
        d = rng.laplace(size=shape)
        return epsilon * d / np.abs(d).sum()
    if p in (2, "2"):
        d = rng.standard_normal(shape)
        return epsilon * d / np.linalg.norm(d)
    raise ValueError(f"unsupported norm {p!r}")


def contraction_measure(images, bank, recon_cfg, p, epsilon, seed=0):
    """Mean of |R(x) - R(x + d)|_2 / |d|_2 over images for random d with |d|_p = epsilon.

    The perturbed image is clipped to [0, 1] and the ratio uses the effective
    perturbation. Images whose effective perturbation vanishes are skipped.
    """
    if not recon_cfg.deterministic:
        raise ValueError("contraction needs the deterministic reconstruction (beta2 = 0)")
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    deltas = np.stack([random_perturbation(img.shape, p, epsilon, rng) for img in images])
    shifted = np.clip(images + deltas, 0.0, 1.0)
    eff = (shifted - images).reshape(len(images), -1)
    dn = np.linalg.norm(eff, axis=1)
    keep = dn > 0
    if not keep.any():
        return float("nan"), np.empty(0)
    r0 = reconstruct_image(images[keep], bank, recon_cfg)
    r1 = reconstruct_image(shifted[keep], bank, recon_cfg)
    ratios = np.linalg.norm((r0 - r1).reshape(int(keep.sum()), -1), axis=1) / dn[keep]
    return float(ratios.mean()), ratios
