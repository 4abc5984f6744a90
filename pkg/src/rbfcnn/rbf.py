"""RBF filters over image patches and their non-parametric EM fit.

A filter ``g = (mu, sigma)`` scores a patch ``z`` with the Gaussian
log-density ``-ln(sqrt(2 pi) sigma) - ||z - mu||^2 / (2 sigma^2)``.
The EM fit is hard-assignment clustering that seeds a new filter whenever
a patch's best score falls below a fixed threshold, so the number of
filters is data driven.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .patchgrid import extract_patches

SIGMA_FLOOR = 1e-3
SIGMA_INIT = 0.5
FORMAT_VERSION = 1

# filter counts reported for 3x3 banks on full datasets; logged for
# comparison only
REFERENCE_FILTER_COUNTS = {"mnist": 24, "cifar10": 232}


class FilterBankError(ValueError):
    pass


@dataclass(frozen=True)
class RbfFilter:
    mu: np.ndarray
    sigma: float


def log_norm(sigma):
    """Score of a patch sitting exactly on the filter mean."""
    return -np.log(np.sqrt(2.0 * np.pi) * np.asarray(sigma, dtype=np.float64))


def inv_two_var(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    return 1.0 / (2.0 * sigma * sigma)


@dataclass
class FilterBank:
    patch_size: int
    channels: int
    mus: np.ndarray  # (F, k*k*C)
    sigmas: np.ndarray  # (F,)
    creation_threshold: float = -math.inf
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        self.mus = np.atleast_2d(np.asarray(self.mus, dtype=np.float64))
        self.sigmas = np.atleast_1d(np.asarray(self.sigmas, dtype=np.float64))
        dim = self.patch_size * self.patch_size * self.channels
        if self.mus.shape[1:] != (dim,) or self.sigmas.shape != (self.mus.shape[0],):
            raise FilterBankError(
                f"means {self.mus.shape} / sigmas {self.sigmas.shape} inconsistent with patch dim {dim}"
            )

    def __len__(self):
        return self.mus.shape[0]

    @property
    def patch_dim(self):
        return self.mus.shape[1]

    @property
    def filters(self):
        return [RbfFilter(m, float(s)) for m, s in zip(self.mus, self.sigmas)]

    def log_norms(self):
        return log_norm(self.sigmas)

    def inv_two_vars(self):
        return inv_two_var(self.sigmas)

    def permuted(self, order):
        order = np.asarray(order)
        return FilterBank(self.patch_size, self.channels, self.mus[order], self.sigmas[order],
                          self.creation_threshold, self.sigma_floor)

    # -- serialization ---------------------------------------------------

    def to_json(self):
        thr = self.creation_threshold
        doc = {
            "version": FORMAT_VERSION,
            "patch_size": self.patch_size,
            "channels": self.channels,
            "sigma_floor": self.sigma_floor,
            "creation_threshold": thr if math.isfinite(thr) else None,
            "filters": [{"mu": [float(v) for v in m], "sigma": float(s)} for m, s in zip(self.mus, self.sigmas)],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise FilterBankError(f"unsupported filter bank version {doc.get('version')!r}")
        filters = doc["filters"]
        if not filters:
            raise FilterBankError("filter bank has no filters")
        thr = doc.get("creation_threshold")
        return cls(
            patch_size=int(doc["patch_size"]),
            channels=int(doc["channels"]),
            mus=np.array([f["mu"] for f in filters], dtype=np.float64),
            sigmas=np.array([f["sigma"] for f in filters], dtype=np.float64),
            creation_threshold=-math.inf if thr is None else float(thr),
            sigma_floor=float(doc["sigma_floor"]),
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def match_score(z, g):
    """Gaussian log-density score of patch ``z`` under filter ``g``."""
    z = np.asarray(z, dtype=np.float64).ravel()
    mu = np.asarray(g.mu, dtype=np.float64).ravel()
    if z.shape != mu.shape:
        raise FilterBankError(f"patch has {z.size} values, filter mean has {mu.size}")
    d2 = float(np.sum((z - mu) ** 2))
    return -math.log(math.sqrt(2.0 * math.pi) * g.sigma) - d2 / (2.0 * g.sigma ** 2)


def patch_scores(patches, bank):
    """Scores of flat patches (P, D) against every filter: (P, F)."""
    d2 = _backend.kernels.pairwise_sq_dist(patches, bank.mus)
    return bank.log_norms()[None, :] - d2 * bank.inv_two_vars()[None, :]


def score_map(image, bank):
    """(n_patches, n_filters) match scores; batched input gives a leading N axis."""
    if len(bank) == 0:
        raise FilterBankError("empty filter bank")
    patches = extract_patches(image, bank.patch_size)
    if patches.shape[-1] != bank.patch_dim:
        raise FilterBankError(f"image patches have {patches.shape[-1]} values, bank expects {bank.patch_dim}")
    flat = patches.reshape(-1, bank.patch_dim)
    scores = patch_scores(flat, bank)
    return scores.reshape(patches.shape[:-1] + (len(bank),))


# -- EM ----------------------------------------------------------------------

def e_step(patches, bank, threshold, sigma_init=SIGMA_INIT, backend=None):
    """Assign each patch to its best filter, seeding filters on the way.

    Returns ``(assignments, grown_bank)``; filters seeded here have the
    seeding patch as mean and ``sigma_init`` as spread. Ties go to the
    lowest filter index.
    """
    kern = _backend.kernels if backend is None else _backend.get(backend)
    patches = np.ascontiguousarray(patches, dtype=np.float64)
    if patches.shape[1] != bank.patch_dim:
        raise FilterBankError(f"patches have {patches.shape[1]} values, bank expects {bank.patch_dim}")
    new_norm = float(log_norm(sigma_init))
    if threshold > new_norm:
        raise FilterBankError(
            f"threshold {threshold} exceeds the best score of a fresh filter ({new_norm:.6f}); every patch would seed one"
        )
    assign, seeds = kern.estep_stream(
        patches, bank.mus, bank.log_norms(), bank.inv_two_vars(),
        float(threshold), new_norm, float(inv_two_var(sigma_init)),
    )
    if seeds.size:
        bank = FilterBank(
            bank.patch_size, bank.channels,
            np.vstack([bank.mus, patches[seeds]]),
            np.concatenate([bank.sigmas, np.full(seeds.size, float(sigma_init))]),
            bank.creation_threshold, bank.sigma_floor,
        )
    return np.asarray(assign, dtype=np.int64), bank


def _per_patch_sq_dist(patches, centers):
    acc = np.zeros(patches.shape[0])
    for d in range(patches.shape[1]):
        diff = patches[:, d] - centers[:, d]
        acc += diff * diff
    return acc


@dataclass
class MStepStats:
    counts: np.ndarray
    distortion_before: np.ndarray  # per surviving filter, around the old means
    distortion_after: np.ndarray  # per surviving filter, around the new means
    dropped: int


def m_step(patches, assignments, bank):
    """Re-estimate means and RMS spreads; drop filters with no patches.

    Returns ``(new_bank, new_assignments, stats)`` where assignments are
    re-indexed to the surviving filters.
    """
    patches = np.asarray(patches, dtype=np.float64)
    n_f = len(bank)
    counts = np.bincount(assignments, minlength=n_f)
    keep = np.flatnonzero(counts > 0)
    remap = np.full(n_f, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    assign = remap[assignments]
    counts = counts[keep]

    # mean as old mean plus mean offset: exact when every patch equals the old mean
    old = bank.mus[keep]
    offsets = patches - old[assign]
    shift = np.stack([np.bincount(assign, weights=offsets[:, d], minlength=keep.size)
                      for d in range(patches.shape[1])], axis=1)
    mus = old + shift / counts[:, None]
    before = np.bincount(assign, weights=_per_patch_sq_dist(patches, bank.mus[keep][assign]), minlength=keep.size)
    after = np.bincount(assign, weights=_per_patch_sq_dist(patches, mus[assign]), minlength=keep.size)
    sigmas = np.maximum(np.sqrt(after / counts), bank.sigma_floor)
    new_bank = FilterBank(bank.patch_size, bank.channels, mus, sigmas, bank.creation_threshold, bank.sigma_floor)
    return new_bank, assign, MStepStats(counts, before, after, n_f - keep.size)


@dataclass
class FitReport:
    threshold: float
    seed: int
    epochs_run: int = 0
    converged: bool = False
    filter_counts: list = field(default_factory=list)  # after each M-step
    created: list = field(default_factory=list)  # filters seeded per E-step
    distortion: list = field(default_factory=list)  # total after each M-step
    distortion_monotone: bool = True  # no filter's distortion grew in any M-step

    def as_dict(self):
        return {
            "threshold": self.threshold if math.isfinite(self.threshold) else None,
            "seed": self.seed,
            "epochs_run": self.epochs_run,
            "converged": self.converged,
            "n_filters": self.filter_counts[-1] if self.filter_counts else None,
            "filter_counts": self.filter_counts,
            "created": self.created,
            "distortion": self.distortion,
            "distortion_monotone": self.distortion_monotone,
        }


def shuffled_stream(patches, seed):
    patches = np.asarray(patches, dtype=np.float64)
    order = np.random.default_rng(seed).permutation(patches.shape[0])
    return np.ascontiguousarray(patches[order])


def em_fit(patches, threshold, max_epochs=20, seed=0, patch_size=None, channels=1,
           sigma_init=SIGMA_INIT, sigma_floor=SIGMA_FLOOR, backend=None, with_report=False):
    """Fit a filter bank to flat patches (n, k*k*C) with non-parametric EM.

    The stream is a seeded shuffle of ``patches``, fixed across epochs. The
    first filter is the first patch of that stream. Iterates E/M until an
    E-step seeds nothing and reproduces the previous assignments, or
    ``max_epochs`` is reached.
    """
    if max_epochs < 1:
        raise FilterBankError("max_epochs must be at least 1")
    if math.isnan(threshold) or threshold == math.inf:
        raise FilterBankError("threshold must be finite or -inf")
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] == 0:
        raise FilterBankError("need a non-empty (n, d) patch array")
    if patch_size is None:
        patch_size = int(round(math.sqrt(patches.shape[1] / channels)))
    stream = shuffled_stream(patches, seed)
    bank = FilterBank(patch_size, channels, stream[:1].copy(), [sigma_init], float(threshold), sigma_floor)
    report = FitReport(threshold=float(threshold), seed=seed)

    prev = None
    for epoch in range(max_epochs):
        n_before = len(bank)
        assign, bank = e_step(stream, bank, threshold, sigma_init, backend)
        n_created = len(bank) - n_before
        report.created.append(n_created)
        if (prev is not None and n_created == 0 and np.array_equal(assign, prev)
                and np.all(np.bincount(assign, minlength=len(bank)) > 0)):
            report.converged = True
            break
        bank, prev, stats = m_step(stream, assign, bank)
        report.epochs_run = epoch + 1
        report.filter_counts.append(len(bank))
        report.distortion.append(float(stats.distortion_after.sum()))
        tol = 1e-9 * np.maximum(1.0, stats.distortion_before)
        if np.any(stats.distortion_after > stats.distortion_before + tol):
            report.distortion_monotone = False
    return (bank, report) if with_report else bank


def image_patches(images, k, max_patches=None, seed=0):
    """Flat patches from a stack of (N, H, W, C) images."""
    flat = extract_patches(np.asarray(images, dtype=np.float64), k).reshape(-1, k * k * np.asarray(images).shape[-1])
    if max_patches is not None and flat.shape[0] > max_patches:
        idx = np.sort(np.random.default_rng(seed).choice(flat.shape[0], max_patches, replace=False))
        flat = flat[idx]
    return flat


def calibrate_threshold(patches, target_count, seed=0, max_epochs=3, lo=-60.0, hi=None,
                        iters=20, patch_size=None, channels=1, sigma_init=SIGMA_INIT):
    """Bisect the creation threshold for a filter count near ``target_count``.

    Returns ``(threshold, count)`` for the best probe seen.
    """
    if hi is None:
        hi = float(log_norm(sigma_init))
    best = None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        bank = em_fit(patches, mid, max_epochs=max_epochs, seed=seed, patch_size=patch_size,
                      channels=channels, sigma_init=sigma_init)
        count = len(bank)
        if best is None or abs(count - target_count) < abs(best[1] - target_count):
            best = (mid, count)
        if count == target_count:
            break
        if count < target_count:
            lo = mid
        else:
            hi = mid
    return best
