"""Reconstruction layer: rebuild every patch from samples of the filter bank.

For each patch the match scores go through a sigmoid, are sharpened by
``exp(beta1 * v)`` and normalized into weights. Every filter contributes a
sample ``mu_j + sigma_j * beta2 * N(0, I)``; the patch becomes the weighted
sum of the samples, and patches are stitched back by overlap averaging.

With ``beta2 = 0`` the samples are the means and the whole layer is a
deterministic, differentiable map; :func:`surrogate_reconstruct` builds it
from autodiff ops and :func:`reconstruct_image` reuses that exact graph so
the two agree bitwise.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .patchgrid import PatchGrid
from .rbf import score_map

SAMPLE_SHARING = ("per_patch", "per_image")


class ReconstructionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ReconstructionConfig:
    beta1: float = 25.0
    beta2: float = 1.75
    m: int = 10
    sample_sharing: str = "per_patch"
    clip_output: bool = True

    def __post_init__(self):
        if self.beta2 < 0:
            raise ReconstructionConfigError(f"beta2 must be >= 0, got {self.beta2}")
        if self.m < 1:
            raise ReconstructionConfigError(f"m must be >= 1, got {self.m}")
        if self.sample_sharing not in SAMPLE_SHARING:
            raise ReconstructionConfigError(f"sample_sharing must be one of {SAMPLE_SHARING}")

    @property
    def deterministic(self):
        return self.beta2 == 0

    def replace(self, **changes):
        return ReconstructionConfig(**{**asdict(self), **changes})


def weights_from_scores(scores, beta1):
    """Normalized ``exp(beta1 * sigmoid(scores))`` over the last axis."""
    e = np.exp(beta1 * ad.sigmoid_fwd(np.asarray(scores, dtype=np.float64)))
    return e / e.sum(axis=-1, keepdims=True)


def sample_filters(bank, beta2, rng, size=None):
    """Draw one sample per filter: ``mu_j + sigma_j * beta2 * N(0, I)``.

    ``size`` prepends extra sample axes, e.g. ``size=(P,)`` gives (P, F, D).
    """
    if beta2 < 0:
        raise ReconstructionConfigError("beta2 must be >= 0")
    shape = () if size is None else tuple(np.atleast_1d(size))
    mus = np.broadcast_to(bank.mus, shape + bank.mus.shape)
    if beta2 == 0:
        return mus.copy()
    eps = rng.standard_normal(shape + bank.mus.shape)
    return mus + (bank.sigmas[:, None] * beta2) * eps


def reconstruct_patch(w, samples):
    w = np.asarray(w, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] != w.shape[-1]:
        raise ValueError(f"{w.shape[-1]} weights for {samples.shape[0]} samples")
    return w @ samples


def _as_batch(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image[None], True
    if image.ndim == 4:
        return image, False
    raise ValueError(f"expected (H, W, C) or (N, H, W, C), got {image.shape}")


def surrogate_reconstruct(x, bank, beta1, clip=True):
    """Differentiable ``beta2 = 0`` reconstruction of an (N, H, W, C) tensor."""
    if not isinstance(x, ad.Tensor):
        x = ad.const(x)
    n, h, w, c = x.shape
    grid = PatchGrid(h, w, c, bank.patch_size)
    patches = ad.gather_patches(x, grid.k)
    flat = ad.reshape(patches, (n * grid.n_patches, grid.patch_dim))
    mus = ad.const(bank.mus)
    scores = ad.affine(ad.sq_dist(flat, mus), -bank.inv_two_vars(), bank.log_norms())
    weights = ad.normalize_l1(ad.exp_scale(ad.sigmoid(scores), beta1))
    recon = ad.dense(weights, mus)
    out = ad.scatter_stitch(ad.reshape(recon, (n, grid.n_patches, grid.patch_dim)), grid)
    return ad.clip01(out) if clip else out


def patch_weights(images, bank, beta1):
    """Per-patch weight vectors for a batch: (N, P, F)."""
    return weights_from_scores(score_map(images, bank), beta1)


def reconstruct_image(image, bank, cfg, rng=None):
    """Pseudo-clean reconstruction of one image or a batch."""
    batch, single = _as_batch(image)
    if cfg.deterministic:
        out = surrogate_reconstruct(batch, bank, cfg.beta1, clip=cfg.clip_output).data
        return out[0] if single else out
    if rng is None:
        raise ValueError("a random generator is required when beta2 > 0")

    n, h, w, c = batch.shape
    grid = PatchGrid(h, w, c, bank.patch_size)
    weights = patch_weights(batch, bank, cfg.beta1)  # n, P, F
    noise_scale = bank.sigmas * cfg.beta2
    recon = np.empty((n, grid.n_patches, grid.patch_dim))
    for i in range(n):
        wi = weights[i]
        if cfg.sample_sharing == "per_patch":
            # sum_j w_j (mu_j + s_j eps_j) = w @ mu + sum_j (w_j s_j) eps_j
            eps = rng.standard_normal((grid.n_patches, len(bank), grid.patch_dim))
            recon[i] = wi @ bank.mus + np.einsum("pf,pfd->pd", wi * noise_scale, eps)
        else:
            recon[i] = wi @ sample_filters(bank, cfg.beta2, rng)
    out = ad.scatter_stitch(ad.const(recon), grid).data
    if cfg.clip_output:
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out
