"""Sliding-window patch extraction and overlap-averaged stitching.

Windows are k x k, stride 1, no padding. A patch is flattened row-major
over the window with channels fastest, i.e. index ``(di * k + dj) * C + c``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._backend import kernels


class PatchGridError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    image_h: int
    image_w: int
    channels: int
    k: int

    def __post_init__(self):
        if self.k < 1 or self.k > min(self.image_h, self.image_w):
            raise PatchGridError(f"patch size {self.k} does not fit a {self.image_h}x{self.image_w} image")

    @classmethod
    def for_image(cls, image, k):
        image = np.asarray(image)
        h, w, c = image.shape[-3:]
        return cls(h, w, c, k)

    @property
    def out_h(self):
        return self.image_h - self.k + 1

    @property
    def out_w(self):
        return self.image_w - self.k + 1

    @property
    def n_patches(self):
        return self.out_h * self.out_w

    @property
    def patch_dim(self):
        return self.k * self.k * self.channels

    def origins(self):
        return [(i, j) for i in range(self.out_h) for j in range(self.out_w)]

    def coverage(self):
        """Number of windows containing each pixel, shape (H, W)."""
        return _coverage(self.image_h, self.image_w, self.k)


@lru_cache(maxsize=32)
def _coverage(h, w, k):
    rows = np.minimum(np.minimum(np.arange(h) + 1, k), np.minimum(h - np.arange(h), k))
    cols = np.minimum(np.minimum(np.arange(w) + 1, k), np.minimum(w - np.arange(w), k))
    # each axis count is min(i+1, k, H-i, H-k+1)
    rows = np.minimum(rows, h - k + 1)
    cols = np.minimum(cols, w - k + 1)
    cov = np.outer(rows, cols).astype(np.float64)
    cov.setflags(write=False)
    return cov


def _as_batch(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image[None, :, :, None], "hw"
    if image.ndim == 3:
        return image[None], "hwc"
    if image.ndim == 4:
        return image, "nhwc"
    raise PatchGridError(f"expected an image of rank 2-4, got shape {image.shape}")


def extract_patches(image, k):
    """Patch vectors ordered row-major by window origin.

    A single (H, W, C) image gives (P, k*k*C); a batch (N, H, W, C) gives
    (N, P, k*k*C).
    """
    batch, kind = _as_batch(image)
    n, h, w, c = batch.shape
    if k > min(h, w) or k < 1:
        raise PatchGridError(f"patch size {k} exceeds image side {min(h, w)}")
    win = sliding_window_view(batch, (k, k), axis=(1, 2))
    out = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, (h - k + 1) * (w - k + 1), k * k * c)
    return out if kind == "nhwc" else out[0]


def stitch(patches, grid):
    """Average overlapping patches back into an image of the grid's shape."""
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    if patches.ndim != 3 or patches.shape[1:] != (grid.n_patches, grid.patch_dim):
        raise PatchGridError(
            f"got patches of shape {patches.shape[-2:]}, grid needs ({grid.n_patches}, {grid.patch_dim})"
        )
    out = kernels.stitch_sum(patches, grid.image_h, grid.image_w, grid.channels, grid.k)
    out /= grid.coverage()[None, :, :, None]
    return out[0] if single else out
