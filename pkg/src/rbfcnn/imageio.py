"""Binary PGM (P5) / PPM (P6) writers and readers for [0, 1] float images."""

from pathlib import Path

import numpy as np

from .datasets import to_uint8


def write_pnm(path, image):
    """Write an (H, W), (H, W, 1) or (H, W, 3) image; 1 channel gives P5, 3 gives P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[-1] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {image.shape}")
    h, w = image.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + to_uint8(image).tobytes())


def read_pnm(path):
    """Read a P5/P6 file written by :func:`write_pnm` into (H, W, C) floats."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported header {magic!r} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * c, offset=pos + 1)
    return data.reshape(h, w, c) / 255.0
