"""Kernel backend selection.

The compiled extension is used when it imported cleanly; otherwise, or when
``RBFCNN_PURE_PYTHON=1`` is set, the numpy fallback is used. Both backends
produce bitwise-identical results.
"""

import os

from . import _pykernels

kernels = _pykernels
NAME = "python"

if os.environ.get("RBFCNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        NAME = "cython"


def available():
    """Names of the backends importable in this environment."""
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return names
    return names + ["cython"]


def get(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
