"""Kernel backend selection.

The compiled extension is preferred; ``VOXELZIP_BACKEND=python`` forces the
numpy fallback, and a missing build falls back silently.
"""

import os

from . import _kernels_py

try:
    from . import _ckernels, _cnet
except ImportError:  # pragma: no cover - exercised only without a build
    _ckernels = _cnet = None

_BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("VOXELZIP_BACKEND", "").strip().lower() == "python" or _ckernels is None:
    NAME = "python"
else:
    NAME = "cython"

kernels = _BACKENDS[NAME]
# AdaLN elementwise kernels (float32); the fallback module provides the same pair
net_kernels = _cnet if NAME == "cython" else _kernels_py


def available():
    return sorted(_BACKENDS)


def get(name=None):
    if name is None:
        return kernels
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {available()}") from None
