"""Backend selection for the convolution gather/scatter kernels.

The compiled extension is used when importable; set ``FEDHM_PURE_PYTHON=1``
to force the numpy fallback. Both backends produce bit-identical results.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("FEDHM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _ext  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _ext
        BACKEND = "cython"


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return names
    return names + ["cython"]


def _pick(backend: str | None):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {backend!r}")


def im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, backend: str | None = None) -> np.ndarray:
    """Gather sliding windows of a padded (B, C, H, W) array.

    Returns an array of shape (B, Ho, Wo, C, kh, kw).
    """
    B, C, H, W = xp.shape
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    out = np.empty((B, Ho, Wo, C, kh, kw), dtype=xp.dtype)
    _pick(backend).im2col(np.ascontiguousarray(xp), kh, kw, sh, sw, out)
    return out


def col2im(cols: np.ndarray, padded_shape: tuple, sh: int, sw: int, backend: str | None = None) -> np.ndarray:
    """Scatter-add window gradients back onto a zero (B, C, Hp, Wp) array."""
    dxp = np.zeros(padded_shape, dtype=cols.dtype)
    _pick(backend).col2im(np.ascontiguousarray(cols), sh, sw, dxp)
    return dxp
