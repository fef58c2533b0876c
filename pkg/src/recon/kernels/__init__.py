"""Ragged pooling kernels with a compiled core and a numpy fallback.

The compiled extension (Cython) is chosen at import time when it was built;
otherwise the numpy implementations are used. RECON_PURE_PYTHON=1 forces the
fallback. set_backend() switches at runtime, which the tests and the kernel
benchmark use to compare both paths.
"""

from __future__ import annotations

import os

import numpy as np

from . import _numpy

_IMPLS = {"numpy": _numpy}

try:
    from . import _core  # compiled extension, optional

    _IMPLS["compiled"] = _core
except ImportError:
    _core = None

if os.environ.get("RECON_PURE_PYTHON"):
    _active_name = "numpy"
else:
    _active_name = "compiled" if _core is not None else "numpy"


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLS))


def active_backend() -> str:
    return _active_name


def set_backend(name: str) -> None:
    global _active_name
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _active_name = name


def _as_kernel_args(table, ids, offsets):
    table = np.ascontiguousarray(table, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    return table, ids, offsets


def pool_mean(table, ids, offsets):
    """Per-segment mean of table rows; segments given by offsets (B+1 entries)."""
    table, ids, offsets = _as_kernel_args(table, ids, offsets)
    return _IMPLS[_active_name].pool_mean(table, ids, offsets)


def scatter_mean_grad(grad, ids, offsets, gout):
    """Accumulate gout[b] / segment_length into grad rows; adjoint of pool_mean."""
    if grad.dtype != np.float64 or not grad.flags["C_CONTIGUOUS"]:
        raise ValueError("grad must be a C-contiguous float64 array (updated in place)")
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    _IMPLS[_active_name].scatter_mean_grad(grad, ids, offsets, gout)
