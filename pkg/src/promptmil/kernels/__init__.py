"""Hot numeric kernels with a compiled backend and a pure-Python fallback.

The compiled ``_ckernels`` extension is used when it imports; otherwise (or
when ``PROMPTMIL_PURE_PYTHON=1``) the numpy versions in ``_pykernels`` are
used. Both backends return identical results for ``top_k`` and ``auc``;
floating-point kernels agree to rounding.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from ..errors import (
    DimensionMismatch,
    KOutOfRange,
    NonFiniteValue,
    SingleClassOnly,
    ZeroNormInstance,
    ZeroNormPrompt,
)
from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("PROMPTMIL_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
    _active = "python"
else:
    _active = "cython"


def available_backends() -> list[str]:
    return list(_BACKENDS)


def backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {available_backends()}")
    _active = name


@contextmanager
def using(name: str):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _impl():
    return _BACKENDS[_active]


def _float_pair(a, b):
    dtype = np.float64 if (a.dtype == np.float64 or b.dtype == np.float64) else np.float32
    return np.ascontiguousarray(a, dtype=dtype), np.ascontiguousarray(b, dtype=dtype)


def cosine_similarity(instances, prompts) -> np.ndarray:
    """Cosine similarity of every instance row with every prompt row (n x m)."""
    x = np.asarray(instances)
    t = np.asarray(prompts)
    if x.ndim != 2 or t.ndim != 2 or x.shape[1] != t.shape[1]:
        raise DimensionMismatch(f"cannot compare instances {x.shape} with prompts {t.shape}")
    if not x.dtype.kind == "f":
        x = x.astype(np.float64)
    if not t.dtype.kind == "f":
        t = t.astype(np.float64)
    x, t = _float_pair(x, t)
    xn = np.einsum("ij,ij->i", x, x)
    if (xn == 0).any():
        raise ZeroNormInstance(f"instance row {int(np.argmax(xn == 0))} has zero norm")
    tn = np.einsum("ij,ij->i", t, t)
    if (tn == 0).any():
        raise ZeroNormPrompt(f"prompt row {int(np.argmax(tn == 0))} has zero norm")
    return _impl().cosine_similarity(x, t)


def top_k(values, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, by descending value then ascending index."""
    v = np.asarray(values)
    n = len(v)
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue("top_k on non-finite values")
    v = np.ascontiguousarray(v, dtype=np.float64 if v.dtype != np.float32 else np.float32)
    return _impl().top_k(v, int(k))


def auc(scores, labels) -> float:
    """Exact Mann-Whitney AUC with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise DimensionMismatch(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise SingleClassOnly("AUC needs both positive and negative labels")
    if not np.all(np.isfinite(s)):
        raise NonFiniteValue("AUC on non-finite scores")
    order = np.argsort(s, kind="stable")
    twice, n_pos, n_neg = _impl().auc_counts(np.ascontiguousarray(s[order]), np.ascontiguousarray(y[order]))
    return twice / (2 * n_pos * n_neg)


def kmeans_lloyd(x, centers, n_iter: int):
    """Lloyd iterations from the given initial centers. Returns (labels, centers)."""
    x, c = _float_pair(np.asarray(x), np.asarray(centers))
    return _impl().kmeans_lloyd(x, c, int(n_iter))
