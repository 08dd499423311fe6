"""Dense float64 matrix kernel shared by every other module.

A "matrix" here is a 2-D ``numpy.ndarray`` of dtype float64 with rows as
batch samples and columns as features. All functions are pure: they never
modify their arguments.
"""

import numpy as np

__all__ = [
    "ShapeError",
    "as_float",
    "as_matrix",
    "matmul",
    "ew",
    "emap",
    "col_stats",
    "global_norm",
    "sigmoid",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_float(a):
    """Array view of ``a``; non-float input becomes float64, wider floats are kept."""
    a = np.asarray(a)
    if a.dtype.kind != "f":
        return a.astype(np.float64)
    return a


def as_matrix(a, name="matrix"):
    """Coerce ``a`` to a finite 2-D float64 array.

    Scalars and 1-D inputs are promoted to a single row.
    """
    m = np.array(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    elif m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ShapeError(f"{name} must have at least one row and column")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    """Matrix product ``a @ b``; raises ShapeError naming both shapes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


_EW_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def ew(op, a, b):
    """Elementwise ``add``, ``sub`` or ``mul`` of two same-shape matrices."""
    try:
        fn = _EW_OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op} needs equal shapes, got {a.shape} and {b.shape}")
    return fn(a, b)


def sigmoid(x):
    # Split by sign so exp never overflows.
    x = as_float(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_MAP_OPS = {
    "tanh": np.tanh,
    "sigmoid": sigmoid,
    "tanh_prime_from_y": lambda y: 1.0 - y * y,
    "sigmoid_prime_from_y": lambda y: y * (1.0 - y),
}


def emap(op, a):
    """Apply an activation (or its derivative given the activated value) entrywise.

    ``op`` is one of ``tanh``, ``sigmoid``, ``tanh_prime_from_y`` and
    ``sigmoid_prime_from_y``. The ``*_prime_from_y`` forms take the already
    activated value y and return 1 - y**2 or y * (1 - y).
    """
    try:
        fn = _MAP_OPS[op]
    except KeyError:
        raise ValueError(f"unknown map op {op!r}") from None
    return fn(as_float(a))


def col_stats(a):
    """Per-column mean and population variance, each shaped ``(1, F)``."""
    a = as_float(a)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"col_stats needs a non-empty 2-D matrix, got {a.shape}")
    # Shift by the first row: constant columns then give exactly mean == entry.
    shift = a[:1]
    centered = a - shift
    mean = shift + centered.mean(axis=0, keepdims=True)
    var = ((a - mean) ** 2).mean(axis=0, keepdims=True)
    return mean, var


def global_norm(ms):
    """Euclidean norm of all entries of all matrices taken together."""
    ms = list(ms)
    if not ms:
        raise ValueError("global_norm needs at least one matrix")
    total = 0.0
    for m in ms:
        m = np.asarray(m, dtype=np.float64)
        total += float(np.dot(m.ravel(), m.ravel()))
    return float(np.sqrt(total))
