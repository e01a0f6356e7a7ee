"""Input validation helpers shared across the package."""

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def as_float_array(x, name, ndim=None, allow_empty=False):
    """Coerce to a float64 ndarray and check finiteness.

    Raises ValidationError on NaN/Inf, wrong dimensionality, or empty
    input (unless allowed).
    """
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim}-d array, got {arr.ndim}-d")
    if not allow_empty and arr.size == 0:
        raise ValidationError(f"{name}: empty array")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValidationError(f"{name}: non-finite value at index {tuple(bad)}")
    return arr


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be positive, got {value}")
    return float(value)


def check_nonnegative(value, name):
    if not np.isfinite(value) or value < 0:
        raise ValidationError(f"{name} must be nonnegative, got {value}")
    return float(value)


def check_same_length(*arrays, names=None):
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        labels = names or [f"arg{i}" for i in range(len(arrays))]
        detail = ", ".join(f"{n}={len(a)}" for n, a in zip(labels, arrays))
        raise ValidationError(f"length mismatch: {detail}")


def check_uniform_timestamps(t, rel_tol=1e-6):
    """Check strictly increasing, uniformly spaced timestamps.

    Returns the sample interval. Tolerance is relative to the nominal
    interval so float accumulation over long records is accepted.
    """
    t = as_float_array(t, "timestamps", ndim=1)
    if len(t) < 2:
        raise ValidationError("timestamps: need at least 2 samples")
    dt = np.diff(t)
    if np.any(dt <= 0):
        i = int(np.argmax(dt <= 0))
        raise ValidationError(f"timestamps: not strictly increasing at index {i + 1}")
    nominal = (t[-1] - t[0]) / (len(t) - 1)
    if np.max(np.abs(dt - nominal)) > rel_tol * nominal:
        raise ValidationError("timestamps: sampling is not uniform")
    return float(nominal)


def readonly(arr):
    """Return a C-contiguous read-only copy, for immutable value types."""
    out = np.array(arr, dtype=float, order="C")
    out.setflags(write=False)
    return out
