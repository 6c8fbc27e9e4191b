"""Input validation helpers shared by the estimators and functional API."""

import numbers

import numpy as np

from .exceptions import InputError, ShapeMismatch

ROTATION_TOL = 1e-9


def check_array(x, *, ndim=None, shape=None, name="array", dtype=np.float64, finite=True):
    """Convert ``x`` to an ndarray and check rank, shape and finiteness.

    ``shape`` may contain ``None`` entries as wildcards.
    """
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeMismatch(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if shape is not None:
        if arr.ndim != len(shape) or any(
            s is not None and s != a for s, a in zip(shape, arr.shape)
        ):
            raise ShapeMismatch(f"{name} must have shape {shape}, got {arr.shape}")
    if finite and arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_vector3(x, name="vector"):
    return check_array(x, shape=(3,), name=name)


def check_rotation(R, name="rotation", tol=ROTATION_TOL):
    R = check_array(R, shape=(3, 3), name=name)
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise InputError(f"{name} is not orthonormal within {tol}")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise InputError(f"{name} must have determinant +1")
    return R


def check_image(img, height=None, width=None, name="image"):
    """Return ``img`` as a float64 (H, W, 3) array."""
    img = check_array(img, name=name)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeMismatch(f"{name} must be (H, W) or (H, W, C), got {img.shape}")
    if height is not None and img.shape[0] != height or width is not None and img.shape[1] != width:
        raise ShapeMismatch(
            f"{name} is {img.shape[0]}x{img.shape[1]}, expected {height}x{width}"
        )
    return img


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{names[0]} shape {a.shape} != {names[1]} shape {b.shape}")


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise InputError(f"{name} must be a finite real number")
    if strict and value <= 0 or not strict and value < 0:
        raise InputError(f"{name} must be {'positive' if strict else 'non-negative'}, got {value}")
    return float(value)


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise InputError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise InputError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_resolution(res, name="resolution"):
    try:
        h, w = res
    except (TypeError, ValueError):
        raise InputError(f"{name} must be a (height, width) pair") from None
    return check_positive_int(h, f"{name} height"), check_positive_int(w, f"{name} width")
