"""Input validation helpers shared by the estimators and functional ops."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def check_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a float64 ``(H, W, 3)`` array, rejecting NaN/Inf."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be non-empty, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


def clip_image(image) -> np.ndarray:
    return np.clip(check_image(image), 0.0, 1.0)


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValidationError(
            f"{names[0]} and {names[1]} spatial dims differ: {a.shape[:2]} vs {b.shape[:2]}"
        )


def check_flow_array(flow, name: str = "flow") -> np.ndarray:
    arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValidationError(f"{name} must have shape (H, W, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite displacements")
    return arr


def check_unit_vectors(d, tol: float = 1e-6, name: str = "directions") -> np.ndarray:
    arr = np.asarray(d, dtype=np.float64)
    norms = np.linalg.norm(arr.reshape(-1, 3), axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValidationError(f"{name} must be unit-norm within {tol}")
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage precision."""
    return to_uint8(image).astype(np.float64) / 255.0
