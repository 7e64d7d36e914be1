"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numbers

import numpy as np


def check_seed(seed) -> int:
    if seed is None:
        return 0
    if isinstance(seed, numbers.Integral):
        return int(seed)
    raise TypeError(f"seed must be an integer or None, got {type(seed).__name__}")


def check_feature_dict(X, *, n_steps: int | None = None,
                       modalities: list[str] | None = None,
                       dims: dict[str, int] | None = None):
    """Normalize X into {modality: (n, S, D) float64 array} and validate it.

    Accepts a single 3-D array (wrapped as modality ``"features"``) or a dict
    of them.  All modalities must agree on the number of samples and steps,
    contain only finite values, and (when given) match the expected step
    count, modality set and per-modality dims.
    """
    if not isinstance(X, dict):
        X = {"features": X}
    if not X:
        raise ValueError("X must contain at least one modality")
    out = {}
    n_samples = None
    steps = None
    for name, arr in X.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(
                f"X[{name!r}] must be (n_samples, n_steps, dim), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"X[{name!r}] contains non-finite values")
        if n_samples is None:
            n_samples, steps = arr.shape[0], arr.shape[1]
        elif arr.shape[0] != n_samples or arr.shape[1] != steps:
            raise ValueError(
                f"X[{name!r}] shape {arr.shape} disagrees with other modalities "
                f"(n={n_samples}, steps={steps})")
        out[name] = arr
    if n_steps is not None and steps != n_steps:
        raise ValueError(f"expected {n_steps} time-steps, got {steps}")
    if modalities is not None:
        if set(out) != set(modalities):
            raise ValueError(
                f"expected modalities {sorted(modalities)}, got {sorted(out)}")
        out = {m: out[m] for m in modalities}
    if dims is not None:
        for m, d in dims.items():
            if out[m].shape[2] != d:
                raise ValueError(
                    f"X[{m!r}] has dim {out[m].shape[2]}, expected {d}")
    return out


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-D of length {n_samples}, got shape {y.shape}")
    return y


def check_is_fitted(estimator, attribute: str = "model_"):
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first")
