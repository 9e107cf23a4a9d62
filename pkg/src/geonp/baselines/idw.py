"""Inverse distance weighting, the feature-free spatial baseline."""

from __future__ import annotations

import numpy as np


def _weights(context_xy, query_xy, power: float):
    c = np.asarray(context_xy, dtype=float).reshape(-1, 2)
    q = np.asarray(query_xy, dtype=float).reshape(-1, 2)
    if len(c) == 0:
        raise ValueError("IDW needs at least one context point")
    d2 = ((q[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    hit = d2 == 0.0
    with np.errstate(divide="ignore"):
        w = 1.0 / d2 ** (power / 2.0)
    # an exact hit takes the (mean) value of the coincident point(s)
    any_hit = hit.any(axis=1)
    w[any_hit] = hit[any_hit].astype(float)
    return w / w.sum(axis=1, keepdims=True)


def idw_predict(context_xy, context_values, query_xy, power: float = 2.0) -> np.ndarray:
    """Weighted mean with weights ``1 / d**power`` (Euclidean distance)."""
    w = _weights(context_xy, query_xy, power)
    return w @ np.asarray(context_values, dtype=float)


def idw_predict_with_spread(context_xy, context_values, query_xy, power: float = 2.0):
    """IDW mean plus the weighted standard deviation of the context values.

    The spread is not a calibrated uncertainty; it lets IDW appear in the
    calibration tables next to the other baselines.
    """
    w = _weights(context_xy, query_xy, power)
    v = np.asarray(context_values, dtype=float)
    mean = w @ v
    var = w @ (v ** 2) - mean ** 2
    return mean, np.sqrt(np.maximum(var, 0.0))
