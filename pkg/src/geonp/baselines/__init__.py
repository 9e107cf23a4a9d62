"""Comparison models sharing the flat feature layout ``[x, y, patch...]``."""

from __future__ import annotations

import numpy as np

from .gbq import GBQConfig, GBQModel, gbq_fit, gbq_predict, pinball_loss, sigma_from_quantiles
from .idw import idw_predict, idw_predict_with_spread
from .mlp import DropoutMLPModel, MLPConfig, mc_dropout_predict, mlp_fit
from .trees import Forest, RegressionTree, best_split, rf_fit, rf_predict


def flat_features(coords, patches) -> np.ndarray:
    """``(n, 2 + 9 D)``: normalized coordinates followed by the row-major patch."""
    coords = np.asarray(coords, dtype=float)
    patches = np.asarray(patches, dtype=float)
    return np.concatenate([coords, patches.reshape(len(patches), -1)], axis=1)
