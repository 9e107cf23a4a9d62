"""Shared evaluation protocol for the ANP and the baselines.

Every model is scored on the same fixed episodes: one eval-mode episode per
tile drawn from a dedicated seed stream. The ANP and IDW condition on the
episode context; the feature baselines predict the targets directly.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import nn
from .anp import ANP
from .baselines import (
    DropoutMLPModel,
    Forest,
    GBQModel,
    flat_features,
    gbq_predict,
    idw_predict_with_spread,
    mc_dropout_predict,
    rf_predict,
)
from .geodata.episodes import Episode, episode_rng, sample_episode
from .geodata.tiles import MIN_SHOTS, Tile
from .geodata.transforms import NormalizationSpec, normalize_coords, transform_agbd
from .metrics import accuracy_metrics, calibration_curves

logger = logging.getLogger(__name__)

EVAL_STREAM = 104729
SIGMA_FLOOR = 1e-6  # normalized units; zero-spread baseline predictions are lifted to this


def eval_episodes(tiles: Sequence[Tile], spec: NormalizationSpec, seed: int) -> list[Episode]:
    return [sample_episode(t, spec, episode_rng(seed, t, EVAL_STREAM), train_mode=False)
            for t in tiles if t.usable(MIN_SHOTS)]


def targets(episodes: Sequence[Episode]) -> np.ndarray:
    return np.concatenate([e.targets.agbd for e in episodes]).astype(float)


def predict_anp(model: ANP, episodes: Sequence[Episode], batch_size: int = 16):
    mus, sigmas = [], []
    with nn.no_grad():
        for lo in range(0, len(episodes), batch_size):
            outs = model.forward_batch([e.masked() for e in episodes[lo:lo + batch_size]], "infer")
            for pred, _, _ in outs:
                mus.append(pred.mu_norm.astype(float))
                sigmas.append(pred.sigma_norm)
    return np.concatenate(mus), np.concatenate(sigmas)


def predict_idw(episodes: Sequence[Episode], tiles: Sequence[Tile], power: float = 2.0):
    by_id = {t.tile_id: t for t in tiles}
    mus, sigmas = [], []
    for e in episodes:
        t = by_id[e.tile_id]
        c, q = e.context.index, e.targets.index
        mu, s = idw_predict_with_spread(np.stack([t.lon[c], t.lat[c]], 1), e.context.agbd.astype(float),
                                        np.stack([t.lon[q], t.lat[q]], 1), power)
        mus.append(mu)
        sigmas.append(s)
    return np.concatenate(mus), np.concatenate(sigmas)


def episode_features(episodes: Sequence[Episode]) -> np.ndarray:
    return np.concatenate([flat_features(e.targets.coords, e.targets.patches) for e in episodes])


def tile_xy(tiles: Sequence[Tile], spec: NormalizationSpec) -> tuple[np.ndarray, np.ndarray]:
    """Flat features and normalized targets for every shot of the given tiles."""
    xs, ys = [], []
    for t in tiles:
        x, y = normalize_coords(t.lon, t.lat, spec)
        xs.append(flat_features(np.stack([x, y], 1), t.patches))
        ys.append(transform_agbd(t.agbd, spec))
    return np.concatenate(xs), np.concatenate(ys)


def predict_baseline(model, X: np.ndarray, seed: int = 0):
    """Returns ``(mu, sigma, extra)`` for a fitted RF, GBQ or MLP model."""
    if isinstance(model, Forest):
        mu, s = rf_predict(model, X)
        return mu, s, {}
    if isinstance(model, GBQModel):
        mu, s = gbq_predict(model, X)
        return mu, s, {"quantile_crossings": model.crossings}
    if isinstance(model, DropoutMLPModel):
        mu, s = mc_dropout_predict(model, X, rng=np.random.default_rng(seed))
        return mu, s, {}
    raise TypeError(f"unsupported baseline {type(model).__name__}")


def score(y, mu, sigma, spec: NormalizationSpec | None = None, n_bins: int = 10,
          quantile_crossings: int | None = None):
    """Accuracy plus calibration; sigma values below the floor are lifted and counted."""
    sigma = np.asarray(sigma, dtype=float)
    floored = int(np.sum(sigma < SIGMA_FLOOR))
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    acc = accuracy_metrics(y, mu, spec)
    cal = calibration_curves(y, mu, sigma, n_bins=min(n_bins, len(y)), quantile_crossings=quantile_crossings)
    return acc, cal, floored


def report(y, mu, sigma, spec=None, n_bins: int = 10, quantile_crossings=None) -> dict:
    acc, cal, floored = score(y, mu, sigma, spec, n_bins, quantile_crossings)
    return {"accuracy": acc.to_dict(), "calibration": cal.to_dict(), "sigma_floored": floored}
