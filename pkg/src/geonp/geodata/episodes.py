"""Disjoint context/target episodes drawn from a single tile."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tiles import MIN_SHOTS, Tile
from .transforms import NormalizationSpec, normalize_coords, transform_agbd

CONTEXT_RATIO_RANGE = (0.3, 0.7)


@dataclass
class PointSet:
    coords: np.ndarray  # (n, 2) normalized lon, lat
    patches: np.ndarray  # (n, 3, 3, D)
    agbd: np.ndarray  # (n,) normalized log AGBD
    index: np.ndarray  # (n,) positions in the tile's observation list

    def __len__(self) -> int:
        return len(self.index)


@dataclass
class Episode:
    context: PointSet
    targets: PointSet
    tile_id: str

    def masked(self) -> "Episode":
        """Copy whose target AGBD values are NaN (for inference)."""
        t = self.targets
        return replace(self, targets=replace(t, agbd=np.full_like(t.agbd, np.nan)))


def _seed_word(value: int) -> int:
    return int(value) % (2 ** 32)


def episode_rng(seed: int, tile: Tile, draw: int) -> np.random.Generator:
    """Independent stream per (global seed, tile, draw index)."""
    ss = np.random.SeedSequence([_seed_word(seed), _seed_word(tile.row), _seed_word(tile.col), _seed_word(draw)])
    return np.random.default_rng(ss)


def context_count(n: int, ratio: float) -> int:
    """Round half up, then keep both sets non-empty."""
    return min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)


def _points(tile: Tile, idx: np.ndarray, spec: NormalizationSpec, coord_noise: np.ndarray | None) -> PointSet:
    x, y = normalize_coords(tile.lon[idx], tile.lat[idx], spec)
    coords = np.stack([x, y], axis=1)
    if coord_noise is not None:
        coords = coords + coord_noise
    return PointSet(
        coords=coords.astype(np.float32),
        patches=tile.patches[idx],
        agbd=transform_agbd(tile.agbd[idx], spec).astype(np.float32),
        index=idx,
    )


def sample_episode(
    tile: Tile,
    spec: NormalizationSpec,
    rng: np.random.Generator,
    train_mode: bool = True,
    ratio_range: tuple[float, float] = CONTEXT_RATIO_RANGE,
    min_shots: int = MIN_SHOTS,
    ratio: float | None = None,
) -> Episode:
    """Random disjoint split of a tile into context and targets.

    In ``train_mode`` Gaussian noise with ``spec.coord_noise_std`` is added to
    the normalized coordinates of both sets. ``ratio`` fixes the context
    fraction instead of drawing it.
    """
    n = len(tile)
    if n < min_shots:
        raise ValueError(f"tile {tile.tile_id} has {n} shots; episodes need at least {min_shots}")
    if ratio is None:
        ratio = rng.uniform(*ratio_range)
    n_ctx = context_count(n, ratio)
    perm = rng.permutation(n)
    ctx_idx, tgt_idx = np.sort(perm[:n_ctx]), np.sort(perm[n_ctx:])
    ctx_noise = tgt_noise = None
    if train_mode and spec.coord_noise_std > 0:
        ctx_noise = rng.normal(0.0, spec.coord_noise_std, size=(n_ctx, 2))
        tgt_noise = rng.normal(0.0, spec.coord_noise_std, size=(n - n_ctx, 2))
    return Episode(
        context=_points(tile, ctx_idx, spec, ctx_noise),
        targets=_points(tile, tgt_idx, spec, tgt_noise),
        tile_id=tile.tile_id,
    )


def full_context(tile: Tile, spec: NormalizationSpec) -> PointSet:
    """Every observation of the tile as context (mapping mode)."""
    return _points(tile, np.arange(len(tile)), spec, None)


def query_points(lon, lat, patches, spec: NormalizationSpec) -> PointSet:
    """Unlabelled query locations."""
    x, y = normalize_coords(lon, lat, spec)
    n = len(x)
    return PointSet(
        coords=np.stack([x, y], axis=1).astype(np.float32),
        patches=np.asarray(patches, dtype=np.float32),
        agbd=np.full(n, np.nan, dtype=np.float32),
        index=np.arange(n),
    )
