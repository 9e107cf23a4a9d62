"""Tiling of observations and buffered tile-level splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .observations import Observation

TILE_PITCH = 0.1
MIN_SHOTS = 10
BUFFER_TOLERANCE = 1e-9

TRAIN, VAL, TEST, EXCLUDED = "train", "val", "test", "buffer-excluded"


def tile_index(value: float, pitch: float = TILE_PITCH) -> int:
    """Index of the half-open interval ``[k*pitch, (k+1)*pitch)`` holding ``value``.

    Values within 1e-9 (in units of pitch) of a boundary snap to the boundary,
    so ``k*pitch`` computed in floating point lands in tile ``k``.
    """
    q = value / pitch
    k = math.floor(q)
    r = round(q)
    if abs(q - r) < 1e-9:
        k = r
    return int(k)


@dataclass
class Tile:
    row: int
    col: int
    observations: list[Observation] = field(default_factory=list)
    pitch: float = TILE_PITCH

    @property
    def tile_id(self) -> str:
        return f"{self.row}_{self.col}"

    @property
    def center(self) -> tuple[float, float]:
        return ((self.col + 0.5) * self.pitch, (self.row + 0.5) * self.pitch)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(lon_min, lon_max, lat_min, lat_max)"""
        return (self.col * self.pitch, (self.col + 1) * self.pitch,
                self.row * self.pitch, (self.row + 1) * self.pitch)

    def __len__(self) -> int:
        return len(self.observations)

    def usable(self, min_shots: int = MIN_SHOTS) -> bool:
        return len(self.observations) >= min_shots

    @cached_property
    def lon(self) -> np.ndarray:
        return np.array([o.lon for o in self.observations], dtype=float)

    @cached_property
    def lat(self) -> np.ndarray:
        return np.array([o.lat for o in self.observations], dtype=float)

    @cached_property
    def agbd(self) -> np.ndarray:
        return np.array([o.agbd for o in self.observations], dtype=float)

    @cached_property
    def patches(self) -> np.ndarray:
        return np.stack([o.patch for o in self.observations]).astype(np.float32)


def parse_tile_id(tile_id: str) -> tuple[int, int]:
    row, col = tile_id.split("_")
    return int(row), int(col)


def assign_tiles(observations: Sequence[Observation], pitch: float = TILE_PITCH) -> list[Tile]:
    """Group observations into tiles, sorted by (row, col)."""
    tiles: dict[tuple[int, int], Tile] = {}
    for obs in observations:
        if not (math.isfinite(obs.lon) and math.isfinite(obs.lat)):
            raise ValueError(f"non-finite coordinates ({obs.lon}, {obs.lat})")
        key = (tile_index(obs.lat, pitch), tile_index(obs.lon, pitch))
        if key not in tiles:
            tiles[key] = Tile(row=key[0], col=key[1], pitch=pitch)
        tiles[key].observations.append(obs)
    return [tiles[k] for k in sorted(tiles)]


class SplitError(ValueError):
    """Not enough tiles to form non-empty train, validation and test sets."""


@dataclass
class SplitAssignment:
    labels: dict[str, str]
    buffer: float = TILE_PITCH
    seed: int = 0
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def ids(self, label: str) -> list[str]:
        return sorted((t for t, lab in self.labels.items() if lab == label), key=parse_tile_id)

    @property
    def train(self) -> list[str]:
        return self.ids(TRAIN)

    @property
    def val(self) -> list[str]:
        return self.ids(VAL)

    @property
    def test(self) -> list[str]:
        return self.ids(TEST)

    @property
    def excluded(self) -> list[str]:
        return self.ids(EXCLUDED)

    def to_dict(self) -> dict:
        return {
            "buffer": self.buffer,
            "seed": self.seed,
            "fractions": list(self.fractions),
            "labels": {k: self.labels[k] for k in sorted(self.labels, key=parse_tile_id)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(labels=dict(d["labels"]), buffer=d["buffer"], seed=d["seed"], fractions=tuple(d["fractions"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _centers(tiles: Sequence[Tile]) -> np.ndarray:
    return np.array([t.center for t in tiles], dtype=float)


def buffer_mask(tiles: Sequence[Tile], test_idx: Sequence[int], buffer: float) -> np.ndarray:
    """Boolean mask of non-test tiles whose center lies within ``buffer`` of a test center."""
    centers = _centers(tiles)
    test_idx = np.asarray(test_idx, dtype=int)
    d = np.sqrt(((centers[:, None, :] - centers[None, test_idx, :]) ** 2).sum(-1))
    near = (d <= buffer + BUFFER_TOLERANCE).any(axis=1)
    near[test_idx] = False
    return near


def buffered_spatial_split(
    tiles: Sequence[Tile],
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    buffer: float = TILE_PITCH,
    seed: int = 0,
    min_shots: int = MIN_SHOTS,
    test_ids: Sequence[str] | None = None,
) -> SplitAssignment:
    """Draw test tiles, drop their neighbours within ``buffer``, then draw validation tiles.

    Only usable tiles (at least ``min_shots`` observations) take part. The
    validation count is the validation fraction of all eligible tiles; the
    remainder after test, buffer and validation is training. ``test_ids``
    pins the test set instead of drawing it. Ten or more usable tiles are
    expected; smaller sets are accepted as long as all three sets come out
    non-empty.
    """
    eligible = sorted((t for t in tiles if t.usable(min_shots)), key=lambda t: (t.row, t.col))
    n = len(eligible)
    if n < 3:
        raise SplitError(f"need at least 3 usable tiles, got {n}")
    _, frac_val, frac_test = fractions
    rng = np.random.default_rng(seed)

    if test_ids is None:
        n_test = max(1, _round_half_up(frac_test * n))
        test_idx = np.sort(rng.choice(n, size=n_test, replace=False))
    else:
        index = {t.tile_id: i for i, t in enumerate(eligible)}
        test_idx = np.array(sorted(index[t] for t in test_ids), dtype=int)

    excluded = buffer_mask(eligible, test_idx, buffer)
    is_test = np.zeros(n, dtype=bool)
    is_test[test_idx] = True
    pool = np.flatnonzero(~is_test & ~excluded)
    n_val = max(1, _round_half_up(frac_val * n))
    if len(pool) < n_val + 1:
        raise SplitError(
            f"{len(pool)} tiles remain after {len(test_idx)} test and {int(excluded.sum())} buffered tiles; "
            f"cannot form {n_val} validation tiles plus a training set")
    val_idx = np.sort(rng.choice(pool, size=n_val, replace=False))

    labels = {}
    for i, t in enumerate(eligible):
        labels[t.tile_id] = TRAIN
    for i in np.flatnonzero(excluded):
        labels[eligible[i].tile_id] = EXCLUDED
    for i in val_idx:
        labels[eligible[i].tile_id] = VAL
    for i in test_idx:
        labels[eligible[i].tile_id] = TEST
    return SplitAssignment(labels=labels, buffer=buffer, seed=seed, fractions=tuple(fractions))


def min_distance_to_test(tiles: Sequence[Tile], split: SplitAssignment) -> float:
    """Smallest center distance from any train/val tile to any test tile."""
    by_id = {t.tile_id: t for t in tiles}
    test = np.array([by_id[i].center for i in split.test])
    others = np.array([by_id[i].center for i in split.train + split.val])
    if len(test) == 0 or len(others) == 0:
        return math.inf
    d = np.sqrt(((others[:, None, :] - test[None, :, :]) ** 2).sum(-1))
    return float(d.min())
