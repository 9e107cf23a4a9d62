"""Synthetic landscapes standing in for lidar biomass shots and image embeddings.

A landscape is built from random Fourier features, so every field can be
evaluated at arbitrary coordinates:

* ``biomass(lon, lat)``: smooth latent field in normalized log-AGBD units;
* ``noise_std(lon, lat)``: smooth heteroscedastic noise level in
  ``[sigma_lo, sigma_hi]``;
* ``embeddings(lon, lat)``: D channels mixing the two fields above (weighted
  by ``informativeness``) with channel-specific nuisance fields.

Observed values are ``biomass + noise_std * N(0, 1)``. Shots are laid out
along a few straight tracks per tile, so shot density varies within tiles.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .observations import Observation
from .tiles import Tile, assign_tiles, tile_index
from .transforms import inverse_transform_agbd

N_FEATURES = 256
PIXEL_DEG = 0.0001  # ~10 m embedding pixels
MAX_NORM_AGBD = 1.16  # just under 500 Mg/ha


@dataclass
class SyntheticConfig:
    lon_min: float = -73.0
    lat_min: float = 2.0
    tiles_per_side: int = 8
    tile_size: float = 0.1
    shots_per_tile: int = 200
    shots_jitter: int = 40
    embed_dim: int = 8
    length_scale: float = 0.004
    sigma_lo: float = 0.05
    sigma_hi: float = 0.15
    informativeness: float = 1.0
    embed_noise: float = 0.3
    biomass_mean: float = 0.55
    biomass_amplitude: float = 0.2
    tracks_per_tile: tuple[int, int] = (2, 5)
    seed: int = 0
    feature_seed: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.sigma_lo > self.sigma_hi:
            raise ValueError(f"sigma_lo ({self.sigma_lo}) exceeds sigma_hi ({self.sigma_hi})")
        if self.sigma_lo < 0:
            raise ValueError("sigma_lo must be non-negative")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.tiles_per_side < 1 or self.shots_per_tile < 1:
            raise ValueError("tiles_per_side and shots_per_tile must be positive")
        if self.shots_jitter < 0 or self.shots_jitter >= self.shots_per_tile:
            raise ValueError("shots_jitter must lie in [0, shots_per_tile)")
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if not 0.0 <= self.informativeness:
            raise ValueError("informativeness must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tracks_per_tile"] = list(self.tracks_per_tile)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "tracks_per_tile" in d:
            d["tracks_per_tile"] = tuple(d["tracks_per_tile"])
        return cls(**d)


class _FourierField:
    """Random Fourier features approximating a unit-variance RBF Gaussian process."""

    def __init__(self, rng: np.random.Generator, length_scale: float, n_out: int = 1):
        self.omega = rng.normal(0.0, 1.0 / length_scale, size=(2, N_FEATURES))
        self.phase = rng.uniform(0.0, 2 * math.pi, size=N_FEATURES)
        self.weights = rng.normal(size=(N_FEATURES, n_out)) * math.sqrt(2.0 / N_FEATURES)

    def __call__(self, lon, lat) -> np.ndarray:
        pts = np.stack([np.ravel(lon), np.ravel(lat)], axis=1)
        return np.cos(pts @ self.omega + self.phase) @ self.weights


class SyntheticLandscape:
    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self._biomass = _FourierField(rng, cfg.length_scale)
        self._complexity = _FourierField(rng, 2.0 * cfg.length_scale)
        frng = np.random.default_rng(np.random.SeedSequence(
            [cfg.seed if cfg.feature_seed is None else cfg.feature_seed, 2]))
        d = cfg.embed_dim
        self._nuisance = _FourierField(frng, 0.5 * cfg.length_scale, n_out=d)
        self._mix = frng.normal(size=(4, d))
        self._mix /= np.linalg.norm(self._mix, axis=0, keepdims=True)

    def latent(self, lon, lat) -> np.ndarray:
        return self._biomass(lon, lat)[:, 0]

    def biomass(self, lon, lat) -> np.ndarray:
        c = self.cfg
        return np.clip(c.biomass_mean + c.biomass_amplitude * self.latent(lon, lat), 0.0, MAX_NORM_AGBD)

    def noise_std(self, lon, lat) -> np.ndarray:
        c = self.cfg
        s = 1.0 / (1.0 + np.exp(-1.5 * self._complexity(lon, lat)[:, 0]))
        return c.sigma_lo + (c.sigma_hi - c.sigma_lo) * s

    def embeddings(self, lon, lat) -> np.ndarray:
        g = self.latent(lon, lat)
        h = self._complexity(lon, lat)[:, 0]
        signals = np.stack([g, np.tanh(1.5 * g), h, g * h], axis=1)
        return self.cfg.informativeness * (signals @ self._mix) + self.cfg.embed_noise * self._nuisance(lon, lat)

    def patches(self, lon, lat) -> np.ndarray:
        """(n, 3, 3, D) embedding patches centred on each location."""
        lon, lat = np.ravel(lon), np.ravel(lat)
        offs = np.array([-PIXEL_DEG, 0.0, PIXEL_DEG])
        # pixel (row, col): row runs north to south, col west to east
        plon = lon[:, None, None] + offs[None, None, :]
        plat = lat[:, None, None] - offs[None, :, None]
        plon, plat = np.broadcast_arrays(plon, plat)
        emb = self.embeddings(plon.ravel(), plat.ravel())
        return emb.reshape(len(lon), 3, 3, self.cfg.embed_dim).astype(np.float32)


@dataclass
class SyntheticRegion:
    """Generated tiles plus the landscape and per-shot truth; iterates like a list of tiles."""

    tiles: list[Tile]
    landscape: SyntheticLandscape
    true_noise_std: dict[str, np.ndarray] = field(default_factory=dict)
    true_biomass: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)

    def __getitem__(self, i) -> Tile:
        return self.tiles[i]

    @property
    def observations(self) -> list[Observation]:
        return [o for t in self.tiles for o in t.observations]

    def truth_summary(self) -> dict:
        tiles = []
        for t in self.tiles:
            s = self.true_noise_std[t.tile_id]
            tiles.append({
                "tile_id": t.tile_id,
                "n_shots": len(t),
                "noise_std_mean": float(s.mean()),
                "noise_std_min": float(s.min()),
                "noise_std_max": float(s.max()),
                "biomass_norm_mean": float(self.true_biomass[t.tile_id].mean()),
            })
        return {"config": self.landscape.cfg.to_dict(), "tiles": tiles}

    def write_truth(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.truth_summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _track_points(rng: np.random.Generator, n: int, lon0: float, lat0: float, size: float,
                  n_tracks: int) -> tuple[np.ndarray, np.ndarray]:
    counts = rng.multinomial(n, rng.dirichlet(np.full(n_tracks, 2.0)))
    lons, lats = [], []
    for k in counts:
        angle = rng.uniform(0.2, 0.6) * math.pi  # steep, roughly north-south passes
        cx, cy = rng.uniform(0.1, 0.9, size=2) * size
        t = rng.uniform(-size, size, size=k)
        jitter = rng.normal(0.0, 0.002, size=k)
        x = cx + t * math.cos(angle) - jitter * math.sin(angle)
        y = cy + t * math.sin(angle) + jitter * math.cos(angle)
        # fold back into the tile
        x = np.abs(np.mod(x + size, 2 * size) - size)
        y = np.abs(np.mod(y + size, 2 * size) - size)
        lons.append(lon0 + np.clip(x, 1e-6, size - 1e-6))
        lats.append(lat0 + np.clip(y, 1e-6, size - 1e-6))
    return np.concatenate(lons), np.concatenate(lats)


def generate_synthetic_region(cfg: SyntheticConfig) -> SyntheticRegion:
    cfg.validate()
    land = SyntheticLandscape(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    col0 = tile_index(cfg.lon_min, cfg.tile_size)
    row0 = tile_index(cfg.lat_min, cfg.tile_size)
    tiles, true_s, true_f = [], {}, {}
    for r in range(cfg.tiles_per_side):
        for c in range(cfg.tiles_per_side):
            lon0 = (col0 + c) * cfg.tile_size
            lat0 = (row0 + r) * cfg.tile_size
            n = cfg.shots_per_tile + int(rng.integers(-cfg.shots_jitter, cfg.shots_jitter + 1))
            n_tracks = int(rng.integers(cfg.tracks_per_tile[0], cfg.tracks_per_tile[1] + 1))
            lon, lat = _track_points(rng, n, lon0, lat0, cfg.tile_size, n_tracks)
            f = land.biomass(lon, lat)
            s = land.noise_std(lon, lat)
            y = np.clip(f + s * rng.normal(size=n), 0.0, MAX_NORM_AGBD)
            agbd = inverse_transform_agbd(y)
            patches = land.patches(lon, lat)
            obs = [Observation(float(lon[i]), float(lat[i]), float(agbd[i]), patches[i],
                               quality_flag=1, degrade_flag=0, surface_flag=1,
                               sensitivity_a0=0.95, sensitivity_a2=0.98, elevation_difference_tdx=0.0)
                   for i in range(n)]
            (tile,) = assign_tiles(obs, cfg.tile_size)
            tiles.append(tile)
            true_s[tile.tile_id] = s
            true_f[tile.tile_id] = f
    tiles.sort(key=lambda t: (t.row, t.col))
    return SyntheticRegion(tiles=tiles, landscape=land, true_noise_std=true_s, true_biomass=true_f)
