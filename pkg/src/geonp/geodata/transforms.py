from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_SCALE = 200.0  # Mg/ha mapped to 1.0
DEFAULT_COORD_NOISE_STD = 0.1  # N(0, 0.01) read as a variance


@dataclass(frozen=True)
class NormalizationSpec:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    scale: float = DEFAULT_SCALE
    coord_noise_std: float = DEFAULT_COORD_NOISE_STD

    def __post_init__(self):
        if not self.lon_max > self.lon_min:
            raise ValueError(f"lon_max ({self.lon_max}) must exceed lon_min ({self.lon_min})")
        if not self.lat_max > self.lat_min:
            raise ValueError(f"lat_max ({self.lat_max}) must exceed lat_min ({self.lat_min})")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.coord_noise_std < 0:
            raise ValueError("coord_noise_std must be non-negative")

    @classmethod
    def from_points(cls, lon, lat, **kwargs) -> "NormalizationSpec":
        """Bounds taken from the extent of the given coordinates."""
        lon, lat = np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)
        return cls(float(lon.min()), float(lon.max()), float(lat.min()), float(lat.max()), **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(**d)


def normalize_coords(lon, lat, spec: NormalizationSpec):
    x = (np.asarray(lon, dtype=float) - spec.lon_min) / (spec.lon_max - spec.lon_min)
    y = (np.asarray(lat, dtype=float) - spec.lat_min) / (spec.lat_max - spec.lat_min)
    return x, y


def denormalize_coords(x, y, spec: NormalizationSpec):
    lon = np.asarray(x, dtype=float) * (spec.lon_max - spec.lon_min) + spec.lon_min
    lat = np.asarray(y, dtype=float) * (spec.lat_max - spec.lat_min) + spec.lat_min
    return lon, lat


def transform_agbd(agbd, spec: NormalizationSpec | None = None):
    """``log1p(agbd) / log1p(S)``."""
    scale = DEFAULT_SCALE if spec is None else spec.scale
    a = np.asarray(agbd, dtype=float)
    if np.any(a < 0):
        raise ValueError("AGBD must be non-negative")
    return np.log1p(a) / math.log1p(scale)


def inverse_transform_agbd(y_norm, spec: NormalizationSpec | None = None):
    scale = DEFAULT_SCALE if spec is None else spec.scale
    return np.expm1(np.asarray(y_norm, dtype=float) * math.log1p(scale))


def backtransform_sigma(sigma_norm, mu_raw, spec: NormalizationSpec | None = None):
    """Delta-method standard deviation in Mg/ha: ``sigma * ln(1+S) * (1 + mu_raw)``."""
    scale = DEFAULT_SCALE if spec is None else spec.scale
    s = np.asarray(sigma_norm, dtype=float)
    if np.any(s < 0):
        raise ValueError("sigma_norm must be non-negative")
    return s * math.log1p(scale) * (1.0 + np.asarray(mu_raw, dtype=float))
