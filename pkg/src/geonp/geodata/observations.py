"""Footprint observations, quality filtering and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

QUALITY_COLUMNS = (
    "quality_flag",
    "degrade_flag",
    "surface_flag",
    "sensitivity_a0",
    "sensitivity_a2",
    "elev_diff_tdx",
)
BASE_COLUMNS = ("lon", "lat", "agbd")
MAX_AGBD = 500.0
PATCH_SIZE = 3


class DataFormatError(ValueError):
    """Malformed observation input."""


@dataclass
class Observation:
    lon: float
    lat: float
    agbd: float
    patch: np.ndarray  # (3, 3, D)
    quality_flag: int | None = None
    degrade_flag: int | None = None
    surface_flag: int | None = None
    sensitivity_a0: float | None = None
    sensitivity_a2: float | None = None
    elevation_difference_tdx: float | None = None

    @property
    def embed_dim(self) -> int:
        return self.patch.shape[-1]


def quality_filter(obs: Observation) -> bool:
    """True when the shot passes the L2A quality screen and the AGBD cap.

    Fields that are ``None`` are treated as passing.
    """
    if obs.quality_flag is not None and obs.quality_flag != 1:
        return False
    if obs.degrade_flag is not None and obs.degrade_flag != 0:
        return False
    if obs.surface_flag is not None and obs.surface_flag != 1:
        return False
    if obs.sensitivity_a0 is not None and not 0.9 <= obs.sensitivity_a0 <= 1.0:
        return False
    if obs.sensitivity_a2 is not None and not 0.95 <= obs.sensitivity_a2 <= 1.0:
        return False
    if obs.elevation_difference_tdx is not None and not -150.0 <= obs.elevation_difference_tdx <= 150.0:
        return False
    return 0.0 <= obs.agbd < MAX_AGBD


def embedding_columns(embed_dim: int) -> list[str]:
    return [f"e_{i}" for i in range(PATCH_SIZE * PATCH_SIZE * embed_dim)]


def csv_header(embed_dim: int, with_quality: bool = True) -> list[str]:
    cols = list(BASE_COLUMNS)
    if with_quality:
        cols += list(QUALITY_COLUMNS)
    return cols + embedding_columns(embed_dim)


def infer_embed_dim(path) -> int:
    """Embedding channels D implied by the ``e_*`` columns of a CSV header."""
    with Path(path).open(newline="") as fh:
        try:
            header = next(csv.reader(fh))
        except StopIteration:
            raise DataFormatError(f"{path}: empty file (no header)") from None
    n = sum(h.strip().startswith("e_") for h in header)
    per = PATCH_SIZE * PATCH_SIZE
    if n == 0 or n % per:
        raise DataFormatError(f"{path}: {n} embedding columns is not a positive multiple of {per}")
    return n // per


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"line {line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataFormatError(f"line {line}: column {column!r} is not finite: {text!r}")
    return value


def load_observations_csv(path, embed_dim: int) -> list[Observation]:
    """Read observations; patches are rebuilt row-major as (row, col, channel)."""
    path = Path(path)
    n_embed = PATCH_SIZE * PATCH_SIZE * embed_dim
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file (no header)") from None
        header = [h.strip() for h in header]
        with_quality = header[3:3 + len(QUALITY_COLUMNS)] == list(QUALITY_COLUMNS)
        expected = csv_header(embed_dim, with_quality)
        if header != expected:
            n_found = sum(h.startswith("e_") for h in header)
            if n_found != n_embed:
                raise DataFormatError(
                    f"{path}: header has {n_found} embedding columns, expected {n_embed} for D={embed_dim}")
            raise DataFormatError(f"{path}: unexpected header; expected {expected[:3 + 6 * with_quality]} + e_* columns")

        observations = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataFormatError(f"line {line}: expected {len(expected)} columns, got {len(row)}")
            lon = _parse_float(row[0], "lon", line)
            lat = _parse_float(row[1], "lat", line)
            agbd = _parse_float(row[2], "agbd", line)
            quality = {}
            offset = 3
            if with_quality:
                vals = [_parse_float(row[3 + i], c, line) for i, c in enumerate(QUALITY_COLUMNS)]
                quality = dict(
                    quality_flag=int(vals[0]),
                    degrade_flag=int(vals[1]),
                    surface_flag=int(vals[2]),
                    sensitivity_a0=vals[3],
                    sensitivity_a2=vals[4],
                    elevation_difference_tdx=vals[5],
                )
                offset += len(QUALITY_COLUMNS)
            try:
                emb = np.array(row[offset:], dtype=np.float32)
            except ValueError:
                raise DataFormatError(f"line {line}: non-numeric embedding value") from None
            if not np.all(np.isfinite(emb)):
                bad = int(np.flatnonzero(~np.isfinite(emb))[0])
                raise DataFormatError(f"line {line}: embedding column e_{bad} is not finite")
            observations.append(Observation(lon, lat, agbd, emb.reshape(PATCH_SIZE, PATCH_SIZE, embed_dim),
                                            **quality))
    return observations


def _fmt(value) -> str:
    return repr(float(value))


def write_observations_csv(path, observations: Sequence[Observation], embed_dim: int | None = None) -> None:
    if embed_dim is None:
        if not observations:
            raise ValueError("embed_dim required when writing an empty observation list")
        embed_dim = observations[0].embed_dim
    with_quality = any(o.quality_flag is not None for o in observations)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(embed_dim, with_quality))
        for o in observations:
            row = [_fmt(o.lon), _fmt(o.lat), _fmt(o.agbd)]
            if with_quality:
                row += [str(int(o.quality_flag)), str(int(o.degrade_flag)), str(int(o.surface_flag)),
                        _fmt(o.sensitivity_a0), _fmt(o.sensitivity_a2), _fmt(o.elevation_difference_tdx)]
            row += [_fmt(v) for v in np.asarray(o.patch, dtype=np.float32).reshape(-1)]
            writer.writerow(row)


def filter_observations(observations: Iterable[Observation]) -> list[Observation]:
    return [o for o in observations if quality_filter(o)]
