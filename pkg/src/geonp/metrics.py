"""Accuracy and calibration diagnostics in normalized log space and Mg/ha."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .geodata.tiles import tile_index
from .geodata.transforms import NormalizationSpec, inverse_transform_agbd

NOMINAL_COVERAGE = {1: 68.27, 2: 95.45, 3: 99.73}
DEFAULT_K_GRID = tuple(np.round(np.arange(0.1, 3.01, 0.1), 2))
QQ_PERCENTILES = tuple(range(1, 100))
Z_HIST_EDGES = tuple(np.round(np.arange(-5.0, 5.01, 0.25), 2))


class DegenerateError(ValueError):
    """Correlation undefined because one variable has zero variance."""


@dataclass
class AccuracyReport:
    log_r2: float
    log_rmse: float
    log_mae: float
    linear_rmse: float
    linear_mae: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CalibrationReport:
    z_mean: float
    z_std: float
    coverage_1: float
    coverage_2: float
    coverage_3: float
    coverage_curve: list[tuple[float, float]] = field(default_factory=list)
    sigma_bins: list[dict] = field(default_factory=list)
    qq: list[tuple[float, float]] = field(default_factory=list)
    z_histogram: list[tuple[float, float, int]] = field(default_factory=list)
    quantile_crossings: int | None = None
    n: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coverage_curve"] = [list(p) for p in self.coverage_curve]
        d["qq"] = [list(p) for p in self.qq]
        d["z_histogram"] = [list(p) for p in self.z_histogram]
        return d

    def write_csvs(self, directory, prefix: str = "") -> list[Path]:
        """One CSV per diagnostic panel."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        panels = {
            "z_histogram": (["z_lo", "z_hi", "count"], self.z_histogram),
            "coverage_curve": (["k", "coverage_pct", "nominal_pct"],
                               [(k, c, 100.0 * (2 * stats.norm.cdf(k) - 1)) for k, c in self.coverage_curve]),
            "sigma_bins": (["sigma_lo", "sigma_hi", "mean_sigma", "mae", "rmse", "n"],
                           [(b["sigma_lo"], b["sigma_hi"], b["mean_sigma"], b["mae"], b["rmse"], b["n"])
                            for b in self.sigma_bins]),
            "qq": (["theoretical", "empirical"], self.qq),
        }
        paths = []
        for name, (header, rows) in panels.items():
            path = directory / f"{prefix}{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for row in rows:
                    w.writerow([_fmt(v) for v in row])
            paths.append(path)
        return paths


@dataclass
class DensityCorrelation:
    block: float
    counts: list[int]
    mean_sigma: list[float]
    r: float
    p_value: float
    n_blocks: int

    def to_dict(self) -> dict:
        return asdict(self)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _arrays(*xs):
    arrs = [np.asarray(x, dtype=float).reshape(-1) for x in xs]
    n = len(arrs[0])
    if any(len(a) != n for a in arrs):
        raise ValueError(f"length mismatch: {[len(a) for a in arrs]}")
    return arrs


def r2_score(y, pred) -> float:
    y, pred = _arrays(y, pred)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - pred) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -math.inf
    return 1.0 - ss_res / ss_tot


def accuracy_metrics(y_true_log, y_pred_log, spec: NormalizationSpec | None = None) -> AccuracyReport:
    """Statistics on the normalized log values and, after back-transform, in Mg/ha."""
    y, p = _arrays(y_true_log, y_pred_log)
    if len(y) < 2:
        raise ValueError(f"need at least 2 predictions, got {len(y)}")
    resid = y - p
    lin = inverse_transform_agbd(y, spec) - inverse_transform_agbd(p, spec)
    return AccuracyReport(
        log_r2=r2_score(y, p),
        log_rmse=float(np.sqrt(np.mean(resid ** 2))),
        log_mae=float(np.mean(np.abs(resid))),
        linear_rmse=float(np.sqrt(np.mean(lin ** 2))),
        linear_mae=float(np.mean(np.abs(lin))),
        n=len(y),
    )


def standardized_residuals(y_true, mu, sigma) -> np.ndarray:
    y, m, s = _arrays(y_true, mu, sigma)
    if np.any(~(s > 0)):
        raise ValueError(f"sigma must be > 0 everywhere ({int(np.sum(~(s > 0)))} entries are not)")
    return (y - m) / s


def zscore_stats(y_true, mu, sigma) -> tuple[float, float]:
    """Mean and sample std (n-1) of ``(y - mu) / sigma``."""
    z = standardized_residuals(y_true, mu, sigma)
    return float(np.mean(z)), (float(np.std(z, ddof=1)) if len(z) > 1 else 0.0)


def coverage(y_true, mu, sigma, k_levels=(1, 2, 3)) -> list[float]:
    """Percentage of points with ``|y - mu| <= k sigma`` for each k."""
    y, m, s = _arrays(y_true, mu, sigma)
    if np.any(~(s > 0)):
        raise ValueError("sigma must be > 0 everywhere")
    err = np.abs(y - m)
    return [float(100.0 * np.mean(err <= k * s)) for k in k_levels]


def sigma_bins(abs_err, sigma, n_bins: int = 10) -> list[dict]:
    """Equal-count sigma bins (duplicate quantile edges merged) with per-bin MAE."""
    e, s = _arrays(abs_err, sigma)
    edges = np.unique(np.quantile(s, np.linspace(0.0, 1.0, n_bins + 1)))
    if len(edges) == 1:
        idx = np.zeros(len(s), dtype=int)
        edges = np.array([edges[0], edges[0]])
    else:
        idx = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, len(edges) - 2)
    out = []
    for b in range(len(edges) - 1):
        sel = idx == b
        if not sel.any():
            continue
        out.append({"sigma_lo": float(edges[b]), "sigma_hi": float(edges[b + 1]),
                    "mean_sigma": float(s[sel].mean()), "mae": float(e[sel].mean()),
                    "rmse": float(np.sqrt(np.mean(e[sel] ** 2))), "n": int(sel.sum())})
    return out


def calibration_curves(y_true, mu, sigma, n_bins: int = 10, k_grid=DEFAULT_K_GRID,
                       quantile_crossings: int | None = None) -> CalibrationReport:
    y, m, s = _arrays(y_true, mu, sigma)
    if len(y) < n_bins:
        raise ValueError(f"need at least n_bins={n_bins} points, got {len(y)}")
    z = standardized_residuals(y, m, s)
    z_mean, z_std = zscore_stats(y, m, s)
    c1, c2, c3 = coverage(y, m, s)
    curve = list(zip((float(k) for k in k_grid), coverage(y, m, s, k_grid)))
    theo = stats.norm.ppf(np.array(QQ_PERCENTILES) / 100.0)
    emp = np.percentile(z, QQ_PERCENTILES)
    counts, edges = np.histogram(np.clip(z, Z_HIST_EDGES[0], Z_HIST_EDGES[-1]), bins=np.array(Z_HIST_EDGES))
    return CalibrationReport(
        z_mean=z_mean, z_std=z_std, coverage_1=c1, coverage_2=c2, coverage_3=c3,
        coverage_curve=curve,
        sigma_bins=sigma_bins(np.abs(y - m), s, n_bins),
        qq=[(float(a), float(b)) for a, b in zip(theo, emp)],
        z_histogram=[(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)],
        quantile_crossings=quantile_crossings,
        n=len(y),
    )


def pearson(x, y) -> tuple[float, float]:
    """Pearson r with a two-sided p-value from the t distribution (n-2 df)."""
    x, y = _arrays(x, y)
    n = len(x)
    if n < 3:
        raise ValueError(f"need at least 3 pairs, got {n}")
    if any(np.ptp(v) <= 1e-12 * np.max(np.abs(v)) for v in (x, y)):
        raise DegenerateError("correlation undefined: zero variance in one variable")
    r = float(np.corrcoef(x, y)[0, 1])
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


def density_uncertainty_correlation(lon, lat, sigma, block: float = 0.01) -> DensityCorrelation:
    """Correlate per-block shot count with per-block mean sigma.

    Blocks are half-open ``block``-degree cells; only non-empty blocks enter.
    A negative r means sparse blocks carry larger sigma.
    """
    lon, lat, s = _arrays(lon, lat, sigma)
    keys = np.array([(tile_index(a, block), tile_index(b, block)) for a, b in zip(lat, lon)])
    if len(keys) == 0:
        raise ValueError("no points")
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv)
    mean_sigma = np.bincount(inv, weights=s) / counts
    if len(uniq) < 3:
        raise ValueError(f"need at least 3 non-empty blocks, got {len(uniq)}")
    r, p = pearson(counts, mean_sigma)
    return DensityCorrelation(block, counts.tolist(), mean_sigma.tolist(), r, p, len(uniq))


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
