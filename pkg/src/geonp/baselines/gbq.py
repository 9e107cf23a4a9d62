"""Gradient-boosted quantile regression with three ensembles (mean, lower, upper).

Every stage fits a CART tree to the negative gradient of the loss on a row
subsample, using a column subsample. For the quantile ensembles the leaf
values are then replaced by the tau-quantile of the current residuals routed
to each leaf, which is the exact pinball-loss minimizer there. Predictions are
``base + lr * sum(tree outputs)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .trees import RegressionTree

# quantile levels and the z value that turns their span into one sigma
QUANTILE_PRESETS = {
    "wide": ((0.025, 0.975), 1.96),
    "narrow": ((0.16, 0.84), 1.0),
}


def pinball_loss(residual, tau: float) -> np.ndarray:
    """Elementwise ``max(tau * r, (tau - 1) * r)`` with ``r = y - q``."""
    r = np.asarray(residual, dtype=float)
    return np.maximum(tau * r, (tau - 1.0) * r)


def sigma_from_quantiles(q_lo, q_hi, z: float = 1.96) -> tuple[np.ndarray, int]:
    """``(q_hi - q_lo) / (2 z)``, floored at 0; also returns the number of crossings."""
    span = np.asarray(q_hi, dtype=float) - np.asarray(q_lo, dtype=float)
    crossings = int(np.sum(span < 0))
    return np.maximum(span, 0.0) / (2.0 * z), crossings


@dataclass
class GBQConfig:
    n_estimators: int = 100
    max_depth: int = 6
    learning_rate: float = 0.1
    subsample: float = 0.8
    colsample: float = 0.8
    min_samples_leaf: int = 1
    quantiles: str = "wide"
    seed: int = 0

    def __post_init__(self):
        if self.quantiles not in QUANTILE_PRESETS:
            raise ValueError(f"quantiles must be one of {sorted(QUANTILE_PRESETS)}, got {self.quantiles!r}")
        if not (0 < self.subsample <= 1 and 0 < self.colsample <= 1):
            raise ValueError("subsample and colsample must lie in (0, 1]")
        if self.n_estimators < 0 or self.learning_rate <= 0:
            raise ValueError("n_estimators must be >= 0 and learning_rate > 0")

    @property
    def levels(self) -> tuple[float, float]:
        return QUANTILE_PRESETS[self.quantiles][0]

    @property
    def z(self) -> float:
        return QUANTILE_PRESETS[self.quantiles][1]


@dataclass
class BoostedEnsemble:
    objective: str  # "squared" or "quantile"
    tau: float | None
    base: float
    learning_rate: float
    trees: list[RegressionTree] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        out = np.full(len(X), self.base)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def loss(self, X, y) -> float:
        r = np.asarray(y, dtype=float) - self.predict(X)
        if self.objective == "squared":
            return float(np.mean(r ** 2))
        return float(np.mean(pinball_loss(r, self.tau)))

    def to_dict(self) -> dict:
        return {"objective": self.objective, "tau": self.tau, "base": self.base,
                "learning_rate": self.learning_rate, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedEnsemble":
        return cls(d["objective"], d["tau"], d["base"], d["learning_rate"],
                   [RegressionTree.from_dict(t) for t in d["trees"]])


def _boost(X, y, objective: str, tau: float | None, cfg: GBQConfig, rng: np.random.Generator) -> BoostedEnsemble:
    n, p = X.shape
    base = float(np.mean(y)) if objective == "squared" else float(np.quantile(y, tau))
    ens = BoostedEnsemble(objective, tau, base, cfg.learning_rate)
    pred = np.full(n, base)
    n_rows = max(1, int(round(cfg.subsample * n)))
    n_cols = max(1, int(round(cfg.colsample * p)))
    for _ in range(cfg.n_estimators):
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(p, size=n_cols, replace=False)) if n_cols < p else None
        resid = y[rows] - pred[rows]
        if objective == "squared":
            target = resid
        else:
            target = np.where(resid > 0, tau, tau - 1.0)
        tree = RegressionTree(max_depth=cfg.max_depth, min_samples_leaf=cfg.min_samples_leaf)
        tree.fit(X[rows], target, features=cols)
        if objective == "quantile":
            leaves = tree.apply(X[rows])
            for leaf in np.unique(leaves):
                tree.value[leaf] = float(np.quantile(resid[leaves == leaf], tau))
        ens.trees.append(tree)
        pred += cfg.learning_rate * tree.predict(X)
    return ens


@dataclass
class GBQModel:
    config: GBQConfig
    mean: BoostedEnsemble
    lower: BoostedEnsemble
    upper: BoostedEnsemble
    crossings: int = 0  # updated by every gbq_predict call

    def to_dict(self) -> dict:
        return {"kind": "gbq", "config": asdict(self.config), "mean": self.mean.to_dict(),
                "lower": self.lower.to_dict(), "upper": self.upper.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "GBQModel":
        return cls(GBQConfig(**d["config"]), BoostedEnsemble.from_dict(d["mean"]),
                   BoostedEnsemble.from_dict(d["lower"]), BoostedEnsemble.from_dict(d["upper"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GBQModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def gbq_fit(X, y, cfg: GBQConfig | None = None) -> GBQModel:
    cfg = cfg or GBQConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < max(2, cfg.min_samples_leaf):
        raise ValueError(f"need at least {max(2, cfg.min_samples_leaf)} rows, got {len(y)}")
    lo, hi = cfg.levels
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    return GBQModel(
        cfg,
        mean=_boost(X, y, "squared", None, cfg, np.random.default_rng(seeds[0])),
        lower=_boost(X, y, "quantile", lo, cfg, np.random.default_rng(seeds[1])),
        upper=_boost(X, y, "quantile", hi, cfg, np.random.default_rng(seeds[2])),
    )


def gbq_predict(model: GBQModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Mean prediction and the quantile-span sigma; crossings are counted on the model."""
    X = np.asarray(X, dtype=float)
    sigma, model.crossings = sigma_from_quantiles(model.lower.predict(X), model.upper.predict(X), model.config.z)
    return model.mean.predict(X), sigma
