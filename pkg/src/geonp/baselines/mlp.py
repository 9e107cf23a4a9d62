"""MLP regressor with dropout kept active at prediction time (MC dropout)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import nn
from ..nn.layers import Linear

logger = logging.getLogger(__name__)


@dataclass
class MLPConfig:
    hidden: tuple[int, ...] = (512, 256, 128)
    dropout: float = 0.2
    lr: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 15
    passes: int = 100
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.passes < 2:
            raise ValueError("passes must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class DropoutMLPModel:
    config: MLPConfig
    n_inputs: int
    x_mean: np.ndarray = field(default=None)
    x_std: np.ndarray = field(default=None)

    def __post_init__(self):
        rng = np.random.default_rng(self.config.seed)
        self.params = nn.ParamStore()
        dims = (self.n_inputs,) + self.config.hidden
        self.layers = [Linear(self.params, f"fc{i}", a, b, rng) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.head = Linear(self.params, "head", dims[-1], 1, rng)
        if self.x_mean is None:
            self.x_mean = np.zeros(self.n_inputs)
            self.x_std = np.ones(self.n_inputs)

    def _scale(self, X) -> np.ndarray:
        return ((np.asarray(X, dtype=float) - self.x_mean) / self.x_std).astype(nn.get_default_dtype())

    def forward(self, X, rng: np.random.Generator | None, training: bool) -> nn.Tensor:
        """Dropout follows every hidden layer whenever ``training`` is true (also for MC passes)."""
        h = nn.Tensor(self._scale(X))
        for layer in self.layers:
            h = nn.dropout(nn.relu(layer(h)), self.config.dropout, rng, training)
        return self.head(h).reshape(-1)

    def save(self, path, extra: dict | None = None) -> None:
        """``extra`` entries are stored alongside the model metadata (e.g. the normalization)."""
        meta = {**(extra or {}), "kind": "mlp", "config": self.config.to_dict(), "n_inputs": self.n_inputs,
                "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist()}
        nn.save_params(path, self.params, meta)
        with open(Path(str(path) + ".json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DropoutMLPModel":
        _, meta = nn.read_params(path)
        model = cls(MLPConfig(**meta["config"]), meta["n_inputs"], np.array(meta["x_mean"]), np.array(meta["x_std"]))
        nn.load_params(path, model.params)
        return model


def _mse(model: DropoutMLPModel, X, y) -> float:
    with nn.no_grad():
        pred = model.forward(X, None, training=False).data
    return float(np.mean((pred.astype(float) - y) ** 2))


def mlp_fit(X, y, X_val=None, y_val=None, cfg: MLPConfig | None = None) -> tuple[DropoutMLPModel, dict]:
    """Mini-batch AdamW on squared error with early stopping on validation MSE.

    Inputs are standardized with training statistics. Returns the model with
    its best-validation parameters and a small history dict.
    """
    cfg = cfg or MLPConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    std = X.std(axis=0)
    model = DropoutMLPModel(cfg, X.shape[1], X.mean(axis=0), np.where(std > 0, std, 1.0))
    if X_val is None:
        X_val, y_val = X, y
    y_val = np.asarray(y_val, dtype=float)
    opt = nn.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    best, best_state, since = math.inf, model.params.state_dict(), 0
    history = {"train_mse": [], "val_mse": [], "best_epoch": -1}
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(y))
        losses = []
        for lo in range(0, len(y), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            pred = model.forward(X[idx], rng, training=True)
            loss = nn.square(pred - y[idx].astype(pred.dtype)).mean()
            nn.backward(loss)
            nn.adamw_step(model.params, opt)
            losses.append(loss.item())
        val = _mse(model, X_val, y_val)
        history["train_mse"].append(float(np.mean(losses)))
        history["val_mse"].append(val)
        if val < best - 1e-8:
            best, best_state, since = val, model.params.state_dict(), 0
            history["best_epoch"] = epoch
        else:
            since += 1
            if since >= cfg.patience:
                break
    model.params.load_state_dict(best_state)
    logger.info("mlp: best epoch %d, val mse %.5f", history["best_epoch"], best)
    return model, history


def mc_dropout_predict(model: DropoutMLPModel, X, passes: int | None = None,
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample std (n-1) over ``passes`` forward passes with fresh dropout masks."""
    passes = model.config.passes if passes is None else passes
    if passes < 2:
        raise ValueError(f"need at least 2 passes, got {passes}")
    rng = rng if rng is not None else np.random.default_rng(model.config.seed)
    with nn.no_grad():
        draws = np.stack([model.forward(X, rng, training=True).data.astype(float) for _ in range(passes)])
    return draws.mean(axis=0), draws.std(axis=0, ddof=1)
