"""Episodic ELBO training, plateau scheduling, early stopping and fine-tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .anp import ANP, LatentDistribution, PredictiveDistribution
from .geodata.episodes import Episode, episode_rng, sample_episode
from .geodata.tiles import MIN_SHOTS, Tile

logger = logging.getLogger(__name__)

VAL_STREAM = 7919  # offsets the validation episode seed from the training draws


class TrainingDivergence(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    max_epochs: int = 100
    beta_warmup: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 15
    grad_clip: float = 1.0
    min_improvement: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "grad_clip", "plateau_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.beta_warmup < 0 or self.min_improvement < 0:
            raise ValueError("weight_decay, beta_warmup and min_improvement must be non-negative")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.plateau_factor >= 1:
            raise ValueError("plateau_factor must be < 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_elbo: list[float] = field(default_factory=list)
    train_nll: list[float] = field(default_factory=list)
    train_kl: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_nll: float = math.inf
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def beta_schedule(epoch: int, warmup: int = 10) -> float:
    """Linear KL warm-up: ``min(1, epoch / warmup)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if warmup <= 0:
        return 1.0
    return min(1.0, epoch / warmup)


def elbo_loss(batch: Sequence[tuple[PredictiveDistribution, np.ndarray, LatentDistribution, LatentDistribution]],
              beta: float):
    """Tile-averaged negative ELBO.

    Each tile's NLL is averaged over its own targets before averaging across
    tiles, so sparse tiles weigh as much as dense ones. Returns
    ``(loss, mean_nll, mean_kl)`` with the last two as floats.
    """
    if not batch:
        raise ValueError("elbo_loss needs at least one tile")
    nll_terms, kl_terms = [], []
    for pred, y, q, p in batch:
        nll_terms.append(nn.gaussian_nll(y, pred.mu, pred.log_var).mean())
        kl_terms.append(nn.kl_diag_gaussians(q.mu, q.log_sigma, p.mu, p.log_sigma))
    nll = nn.concatenate([t.reshape(1) for t in nll_terms], axis=0).mean()
    kl = nn.concatenate([t.reshape(1) for t in kl_terms], axis=0).mean()
    loss = nll + kl * float(beta)
    return loss, nll.item(), kl.item()


def _usable(tiles: Sequence[Tile]) -> list[Tile]:
    return [t for t in tiles if t.usable(MIN_SHOTS)]


def fixed_episodes(model: ANP, tiles: Sequence[Tile], seed: int) -> list[Episode]:
    """One eval-mode episode per tile, fixed by ``seed``."""
    return [sample_episode(t, model.spec, episode_rng(seed, t, VAL_STREAM), train_mode=False) for t in tiles]


def evaluate_nll(model: ANP, episodes: Sequence[Episode], batch_size: int = 16) -> float:
    """Tile-averaged infer-mode NLL on fixed episodes."""
    per_tile = []
    with nn.no_grad():
        for lo in range(0, len(episodes), batch_size):
            chunk = episodes[lo:lo + batch_size]
            outs = model.forward_batch([e.masked() for e in chunk], "infer")
            for ep, (pred, _, _) in zip(chunk, outs):
                nll = nn.gaussian_nll(ep.targets.agbd, pred.mu, pred.log_var)
                per_tile.append(float(np.mean(nll.data, dtype=np.float64)))
    return float(np.mean(per_tile))


def _train_step(model: ANP, episodes: list[Episode], beta: float, opt: nn.OptimizerState,
                cfg: TrainConfig, rng: np.random.Generator) -> tuple[float, float, float]:
    outs = model.forward_batch(episodes, "train", rng)
    batch = [(pred, ep.targets.agbd, q, p) for ep, (pred, q, p) in zip(episodes, outs)]
    loss, nll, kl = elbo_loss(batch, beta)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite loss {value}")
    nn.backward(loss)
    grads = [p._grad for _, p in model.params.trainable_items() if p._grad is not None]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDivergence("non-finite gradient")
    nn.clip_global_norm(grads, cfg.grad_clip)
    nn.adamw_step(model.params, opt)
    return value, nll, kl


def _run_epoch(model: ANP, tiles: Sequence[Tile], epoch: int, beta: float, opt: nn.OptimizerState,
               cfg: TrainConfig, seed: int) -> tuple[float, float, float]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(len(tiles))
    losses, nlls, kls = [], [], []
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo:lo + cfg.batch_size]
        episodes = [sample_episode(tiles[i], model.spec, episode_rng(seed, tiles[i], epoch), train_mode=True)
                    for i in idx]
        value, nll, kl = _train_step(model, episodes, beta, opt, cfg, rng)
        losses.append(value)
        nlls.append(nll)
        kls.append(kl)
    return float(np.mean(losses)), float(np.mean(nlls)), float(np.mean(kls))


def train(model: ANP, train_tiles: Sequence[Tile], val_tiles: Sequence[Tile], cfg: TrainConfig | None = None,
          checkpoint_path=None, history_path=None) -> tuple[ANP, TrainHistory]:
    """Train in place; the best-validation parameters are restored before returning."""
    cfg = cfg or TrainConfig()
    train_tiles, val_tiles = _usable(train_tiles), _usable(val_tiles)
    if not train_tiles or not val_tiles:
        raise ValueError(f"need usable train and val tiles, got {len(train_tiles)} and {len(val_tiles)}")
    if model.spec is None:
        raise ValueError("model has no NormalizationSpec")

    val_episodes = fixed_episodes(model, val_tiles, cfg.seed)
    opt = nn.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = TrainHistory()
    best_state = model.params.state_dict()
    since_best = since_lr_change = 0

    for epoch in range(cfg.max_epochs):
        beta = beta_schedule(epoch, cfg.beta_warmup)
        elbo, nll, kl = _run_epoch(model, train_tiles, epoch, beta, opt, cfg, cfg.seed)
        val = evaluate_nll(model, val_episodes, cfg.batch_size)
        if not math.isfinite(val):
            raise TrainingDivergence(f"non-finite validation NLL at epoch {epoch}")
        hist.train_elbo.append(elbo)
        hist.train_nll.append(nll)
        hist.train_kl.append(kl)
        hist.val_nll.append(val)
        hist.beta.append(beta)
        hist.lr.append(opt.lr)
        logger.info("epoch %d  elbo %.4f  nll %.4f  kl %.4f  val %.4f  beta %.2f  lr %.2e",
                    epoch, elbo, nll, kl, val, beta, opt.lr)

        if val < hist.best_val_nll - cfg.min_improvement:
            hist.best_val_nll = val
            hist.best_epoch = epoch
            best_state = model.params.state_dict()
            since_best = since_lr_change = 0
            if checkpoint_path is not None:
                model.save(checkpoint_path)
        else:
            since_best += 1
            since_lr_change += 1
            if since_lr_change >= cfg.plateau_patience:
                opt.lr *= cfg.plateau_factor
                since_lr_change = 0
                logger.info("plateau: lr -> %.2e", opt.lr)
            if since_best >= cfg.early_stop_patience:
                hist.stopped_early = True
                logger.info("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
                break

    model.params.load_state_dict(best_state)
    if history_path is not None:
        hist.save(history_path)
    return model, hist


def fit_fixed_episodes(model: ANP, episodes: Sequence[Episode], steps: int, cfg: TrainConfig | None = None,
                       beta: float = 1.0) -> list[float]:
    """Take ``steps`` optimizer steps on the same episodes (one batch); returns the loss per step.

    Each step reuses the same latent noise so the losses are comparable.
    """
    cfg = cfg or TrainConfig()
    opt = nn.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    for _ in range(steps):
        value, _, _ = _train_step(model, list(episodes), beta, opt, cfg, np.random.default_rng(cfg.seed))
        losses.append(value)
    return losses


def select_finetune_tiles(tiles: Sequence[Tile], n_tiles: int, seed: int) -> list[Tile]:
    usable = _usable(tiles)
    if len(usable) < n_tiles:
        raise ValueError(f"fine-tuning needs {n_tiles} usable tiles, only {len(usable)} available")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    idx = np.sort(rng.choice(len(usable), size=n_tiles, replace=False))
    return [usable[i] for i in idx]


def finetune(model: ANP, target_tiles: Sequence[Tile], n_tiles: int = 10, epochs: int = 5,
             cfg: TrainConfig | None = None) -> tuple[ANP, TrainHistory]:
    """Continue training on ``n_tiles`` seeded tiles for exactly ``epochs`` epochs.

    A fresh AdamW state is used, beta is fixed at 1 and there is no early
    stopping.
    """
    cfg = cfg or TrainConfig()
    tiles = select_finetune_tiles(target_tiles, n_tiles, cfg.seed)
    opt = nn.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = TrainHistory()
    for epoch in range(epochs):
        elbo, nll, kl = _run_epoch(model, tiles, epoch, 1.0, opt, cfg, cfg.seed + 1)
        hist.train_elbo.append(elbo)
        hist.train_nll.append(nll)
        hist.train_kl.append(kl)
        hist.beta.append(1.0)
        hist.lr.append(opt.lr)
        logger.info("finetune epoch %d  elbo %.4f", epoch, elbo)
    return model, hist
