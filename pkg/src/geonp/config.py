"""Run configuration shared by every CLI subcommand.

A run config is one JSON object. Every section is optional and falls back to
the reference defaults; unknown keys anywhere are an error. The top-level
``seed`` is the only seed: it drives the synthetic generator, the split, model
initialization and every training stream, so sections may not carry their own.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .anp import ANPConfig
from .baselines import GBQConfig, MLPConfig
from .geodata import SyntheticConfig
from .geodata.tiles import TILE_PITCH
from .geodata.transforms import DEFAULT_COORD_NOISE_STD, DEFAULT_SCALE
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class NormalizationSection:
    scale: float = DEFAULT_SCALE
    coord_noise_std: float = DEFAULT_COORD_NOISE_STD

    def __post_init__(self):
        if not self.scale > 0 or self.coord_noise_std < 0:
            raise ValueError("normalization.scale must be positive and coord_noise_std non-negative")


@dataclass
class SplitSection:
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    buffer: float = TILE_PITCH

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError(f"split fractions must be three non-negative values summing to 1, got {self.fractions}")
        if self.buffer < 0:
            raise ValueError("split buffer must be non-negative")


@dataclass
class RFSection:
    n_estimators: int = 100
    max_depth: int | None = 6
    min_samples_leaf: int = 1


@dataclass
class EvalSection:
    n_bins: int = 10
    idw_power: float = 2.0

    def __post_init__(self):
        if self.n_bins < 1 or self.idw_power <= 0:
            raise ValueError("eval.n_bins must be >= 1 and eval.idw_power positive")


@dataclass
class FinetuneSection:
    n_tiles: int = 10
    epochs: int = 5

    def __post_init__(self):
        if self.n_tiles < 1 or self.epochs < 0:
            raise ValueError("finetune.n_tiles must be >= 1 and finetune.epochs >= 0")


def _section(cls, raw, name: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    unknown = sorted(set(raw) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    raw = dict(raw)
    for key in ("fractions", "hidden", "tracks_per_tile"):
        if isinstance(raw.get(key), list):
            raw[key] = tuple(raw[key])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    anp: dict = field(default_factory=dict)  # ANPConfig overrides; embed_dim defaults to the data's
    train: TrainConfig = field(default_factory=TrainConfig)
    normalization: NormalizationSection = field(default_factory=NormalizationSection)
    split: SplitSection = field(default_factory=SplitSection)
    rf: RFSection = field(default_factory=RFSection)
    gbq: GBQConfig = field(default_factory=GBQConfig)
    mlp: MLPConfig = field(default_factory=MLPConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)

    SECTIONS = {
        "synthetic": (SyntheticConfig, True),
        "train": (TrainConfig, True),
        "normalization": (NormalizationSection, False),
        "split": (SplitSection, False),
        "rf": (RFSection, False),
        "gbq": (GBQConfig, True),
        "mlp": (MLPConfig, True),
        "eval": (EvalSection, False),
        "finetune": (FinetuneSection, False),
    }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(d) - {"seed", "out", "anp", *cls.SECTIONS})
        if unknown:
            raise ConfigError(f"unknown top-level keys: {unknown}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        kwargs = {"seed": seed, "out": str(d.get("out", "runs"))}
        for name, (section_cls, seeded) in cls.SECTIONS.items():
            raw = d.get(name)
            if seeded:
                if isinstance(raw, dict) and "seed" in raw:
                    raise ConfigError(f"unknown keys in {name!r}: ['seed'] (use the top-level seed)")
                raw = {**(raw or {}), "seed": seed} if isinstance(raw, dict) or raw is None else raw
            kwargs[name] = _section(section_cls, raw, name)
        anp = d.get("anp") or {}
        if not isinstance(anp, dict):
            raise ConfigError("section 'anp' must be a JSON object")
        if "seed" in anp:
            raise ConfigError("unknown keys in 'anp': ['seed'] (use the top-level seed)")
        bad = sorted(set(anp) - {f.name for f in fields(ANPConfig)})
        if bad:
            raise ConfigError(f"unknown keys in 'anp': {bad}")
        kwargs["anp"] = dict(anp)
        cfg = cls(**kwargs)
        cfg.anp_config(embed_dim=anp.get("embed_dim", 1))  # validate the overrides early
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        return RunConfig.from_dict(d)

    def anp_config(self, embed_dim: int) -> ANPConfig:
        """ANP architecture for data with ``embed_dim`` channels; an explicit mismatch is an error."""
        given = self.anp.get("embed_dim")
        if given is not None and given != embed_dim:
            raise ConfigError(f"anp.embed_dim={given} but the data has D={embed_dim}")
        try:
            return ANPConfig(**{**self.anp, "embed_dim": embed_dim, "seed": self.seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"anp: {exc}") from None

    def to_dict(self) -> dict:
        def strip(d):
            d = dict(d)
            d.pop("seed", None)
            return d

        out = {"seed": self.seed, "out": self.out, "anp": dict(self.anp)}
        out["synthetic"] = strip(self.synthetic.to_dict())
        out["train"] = strip(self.train.to_dict())
        out["gbq"] = strip(asdict(self.gbq))
        out["mlp"] = strip(self.mlp.to_dict())
        for name in ("normalization", "split", "rf", "eval", "finetune"):
            sec = getattr(self, name)
            out[name] = {f.name: getattr(sec, f.name) for f in fields(sec)}
        out["split"]["fractions"] = list(self.split.fractions)
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
