"""Attentive neural process over embedding patches and sparse AGBD shots.

Data flow for one episode (context C, targets T)::

    patches --PatchEncoder--> feat (F)
    [coords, feat, y] over C --ContextEncoder--> r_c (d_context)
    deterministic: attention([coords_t, feat_t] -> r_C)      (d_model)
    latent:        p = heads(mean r_C), q = heads(mean r_{C u T})
    decoder([coords_t, feat_t, attn_t, z]) -> mu, log_var

Several episodes can be pushed through :meth:`ANP.forward_batch` at once; the
row-wise stages run on the stacked rows and only attention and pooling loop
over episodes. In training mode batch-norm statistics are therefore taken over
every patch in the batch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .geodata.episodes import Episode, PointSet
from .geodata.transforms import NormalizationSpec, backtransform_sigma, inverse_transform_agbd
from .nn import Tensor
from .nn import functional as F
from .nn.layers import BatchNorm2d, Conv3x3, LayerNorm, Linear, MultiheadCrossAttention

MODES = ("full", "deterministic-only", "latent-only")
LOG_SIGMA_Z_RANGE = (-10.0, 2.0)
LOG_VAR_RANGE = (-7.0, 7.0)
PATCH_SIZE = 3


@dataclass
class ANPConfig:
    embed_dim: int = 128
    d_model: int = 512
    d_latent: int = 256
    d_embed_feat: int = 1024
    d_conv: int = 256
    d_context: int = 256
    heads: int = 16
    n_layers: int = 3
    patch_size: int = PATCH_SIZE
    mode: str = "full"
    infer_mean_z: bool = True
    infer_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.patch_size != PATCH_SIZE:
            raise ValueError("only 3x3 patches are supported")
        if self.n_layers < 1 or self.infer_samples < 1:
            raise ValueError("n_layers and infer_samples must be >= 1")
        for name in ("d_model", "d_latent", "d_embed_feat", "d_conv", "d_context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ANPConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ANPConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentDistribution:
    mu: Tensor
    log_sigma: Tensor

    @property
    def mu_z(self) -> np.ndarray:
        return self.mu.data

    @property
    def log_sigma_z(self) -> np.ndarray:
        return self.log_sigma.data


@dataclass
class ContextRepresentation:
    points: Tensor  # (N, d_context)
    pooled: Tensor  # (d_context,)


@dataclass
class PredictiveDistribution:
    mu: Tensor  # (M,) normalized
    log_var: Tensor  # (M,) normalized, clamped
    spec: NormalizationSpec | None = None

    @property
    def mu_norm(self) -> np.ndarray:
        return self.mu.data

    @property
    def log_var_norm(self) -> np.ndarray:
        return self.log_var.data

    @property
    def sigma_norm(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data.astype(float))

    @property
    def mu_raw(self) -> np.ndarray:
        return inverse_transform_agbd(self.mu.data, self.spec)

    @property
    def sigma_raw(self) -> np.ndarray:
        return backtransform_sigma(self.sigma_norm, self.mu_raw, self.spec)

    def __len__(self) -> int:
        return self.mu.shape[0]


class PatchEncoder:
    def __init__(self, store: nn.ParamStore, cfg: ANPConfig, rng: np.random.Generator):
        d, c = cfg.embed_dim, cfg.d_conv
        self.proj = Linear(store, "patch.proj", d, c, rng)  # 1x1 convolution
        self.conv = [Conv3x3(store, f"patch.conv{i}", d if i == 0 else c, c, rng) for i in range(3)]
        self.bn = [BatchNorm2d(store, f"patch.bn{i}", c) for i in range(3)]
        self.mlp1 = Linear(store, "patch.mlp1", c, c, rng)
        self.mlp2 = Linear(store, "patch.mlp2", c, cfg.d_embed_feat, rng)

    def __call__(self, patches: Tensor, training: bool) -> Tensor:
        n, h, w, d = patches.shape
        if training and n < 2:
            raise nn.ShapeError(f"patch encoder needs at least 2 patches in training mode (batch-norm), got {n}")
        proj = self.proj(patches.reshape(n * h * w, d)).reshape(n, h, w, -1)
        b1 = nn.relu(self.bn[0](self.conv[0](patches), training))
        b2 = nn.relu(self.bn[1](self.conv[1](b1), training)) + proj
        b3 = nn.relu(self.bn[2](self.conv[2](b2), training)) + b2
        pooled = F.adaptive_avg_pool(b3)
        return self.mlp2(nn.relu(self.mlp1(pooled)))


class ResidualMLP:
    """Linear-LayerNorm-ReLU layers; every layer after the first adds its input."""

    def __init__(self, store: nn.ParamStore, name: str, d_in: int, d_hidden: int, n_layers: int,
                 rng: np.random.Generator):
        self.linears = [Linear(store, f"{name}.fc{i}", d_in if i == 0 else d_hidden, d_hidden, rng)
                        for i in range(n_layers)]
        self.norms = [LayerNorm(store, f"{name}.ln{i}", d_hidden) for i in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        h = None
        for i, (lin, ln) in enumerate(zip(self.linears, self.norms)):
            out = nn.relu(ln(lin(x if h is None else h)))
            h = out if h is None else out + h
        return h


class ANP:
    def __init__(self, cfg: ANPConfig, spec: NormalizationSpec | None = None):
        self.cfg = cfg
        self.spec = spec
        rng = np.random.default_rng(cfg.seed)
        self.params = nn.ParamStore()
        s = self.params
        feat = cfg.d_embed_feat
        self.patch_encoder = PatchEncoder(s, cfg, rng)
        self.context_mlp = ResidualMLP(s, "context", 2 + feat + 1, cfg.d_model, cfg.n_layers, rng)
        self.context_out = Linear(s, "context.out", cfg.d_model, cfg.d_context, rng)
        self.attention = MultiheadCrossAttention(s, "attention", 2 + feat, cfg.d_context, cfg.d_model,
                                                 cfg.heads, rng)
        self.latent_mu = Linear(s, "latent.mu", cfg.d_context, cfg.d_latent, rng)
        self.latent_log_sigma = Linear(s, "latent.log_sigma", cfg.d_context, cfg.d_latent, rng)
        self.decoder = ResidualMLP(s, "decoder", 2 + feat + cfg.d_model + cfg.d_latent, cfg.d_model,
                                   cfg.n_layers, rng)
        self.mean_head = Linear(s, "decoder.mean", cfg.d_model, 1, rng)
        self.log_var_head = Linear(s, "decoder.log_var", cfg.d_model, 1, rng)

    # -- components ------------------------------------------------------
    def _tensor(self, x) -> Tensor:
        return Tensor(np.asarray(x, dtype=nn.get_default_dtype()))

    def encode_patch(self, patches, training: bool = False) -> Tensor:
        return self.patch_encoder(patches if isinstance(patches, Tensor) else self._tensor(patches), training)

    def _encode_rows(self, coords: Tensor, feat: Tensor, y: Tensor) -> Tensor:
        x = nn.concatenate([coords, feat, y.reshape(-1, 1)], axis=1)
        return self.context_out(self.context_mlp(x))

    def encode_context(self, coords, features, agbd) -> ContextRepresentation:
        coords, features, agbd = (t if isinstance(t, Tensor) else self._tensor(t) for t in (coords, features, agbd))
        r = self._encode_rows(coords, features, agbd)
        return ContextRepresentation(points=r, pooled=F.mean_pool(r, axis=0))

    def latent_encode(self, pooled: Tensor) -> LatentDistribution:
        row = pooled.reshape(1, -1)
        mu = self.latent_mu(row).reshape(-1)
        raw = self.latent_log_sigma(row).reshape(-1)
        return LatentDistribution(mu=mu, log_sigma=nn.clamp(raw, *LOG_SIGMA_Z_RANGE))

    def deterministic_path(self, context: ContextRepresentation, target_queries: Tensor) -> Tensor:
        return self.attention(target_queries, context.points)

    # -- forward ---------------------------------------------------------
    def forward(self, episode: Episode, mode: str = "train", rng: np.random.Generator | None = None):
        """Returns ``(PredictiveDistribution, q, p)`` for one episode."""
        return self.forward_batch([episode], mode, rng)[0]

    def forward_batch(self, episodes: Sequence[Episode], mode: str = "train",
                      rng: np.random.Generator | None = None):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        training = mode == "train"
        if training and rng is None:
            raise ValueError("train mode needs an rng for the latent sample")
        cfg = self.cfg
        for ep in episodes:
            if len(ep.context) == 0:
                raise nn.ShapeError(f"episode {ep.tile_id}: empty context set")

        # stack patches as [C_0, T_0, C_1, T_1, ...]
        sizes = [(len(ep.context), len(ep.targets)) for ep in episodes]
        patches = np.concatenate([a for ep in episodes for a in (ep.context.patches, ep.targets.patches)])
        feats = self.encode_patch(patches, training)
        offsets = np.cumsum([0] + [n for pair in sizes for n in pair])

        def rows(t: Tensor, k: int, which: int) -> Tensor:
            i = 2 * k + which
            return t[int(offsets[i]):int(offsets[i + 1])]

        # context encoder on C, plus T in training for the posterior; infer mode never reads target agbd
        enc_coords, enc_feat, enc_y = [], [], []
        for k, ep in enumerate(episodes):
            sets = (ep.context, ep.targets) if training else (ep.context,)
            for which, ps in enumerate(sets):
                enc_coords.append(ps.coords)
                enc_feat.append(rows(feats, k, which))
                enc_y.append(ps.agbd)
        r_all = self._encode_rows(self._tensor(np.concatenate(enc_coords)),
                                  nn.concatenate(enc_feat, axis=0),
                                  self._tensor(np.concatenate(enc_y)))

        dtype = nn.get_default_dtype()
        query_parts, attn_parts, z_parts, latents = [], [], [], []
        pos = 0
        for k, ep in enumerate(episodes):
            n_c, n_t = sizes[k]
            r_c = r_all[pos:pos + n_c]
            n_enc = n_c + n_t if training else n_c
            r_ct = r_all[pos:pos + n_enc]
            pos += n_enc
            query = nn.concatenate([self._tensor(ep.targets.coords), rows(feats, k, 1)], axis=1)
            query_parts.append(query)
            ctx = ContextRepresentation(points=r_c, pooled=F.mean_pool(r_c, axis=0))

            if cfg.mode == "latent-only":
                attn = Tensor(np.zeros((n_t, cfg.d_model), dtype=dtype))
            else:
                attn = self.deterministic_path(ctx, query)
            attn_parts.append(attn)

            if cfg.mode == "deterministic-only":
                zero = Tensor(np.zeros(cfg.d_latent, dtype=dtype))
                p = q = LatentDistribution(mu=zero, log_sigma=zero)
                z = [zero]
            else:
                p = self.latent_encode(ctx.pooled)
                q = self.latent_encode(F.mean_pool(r_ct, axis=0)) if training else p
                if training:
                    z = [F.reparameterize(q.mu, q.log_sigma, rng.standard_normal(cfg.d_latent))]
                elif cfg.infer_mean_z:
                    z = [p.mu]
                else:
                    if rng is None:
                        raise ValueError("sampling z at inference needs an rng")
                    z = [F.reparameterize(p.mu, p.log_sigma, rng.standard_normal(cfg.d_latent))
                         for _ in range(cfg.infer_samples)]
            z_parts.append([nn.broadcast_rows(zi, n_t) for zi in z])
            latents.append((q, p))

        n_samples = len(z_parts[0])
        preds_per_sample = []
        for s in range(n_samples):
            dec_in = nn.concatenate([
                nn.concatenate(query_parts, axis=0),
                nn.concatenate(attn_parts, axis=0),
                nn.concatenate([zp[s] for zp in z_parts], axis=0),
            ], axis=1)
            h = self.decoder(dec_in)
            mu = self.mean_head(h).reshape(-1)
            log_var = nn.clamp(self.log_var_head(h).reshape(-1), *LOG_VAR_RANGE)
            preds_per_sample.append((mu, log_var))

        out = []
        t_off = np.cumsum([0] + [n_t for _, n_t in sizes])
        for k in range(len(episodes)):
            lo, hi = int(t_off[k]), int(t_off[k + 1])
            if n_samples == 1:
                mu, log_var = preds_per_sample[0]
                pred = PredictiveDistribution(mu=mu[lo:hi], log_var=log_var[lo:hi], spec=self.spec)
            else:
                pred = self._mixture([(m.data[lo:hi], lv.data[lo:hi]) for m, lv in preds_per_sample])
            q, p = latents[k]
            out.append((pred, q, p))
        return out

    def _mixture(self, parts) -> PredictiveDistribution:
        """Moment-matched Gaussian for an equal-weight mixture of z samples."""
        mus = np.stack([m.astype(float) for m, _ in parts])
        var = np.stack([np.exp(lv.astype(float)) for _, lv in parts])
        mu = mus.mean(axis=0)
        total = (var + mus ** 2).mean(axis=0) - mu ** 2
        log_var = np.clip(np.log(np.maximum(total, 1e-300)), *LOG_VAR_RANGE)
        dtype = nn.get_default_dtype()
        return PredictiveDistribution(mu=Tensor(mu.astype(dtype)), log_var=Tensor(log_var.astype(dtype)),
                                      spec=self.spec)

    def predict(self, context: PointSet, queries: PointSet, rng: np.random.Generator | None = None,
                chunk: int = 4096) -> PredictiveDistribution:
        """Infer-mode prediction at arbitrary query points (target values never read)."""
        mus, lvs = [], []
        with nn.no_grad():
            for lo in range(0, max(len(queries), 1), chunk):
                sl = slice(lo, lo + chunk)
                q = PointSet(coords=queries.coords[sl], patches=queries.patches[sl],
                             agbd=np.full(len(queries.index[sl]), np.nan, dtype=np.float32),
                             index=queries.index[sl])
                pred, _, _ = self.forward(Episode(context=context, targets=q, tile_id="query"), "infer", rng)
                mus.append(pred.mu_norm)
                lvs.append(pred.log_var_norm)
        return PredictiveDistribution(mu=Tensor(np.concatenate(mus)), log_var=Tensor(np.concatenate(lvs)),
                                      spec=self.spec)

    # -- persistence -----------------------------------------------------
    def metadata(self) -> dict:
        return {
            "anp_config": self.cfg.to_dict(),
            "normalization": None if self.spec is None else self.spec.to_dict(),
        }

    def save(self, path) -> None:
        """Parameter container at ``path`` plus a ``<path>.json`` sidecar."""
        path = Path(path)
        meta = self.metadata()
        nn.save_params(path, self.params, meta)
        with open(sidecar_path(path), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ANP":
        path = Path(path)
        side = sidecar_path(path)
        if side.exists():
            with open(side) as fh:
                meta = json.load(fh)
        else:
            _, meta = nn.read_params(path)
        spec = meta.get("normalization")
        model = cls(ANPConfig.from_dict(meta["anp_config"]),
                    None if spec is None else NormalizationSpec.from_dict(spec))
        nn.load_params(path, model.params)
        return model


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
