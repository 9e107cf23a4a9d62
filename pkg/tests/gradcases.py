"""Seeded finite-difference cases for every differentiable primitive.

Each builder returns ``(loss_fn, tensors)`` in 64-bit precision. Inputs to
kinked primitives (relu, clamp) are kept away from the kinks so central
differences at eps=1e-3 stay on one side.
"""

import numpy as np

from geonp import nn
from geonp.geodata.episodes import Episode, PointSet
from geonp.nn.tensor import Tensor

EPS = 1e-3
TOL = 1e-4
N_SEEDS = 20


def _p(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, dtype=np.float64)


def _away_from(rng, shape, points, margin=0.05):
    x = rng.normal(size=shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.sign(x[near] - p + 1e-12) * margin * 2
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _weighted(out, rng):
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return (out * w).sum()


def _dims(rng, lo=1, hi=5, k=2):
    return [int(d) for d in rng.integers(lo, hi + 1, size=k)]


def case_linear(rng):
    n, d_in, d_out = _dims(rng, k=3)
    x, w, b = _p(rng, n, d_in), _p(rng, d_in, d_out), _p(rng, d_out)
    return lambda: _weighted(nn.linear(x, w, b), np.random.default_rng(0)), {"x": x, "w": w, "b": b}


def case_relu(rng):
    x = _away_from(rng, _dims(rng), [0.0])
    return lambda: _weighted(nn.relu(x), np.random.default_rng(0)), {"x": x}


def case_layer_norm(rng):
    n, d = _dims(rng, 2, 6)
    d = max(d, 3)
    # rows with near-zero spread make the normalization nearly a step function,
    # where eps=1e-3 truncation error dominates; keep row std in [0.5, 2]
    raw = rng.normal(size=(n, d))
    raw = (raw - raw.mean(axis=1, keepdims=True)) / raw.std(axis=1, keepdims=True)
    raw = raw * rng.uniform(0.5, 2.0, size=(n, 1)) + rng.normal(size=(n, 1))
    x = Tensor(raw, requires_grad=True, dtype=np.float64)
    g, b = _p(rng, d), _p(rng, d)
    return lambda: _weighted(nn.layer_norm(x, g, b), np.random.default_rng(0)), {"x": x, "gain": g, "bias": b}


def _bn_case(rng, training):
    n = int(rng.integers(2, 5))
    c = int(rng.integers(1, 4))
    x, g, b = _p(rng, n, 3, 3, c), _p(rng, c), _p(rng, c)
    rm = Tensor(rng.normal(size=c), dtype=np.float64)
    rv = Tensor(rng.uniform(0.5, 2.0, size=c), dtype=np.float64)

    def loss():
        return _weighted(nn.batch_norm2d(x, g, b, rm, rv, training=training), np.random.default_rng(0))

    return loss, {"x": x, "gain": g, "bias": b}


def case_batch_norm_train(rng):
    return _bn_case(rng, True)


def case_batch_norm_eval(rng):
    return _bn_case(rng, False)


def case_conv3x3(rng):
    n = int(rng.integers(1, 3))
    c_in, c_out = _dims(rng, 1, 3)
    x, w, b = _p(rng, n, 3, 3, c_in), _p(rng, 3, 3, c_in, c_out), _p(rng, c_out)
    return lambda: _weighted(nn.conv2d_3x3(x, w, b), np.random.default_rng(0)), {"x": x, "w": w, "b": b}


def case_adaptive_pool(rng):
    x = _p(rng, 2, 3, 3, int(rng.integers(1, 4)))
    return lambda: _weighted(nn.adaptive_avg_pool(x), np.random.default_rng(0)), {"x": x}


def case_softmax(rng):
    x = _p(rng, *_dims(rng, 1, 5))
    return lambda: _weighted(nn.softmax(x, axis=-1), np.random.default_rng(0)), {"x": x}


def case_mean_pool(rng):
    x = _p(rng, *_dims(rng, 1, 6))
    return lambda: _weighted(nn.mean_pool(x, axis=0), np.random.default_rng(0)), {"x": x}


def case_concatenate(rng):
    n = int(rng.integers(1, 4))
    a, b = _p(rng, n, int(rng.integers(1, 4))), _p(rng, n, int(rng.integers(1, 4)))
    return lambda: _weighted(nn.concatenate([a, b], axis=-1), np.random.default_rng(0)), {"a": a, "b": b}


def case_add(rng):
    shape = _dims(rng)
    a, b = _p(rng, *shape), _p(rng, *shape)
    return lambda: _weighted(nn.add(a, b), np.random.default_rng(0)), {"a": a, "b": b}


def case_multiply(rng):
    shape = _dims(rng)
    a, b = _p(rng, *shape), _p(rng, *shape)
    return lambda: _weighted(nn.mul(a, b), np.random.default_rng(0)), {"a": a, "b": b}


def case_clamp(rng):
    x = _away_from(rng, _dims(rng), [-1.0, 1.0])
    return lambda: _weighted(nn.clamp(x, -1.0, 1.0), np.random.default_rng(0)), {"x": x}


def case_exp_matmul(rng):
    m, k, n = _dims(rng, k=3)
    a, b = _p(rng, m, k, scale=0.5), _p(rng, k, n, scale=0.5)
    return lambda: _weighted(nn.exp(nn.matmul(a, b)), np.random.default_rng(0)), {"a": a, "b": b}


def case_reshape_transpose_index(rng):
    x = _p(rng, 4, 3)
    idx = np.array([2, 0, 2])

    def loss():
        y = nn.transpose(nn.reshape(x, (2, 6)), (1, 0))
        return _weighted(y, np.random.default_rng(0)) + _weighted(x[idx], np.random.default_rng(1))

    return loss, {"x": x}


def case_broadcast_rows(rng):
    z = _p(rng, int(rng.integers(1, 5)))
    return lambda: _weighted(nn.broadcast_rows(z, 3), np.random.default_rng(0)), {"z": z}


def case_attention(rng):
    heads = int(rng.choice([1, 2]))
    d_model = heads * int(rng.integers(1, 3))
    m, n = _dims(rng, 1, 4)
    dq, dk = _dims(rng, 1, 4)
    q, c = _p(rng, m, dq), _p(rng, n, dk)
    w = {}
    for proj, d_in in (("q", dq), ("k", dk), ("v", dk), ("o", d_model)):
        w[f"{proj}_w"] = _p(rng, d_in, d_model, scale=0.7)
        w[f"{proj}_b"] = _p(rng, d_model, scale=0.1)

    def loss():
        return _weighted(nn.multihead_cross_attention(q, c, c, heads, w), np.random.default_rng(0))

    return loss, {"queries": q, "context": c, **w}


def case_gaussian_nll(rng):
    n = int(rng.integers(1, 6))
    y = Tensor(rng.normal(size=n), dtype=np.float64)
    mu, lv = _p(rng, n), _p(rng, n)
    return lambda: _weighted(nn.gaussian_nll(y, mu, lv), np.random.default_rng(0)), {"mu": mu, "log_var": lv}


def case_kl(rng):
    d = int(rng.integers(1, 6))
    t = {k: _p(rng, d, scale=0.7) for k in ("q_mu", "q_ls", "p_mu", "p_ls")}
    return lambda: nn.kl_diag_gaussians(t["q_mu"], t["q_ls"], t["p_mu"], t["p_ls"]), t


def case_reparameterize(rng):
    d = int(rng.integers(1, 6))
    mu, ls = _p(rng, d), _p(rng, d, scale=0.5)
    noise = rng.normal(size=d)
    return lambda: _weighted(nn.reparameterize(mu, ls, noise), np.random.default_rng(0)), {"mu": mu, "ls": ls}


def case_dropout(rng):
    x = _p(rng, *_dims(rng))

    def loss():
        return _weighted(nn.dropout(x, 0.3, np.random.default_rng(7)), np.random.default_rng(0))

    return loss, {"x": x}


PRIMITIVE_CASES = {
    "linear": case_linear,
    "relu": case_relu,
    "layer-norm": case_layer_norm,
    "batch-norm-2d[train]": case_batch_norm_train,
    "batch-norm-2d[eval]": case_batch_norm_eval,
    "conv2d-3x3": case_conv3x3,
    "adaptive-average-pool": case_adaptive_pool,
    "softmax": case_softmax,
    "mean-pool": case_mean_pool,
    "concatenate": case_concatenate,
    "add": case_add,
    "multiply": case_multiply,
    "clamp": case_clamp,
    "exp+matmul": case_exp_matmul,
    "reshape/transpose/index": case_reshape_transpose_index,
    "broadcast-rows": case_broadcast_rows,
    "multihead-cross-attention": case_attention,
    "gaussian-nll": case_gaussian_nll,
    "kl-diag-gaussians": case_kl,
    "reparameterize": case_reparameterize,
    "dropout": case_dropout,
}


def max_error(builder, seed: int) -> float:
    with nn.default_dtype(np.float64):
        loss_fn, tensors = builder(np.random.default_rng(seed))
        errors = nn.check_gradients(loss_fn, tensors, eps=EPS)
    return max(errors.values())


# full model: tiny ANP, two episodes, ELBO with a fixed latent draw
TINY_ANP = dict(embed_dim=4, d_model=32, d_latent=16, d_embed_feat=16, d_conv=8, d_context=16, heads=4)
ELBO_SEEDS = 5
ELBO_ENTRIES = 4  # sampled entries per parameter tensor


def tiny_episode(rng, n_ctx=6, n_tgt=4, d=4, tile_id="0_0"):
    def points(n):
        return PointSet(coords=rng.uniform(0, 1, (n, 2)), patches=rng.normal(size=(n, 3, 3, d)),
                        agbd=rng.uniform(0.2, 0.9, n), index=np.arange(n))
    return Episode(context=points(n_ctx), targets=points(n_tgt), tile_id=tile_id)


def case_anp_elbo(rng, mode="full"):
    from geonp.anp import ANP, ANPConfig
    from geonp.trainer import elbo_loss

    model = ANP(ANPConfig(**TINY_ANP, mode=mode, seed=int(rng.integers(1 << 31))))
    episodes = [tiny_episode(rng, tile_id=f"0_{k}") for k in range(2)]

    def loss():
        outs = model.forward_batch(episodes, "train", np.random.default_rng(11))
        return elbo_loss([(pred, ep.targets.agbd, q, p) for ep, (pred, q, p) in zip(episodes, outs)], 0.5)[0]

    return loss, dict(model.params.trainable_items())


def elbo_max_error(seed: int, mode: str = "full") -> tuple[float, int]:
    """Worst per-tensor error and the number of tensors checked."""
    with nn.default_dtype(np.float64):
        loss_fn, tensors = case_anp_elbo(np.random.default_rng(seed), mode)
        errors = nn.check_gradients(loss_fn, tensors, eps=EPS, max_entries=ELBO_ENTRIES, skip_kinks=True,
                                    rng=np.random.default_rng(seed))
    return max(errors.values()), len(errors)
