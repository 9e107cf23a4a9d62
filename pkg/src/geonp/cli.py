"""``geonp`` command line: synth, train, eval, map and finetune.

Exit codes: 0 success, 2 configuration error, 3 data or state error,
4 numeric failure during training. Primary outputs (CSV/JSON) carry no
timestamps; those go to ``<out>/<command>.log`` only.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import nn
from .anp import ANP
from .baselines import DropoutMLPModel, Forest, GBQModel, gbq_fit, mlp_fit, rf_fit
from .config import ConfigError, RunConfig
from .evaluate import (
    episode_features,
    eval_episodes,
    predict_anp,
    predict_baseline,
    predict_idw,
    score,
    targets,
    tile_xy,
)
from .geodata import (
    DataFormatError,
    NormalizationSpec,
    SplitAssignment,
    SplitError,
    SyntheticConfig,
    SyntheticLandscape,
    assign_tiles,
    buffered_spatial_split,
    filter_observations,
    full_context,
    generate_synthetic_region,
    load_observations_csv,
    query_points,
    write_observations_csv,
)
from .geodata.observations import infer_embed_dim
from .geodata.tiles import TILE_PITCH
from .trainer import TrainingDivergence, finetune, select_finetune_tiles, train

logger = logging.getLogger("geonp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODELS = ("anp", "rf", "gbq", "mlp")
COMPARISON_COLUMNS = ("model", "split", "log_r2", "log_rmse", "log_mae", "linear_rmse", "linear_mae",
                      "z_mean", "z_std", "coverage_1", "coverage_2", "coverage_3", "sigma_floored", "n")


class DataError(RuntimeError):
    """Missing, malformed or mutually inconsistent inputs (exit 3)."""


# -- shared plumbing ----------------------------------------------------------

def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def _config(args) -> tuple[RunConfig, Path]:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _attach_log(out: Path, command: str) -> logging.Handler:
    handler = logging.FileHandler(out / f"{command}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return handler


def _load_tiles(path):
    """Quality-filtered observations and their tiles, plus the embedding dimension."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    embed_dim = infer_embed_dim(path)
    obs = filter_observations(load_observations_csv(path, embed_dim))
    if not obs:
        raise DataError(f"{path}: no observations pass the quality filter")
    logger.info("loaded %d quality-passing shots (D=%d) from %s", len(obs), embed_dim, path)
    return obs, assign_tiles(obs), embed_dim


def _spec_from_data(obs, cfg: RunConfig) -> NormalizationSpec:
    return NormalizationSpec.from_points([o.lon for o in obs], [o.lat for o in obs],
                                         scale=cfg.normalization.scale,
                                         coord_noise_std=cfg.normalization.coord_noise_std)


def _split_tiles(tiles, split: SplitAssignment, label: str):
    by_id = {t.tile_id: t for t in tiles}
    missing = [i for i in split.ids(label) if i not in by_id]
    if missing:
        raise DataError(f"split lists {len(missing)} {label} tiles absent from the data, e.g. {missing[0]}")
    return [by_id[i] for i in split.ids(label)]


def _load_split(path) -> SplitAssignment:
    if not Path(path).exists():
        raise DataError(f"split file not found: {path}")
    return SplitAssignment.load(path)


def _checkpoint_kind(path) -> tuple[str, dict]:
    """``(kind, metadata)`` for an ANP/MLP container or an RF/GBQ JSON file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    first = raw.split(b"\n", 1)[0]
    try:
        header = json.loads(first.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not (isinstance(header, dict) and header.get("format") == nn.checkpoint.FORMAT):
        try:
            d = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise DataError(f"{path}: neither a parameter container nor a JSON model file") from None
        kind = {"random-forest": "rf", "gbq": "gbq"}.get(d.get("kind")) if isinstance(d, dict) else None
        if kind is None:
            raise DataError(f"{path}: unrecognized model file")
        return kind, d
    meta = header.get("meta", {})
    if "anp_config" in meta:
        return "anp", meta
    if meta.get("kind") == "mlp":
        return "mlp", meta
    raise DataError(f"{path}: unrecognized checkpoint metadata")


def _load_model(path):
    kind, meta = _checkpoint_kind(path)
    if meta.get("normalization") is None:
        raise DataError(f"{path}: checkpoint carries no normalization")
    spec = NormalizationSpec.from_dict(meta["normalization"])
    if kind == "anp":
        model = ANP.load(path)
    elif kind == "mlp":
        model = DropoutMLPModel.load(path)
    elif kind == "rf":
        model = Forest.from_dict(meta)
    else:
        model = GBQModel.from_dict(meta)
    return kind, model, spec


def _check_dims(kind: str, model, path, embed_dim: int) -> None:
    n_features = 2 + 9 * embed_dim
    if kind == "anp" and model.cfg.embed_dim != embed_dim:
        raise DataError(f"{path}: checkpoint expects D={model.cfg.embed_dim}, data has D={embed_dim}")
    if kind == "mlp" and model.n_inputs != n_features:
        raise DataError(f"{path}: checkpoint expects {model.n_inputs} features, data gives {n_features}")
    if kind in ("rf", "gbq"):
        trees = model.trees if kind == "rf" else model.mean.trees + model.lower.trees + model.upper.trees
        used = max((int(t.feature.max()) for t in trees if t.n_nodes), default=-1)
        if used >= n_features:
            raise DataError(f"{path}: model splits on feature {used}, data gives {n_features}")


# -- subcommands --------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, out: Path) -> int:
    region = generate_synthetic_region(cfg.synthetic)
    obs = region.observations
    write_observations_csv(out / "observations.csv", obs, cfg.synthetic.embed_dim)
    region.write_truth(out / "truth.json")
    logger.info("wrote %d shots in %d tiles", len(obs), len(region))
    print(f"synth: {len(region)} tiles, {len(obs)} shots -> {out / 'observations.csv'}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    if args.model == "idw":
        raise ConfigError("idw requires no training; it is evaluated directly by `geonp eval`")
    if args.model not in MODELS:
        raise ConfigError(f"unknown model {args.model!r}; choose from {', '.join(MODELS)}")
    obs, tiles, embed_dim = _load_tiles(args.data)
    spec = _spec_from_data(obs, cfg)
    if cfg.anp.get("embed_dim", embed_dim) != embed_dim:
        raise DataError(f"config anp.embed_dim={cfg.anp['embed_dim']} but {args.data} has D={embed_dim}")
    split = buffered_spatial_split(tiles, cfg.split.fractions, cfg.split.buffer, seed=cfg.seed)
    split.save(out / "split.json")
    _write_json(out / "normalization.json", spec.to_dict())
    cfg.save(out / "config.json")
    tr, va = _split_tiles(tiles, split, "train"), _split_tiles(tiles, split, "val")
    norm = {"normalization": spec.to_dict()}

    if args.model == "anp":
        ckpt = out / "anp.ckpt"
        model, hist = train(ANP(cfg.anp_config(embed_dim), spec), tr, va, cfg.train, checkpoint_path=ckpt,
                            history_path=out / "anp_history.json")
        model.save(ckpt)
        summary = f"best epoch {hist.best_epoch}, val NLL {hist.best_val_nll:.4f}"
    else:
        X, y = tile_xy(tr, spec)
        if args.model == "rf":
            ckpt = out / "rf.json"
            rf = cfg.rf
            forest = rf_fit(X, y, rf.n_estimators, rf.max_depth, cfg.seed, min_samples_leaf=rf.min_samples_leaf)
            _write_json(ckpt, {**forest.to_dict(), **norm})
            summary = f"{rf.n_estimators} trees"
        elif args.model == "gbq":
            ckpt = out / "gbq.json"
            model = gbq_fit(X, y, cfg.gbq)
            _write_json(ckpt, {**model.to_dict(), **norm})
            summary = f"{cfg.gbq.n_estimators} rounds x 3 objectives"
        else:
            ckpt = out / "mlp.ckpt"
            Xv, yv = tile_xy(va, spec)
            model, hist = mlp_fit(X, y, Xv, yv, cfg.mlp)
            if not all(math.isfinite(v) for v in hist["train_mse"] + hist["val_mse"]):
                raise TrainingDivergence("non-finite MLP loss")
            model.save(ckpt, extra=norm)
            _write_json(out / "mlp_history.json", hist)
            summary = f"best epoch {hist['best_epoch']}"
    print(f"train {args.model}: {len(tr)} train / {len(va)} val tiles, {summary} -> {ckpt}")
    return EXIT_OK


def _model_name(kind: str, taken: set) -> str:
    name, k = kind, 2
    while name in taken:
        name, k = f"{kind}_{k}", k + 1
    taken.add(name)
    return name


def _comparison_row(name: str, split: str, rep: dict) -> list:
    acc, cal = rep["accuracy"], rep["calibration"]
    vals = [acc["log_r2"], acc["log_rmse"], acc["log_mae"], acc["linear_rmse"], acc["linear_mae"],
            cal["z_mean"], cal["z_std"], cal["coverage_1"], cal["coverage_2"], cal["coverage_3"]]
    return [name, split, *(f"{v:.6f}" for v in vals), rep["sigma_floored"], acc["n"]]


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    split_path = Path(args.split) if args.split else out / "split.json"
    split = _load_split(split_path)
    obs, tiles, embed_dim = _load_tiles(args.data)

    models, spec = [], None
    for path in args.checkpoint or []:
        kind, model, mspec = _load_model(path)
        _check_dims(kind, model, path, embed_dim)
        if spec is not None and mspec != spec:
            raise DataError(f"{path}: normalization differs from the other checkpoints")
        spec = mspec
        models.append((kind, model))
    if spec is None:
        norm_path = split_path.with_name("normalization.json")
        spec = (NormalizationSpec.from_dict(_read_json(norm_path)) if norm_path.exists()
                else _spec_from_data(obs, cfg))

    splits = {label: eval_episodes(_split_tiles(tiles, split, label), spec, cfg.seed) for label in ("val", "test")}
    for label, eps in splits.items():
        if not eps:
            raise DataError(f"no usable {label} tiles in {split_path}")

    taken: set = set()
    results, rows = {}, []
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for kind, model in models + [("idw", None)]:
        name = _model_name(kind, taken)
        results[name] = {}
        for label, eps in splits.items():
            y = targets(eps)
            crossings = None
            if kind == "anp":
                mu, sigma = predict_anp(model, eps)
            elif kind == "idw":
                mu, sigma = predict_idw(eps, tiles, cfg.eval.idw_power)
            else:
                mu, sigma, extra = predict_baseline(model, episode_features(eps), seed=cfg.seed)
                crossings = extra.get("quantile_crossings")
            acc, cal, floored = score(y, mu, sigma, spec, cfg.eval.n_bins, crossings)
            rep = {"accuracy": acc.to_dict(), "calibration": cal.to_dict(), "sigma_floored": floored}
            results[name][label] = rep
            cal.write_csvs(curves, prefix=f"{name}_{label}_")
            rows.append(_comparison_row(name, label, rep))
            logger.info("%s %s: log R2 %.4f, z-std %.4f", name, label, acc.log_r2, cal.z_std)
        _write_json(out / f"metrics_{name}.json", {"model": name, **results[name]})

    _write_json(out / "metrics.json", {"models": results, "n_tiles": {k: len(v) for k, v in splits.items()},
                                       "seed": cfg.seed})
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_COLUMNS)
        w.writerows(rows)
    for name, res in results.items():
        t = res["test"]
        print(f"{name:>6}  test log R2 {t['accuracy']['log_r2']:7.4f}  z-std {t['calibration']['z_std']:7.4f}  "
              f"1-sigma coverage {t['calibration']['coverage_1']:5.1f}%")
    return EXIT_OK


def _grid(tile, step: float):
    """Inclusive regular grid over the tile, rows north to south."""
    lon0, _, lat0, _ = tile.bounds
    n = int(math.floor(tile.pitch / step + 1e-9)) + 1
    offs = np.arange(n) * step
    lon, lat = np.meshgrid(lon0 + offs, lat0 + offs[::-1])
    return lon.ravel(), lat.ravel()


def _map_queries(args, tiles, embed_dim: int):
    """``{tile_id: (lon, lat, patches)}`` for the requested tiles."""
    if args.features:
        fobs = load_observations_csv(args.features, embed_dim)
        by_tile = {t.tile_id: t for t in assign_tiles(fobs)}
        return {t.tile_id: (by_tile[t.tile_id].lon, by_tile[t.tile_id].lat, by_tile[t.tile_id].patches)
                for t in tiles if t.tile_id in by_tile}
    truth = Path(args.truth) if args.truth else Path(args.data).with_name("truth.json")
    if not truth.exists():
        raise DataError(f"no grid embeddings: pass --features or provide a synthetic truth file ({truth})")
    syn = SyntheticConfig.from_dict(_read_json(truth)["config"])
    if syn.embed_dim != embed_dim:
        raise DataError(f"{truth}: landscape has D={syn.embed_dim}, data has D={embed_dim}")
    land = SyntheticLandscape(syn)
    queries = {}
    for t in tiles:
        lon, lat = _grid(t, args.grid_step)
        queries[t.tile_id] = (lon, lat, land.patches(lon, lat))
    return queries


def cmd_map(args, cfg: RunConfig, out: Path) -> int:
    if args.grid_step <= 0 or args.grid_step > TILE_PITCH:
        raise ConfigError(f"--grid-step must lie in (0, {TILE_PITCH}], got {args.grid_step}")
    kind, model, spec = _load_model(args.checkpoint)
    if kind != "anp":
        raise DataError(f"{args.checkpoint}: map needs an ANP checkpoint, got {kind}")
    _, tiles, embed_dim = _load_tiles(args.data)
    _check_dims(kind, model, args.checkpoint, embed_dim)
    by_id = {t.tile_id: t for t in tiles}
    wanted = [s.strip() for s in args.tiles.split(",") if s.strip()] if args.tiles else sorted(by_id)
    chosen = []
    for tid in wanted:
        if tid in by_id and len(by_id[tid]) >= 1:
            chosen.append(by_id[tid])
        else:
            logger.warning("tile %s has no context shots; skipped", tid)
            print(f"warning: tile {tid} has no context shots; skipped", file=sys.stderr)
    queries = _map_queries(args, chosen, embed_dim)

    def run(tile):
        lon, lat, patches = queries[tile.tile_id]
        pred = model.predict(full_context(tile, spec), query_points(lon, lat, patches, spec))
        return lon, lat, pred.mu_raw, pred.sigma_raw

    with nn.no_grad(), ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(run, [t for t in chosen if t.tile_id in queries]))

    n_rows = 0
    with open(out / "map.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lon", "lat", "mu_raw", "sigma_raw"])
        for lon, lat, mu, sigma in results:
            for row in zip(lon, lat, mu, sigma):
                w.writerow([repr(float(v)) for v in row])
            n_rows += len(lon)
    print(f"map: {len(results)} tiles, {n_rows} grid nodes -> {out / 'map.csv'}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig, out: Path) -> int:
    n_tiles = cfg.finetune.n_tiles if args.n_tiles is None else args.n_tiles
    epochs = cfg.finetune.epochs if args.epochs is None else args.epochs
    if n_tiles < 1 or epochs < 0:
        raise ConfigError("--n-tiles must be >= 1 and --epochs >= 0")
    kind, model, spec = _load_model(args.checkpoint)
    if kind != "anp":
        raise DataError(f"{args.checkpoint}: finetune needs an ANP checkpoint, got {kind}")
    _, tiles, embed_dim = _load_tiles(args.data)
    _check_dims(kind, model, args.checkpoint, embed_dim)
    if args.split:
        split = _load_split(args.split)
    else:
        split = buffered_spatial_split(tiles, cfg.split.fractions, cfg.split.buffer, seed=cfg.seed)
        split.save(out / "split.json")
    pool, test = _split_tiles(tiles, split, "train"), _split_tiles(tiles, split, "test")
    try:
        chosen = select_finetune_tiles(pool, n_tiles, cfg.train.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    episodes = eval_episodes(test, spec, cfg.seed)
    if not episodes:
        raise DataError("no usable target test tiles")
    y = targets(episodes)

    def evaluate():
        mu, sigma = predict_anp(model, episodes)
        acc, cal, floored = score(y, mu, sigma, spec, cfg.eval.n_bins)
        return {"accuracy": acc.to_dict(), "calibration": cal.to_dict(), "sigma_floored": floored}

    before = evaluate()
    _, hist = finetune(model, pool, n_tiles=n_tiles, epochs=epochs, cfg=cfg.train)
    after = evaluate()
    model.save(out / "anp_finetuned.ckpt")
    pairs = {}
    for key, section in (("log_r2", "accuracy"), ("log_rmse", "accuracy"), ("z_std", "calibration"),
                         ("coverage_1", "calibration")):
        pairs[key] = {"zero_shot": before[section][key], "few_shot": after[section][key]}
    _write_json(out / "finetune_report.json", {
        "n_tiles": n_tiles, "epochs": epochs, "finetune_tiles": [t.tile_id for t in chosen],
        "zero_shot": before, "few_shot": after, "pairs": pairs, "history": hist.to_dict()})
    print(f"finetune: log R2 {pairs['log_r2']['zero_shot']:.4f} -> {pairs['log_r2']['few_shot']:.4f}, "
          f"z-std {pairs['z_std']['zero_shot']:.4f} -> {pairs['z_std']['few_shot']:.4f}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="global seed, overrides the config")
    common.add_argument("--out", help="output directory (default: config 'out')")

    parser = argparse.ArgumentParser(prog="geonp", description="Neural-process biomass interpolation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic observation CSV")

    p = sub.add_parser("train", parents=[common], help="split the data and train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default="anp", help="anp, rf, gbq or mlp")

    p = sub.add_parser("eval", parents=[common], help="score checkpoints and IDW on val and test")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", help="repeatable; IDW is always included")
    p.add_argument("--split", help="split JSON (default: <out>/split.json)")

    p = sub.add_parser("map", parents=[common], help="predict an ANP on regular grids inside tiles")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tiles", help="comma-separated tile ids (default: every tile in the data)")
    p.add_argument("--grid-step", type=float, default=0.01, help="grid spacing in degrees")
    p.add_argument("--features", help="CSV of query points with embeddings (lon, lat, agbd, e_*)")
    p.add_argument("--truth", help="synthetic truth JSON used to rebuild grid embeddings")
    p.add_argument("--workers", type=int, default=1, help="tiles predicted in parallel")

    p = sub.add_parser("finetune", parents=[common], help="few-shot adaptation to a target region")
    p.add_argument("--data", required=True, help="target region observations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="target split JSON (default: computed and written to <out>)")
    p.add_argument("--n-tiles", type=int)
    p.add_argument("--epochs", type=int)
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "map": cmd_map, "finetune": cmd_finetune}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = None
    try:
        cfg, out = _config(args)
        handler = _attach_log(out, args.command)
        return COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DataFormatError, SplitError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if handler is not None:
            logger.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
