import csv
import json

import numpy as np
import pytest

from geonp import cli
from geonp.config import ConfigError, RunConfig
from geonp.evaluate import eval_episodes, predict_idw, score, targets
from geonp.geodata import (
    NormalizationSpec,
    SplitAssignment,
    SyntheticConfig,
    assign_tiles,
    filter_observations,
    generate_synthetic_region,
    load_observations_csv,
)
from geonp.trainer import TrainConfig, TrainingDivergence

TINY = {
    "synthetic": {"tiles_per_side": 8, "shots_per_tile": 25, "shots_jitter": 5, "embed_dim": 4},
    "anp": {"d_model": 16, "d_latent": 8, "d_embed_feat": 16, "d_conv": 8, "d_context": 16, "heads": 4},
    "train": {"max_epochs": 2, "batch_size": 8},
    "rf": {"n_estimators": 5},
    "gbq": {"n_estimators": 3, "max_depth": 2},
    "mlp": {"hidden": [8], "max_epochs": 2, "passes": 3},
}


def write_config(path, **overrides):
    cfg = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        cfg[key] = {**cfg.get(key, {}), **value} if isinstance(value, dict) else value
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data plus one trained checkpoint of every kind, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "config.json")
    out = root / "run"
    assert run("synth", "--config", config, "--out", out) == 0
    data = out / "observations.csv"
    for model in cli.MODELS:
        assert run("train", "--model", model, "--config", config, "--out", out, "--data", data) == 0
    return root, config, out, data


@pytest.fixture(scope="module")
def evaluated(workspace):
    """Two identical eval runs over every trained checkpoint."""
    root, config, out, data = workspace
    ckpts = [a for name in ("anp.ckpt", "rf.json", "gbq.json", "mlp.ckpt") for a in ("--checkpoint", out / name)]
    dirs = []
    for k in range(2):
        d = root / f"eval{k}"
        assert run("eval", "--config", config, "--out", d, "--data", data, "--split", out / "split.json", *ckpts) == 0
        dirs.append(d)
    return dirs


class TestRunConfig:
    def test_defaults_are_reference_values(self):
        cfg = RunConfig.from_dict({})
        assert cfg.train == TrainConfig()
        assert (cfg.normalization.scale, cfg.normalization.coord_noise_std) == (200.0, 0.1)
        assert cfg.split.fractions == (0.70, 0.15, 0.15) and cfg.split.buffer == 0.1
        assert (cfg.finetune.n_tiles, cfg.finetune.epochs) == (10, 5)
        anp = cfg.anp_config(embed_dim=128)
        assert (anp.d_model, anp.d_latent, anp.heads) == (512, 256, 16)

    def test_round_trip(self):
        cfg = RunConfig.from_dict(TINY)
        assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()

    @pytest.mark.parametrize("bad", [
        {"unknown": 1},
        {"train": {"learning_rate": 1e-3}},
        {"anp": {"dropout": 0.1}},
        {"split": {"fractions": [0.5, 0.5, 0.5]}},
        {"train": {"seed": 3}},
        {"seed": -1},
        {"rf": []},
    ])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)

    def test_global_seed_reaches_every_section(self):
        cfg = RunConfig.from_dict({"seed": 7})
        assert cfg.synthetic.seed == cfg.train.seed == cfg.gbq.seed == cfg.mlp.seed == 7
        assert cfg.anp_config(4).seed == 7

    def test_explicit_embed_dim_mismatch(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"anp": {"embed_dim": 8}}).anp_config(4)


class TestSynth:
    def test_files_and_row_count(self, workspace):
        _, _, out, data = workspace
        region = generate_synthetic_region(SyntheticConfig(**TINY["synthetic"]))
        assert len(load_observations_csv(data, 4)) == len(region.observations)
        truth = json.loads((out / "truth.json").read_text())
        assert len(truth["tiles"]) == 64

    def test_same_seed_byte_identical(self, workspace, tmp_path):
        _, config, out, data = workspace
        assert run("synth", "--config", config, "--out", tmp_path) == 0
        assert (tmp_path / "observations.csv").read_bytes() == data.read_bytes()
        assert run("synth", "--config", config, "--out", tmp_path / "s1", "--seed", 1) == 0
        assert (tmp_path / "s1" / "observations.csv").read_bytes() != data.read_bytes()

    def test_sigma_bounds_inverted(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.json", synthetic={"sigma_lo": 0.3, "sigma_hi": 0.1})
        assert run("synth", "--config", config, "--out", tmp_path) == 2
        assert "sigma_lo" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert run("synth", "--config", tmp_path / "c.json", "--out", tmp_path) == 2

    def test_timestamps_only_in_log(self, workspace):
        _, _, out, _ = workspace
        assert (out / "synth.log").exists() and (out / "train.log").read_text().strip()


class TestTrain:
    def test_outputs(self, workspace):
        _, _, out, _ = workspace
        for name in ("anp.ckpt", "anp.ckpt.json", "anp_history.json", "rf.json", "gbq.json", "mlp.ckpt",
                     "split.json", "normalization.json", "config.json"):
            assert (out / name).exists(), name
        meta = json.loads((out / "anp.ckpt.json").read_text())
        assert meta["normalization"] == json.loads((out / "normalization.json").read_text())

    def test_rerun_same_split(self, workspace, tmp_path):
        _, config, out, data = workspace
        assert run("train", "--model", "rf", "--config", config, "--out", tmp_path, "--data", data) == 0
        assert (tmp_path / "split.json").read_bytes() == (out / "split.json").read_bytes()

    def test_idw_is_eval_only(self, workspace, tmp_path, capsys):
        _, config, _, data = workspace
        assert run("train", "--model", "idw", "--config", config, "--out", tmp_path, "--data", data) == 2
        assert "idw requires no training" in capsys.readouterr().err

    def test_missing_data(self, workspace, tmp_path):
        _, config, _, _ = workspace
        assert run("train", "--config", config, "--out", tmp_path, "--data", tmp_path / "none.csv") == 3

    def test_malformed_csv(self, workspace, tmp_path):
        _, config, _, _ = workspace
        bad = tmp_path / "bad.csv"
        bad.write_text("lon,lat,agbd,e_0\n1,2,3,4\n")
        assert run("train", "--config", config, "--out", tmp_path, "--data", bad) == 3

    def test_embed_dim_mismatch(self, workspace, tmp_path):
        _, _, _, data = workspace
        config = write_config(tmp_path / "c.json", anp={"embed_dim": 8})
        assert run("train", "--config", config, "--out", tmp_path, "--data", data) == 3

    def test_divergence_exit_code(self, workspace, tmp_path, monkeypatch):
        _, config, _, data = workspace

        def diverge(*args, **kwargs):
            raise TrainingDivergence("non-finite loss nan")

        monkeypatch.setattr(cli, "train", diverge)
        assert run("train", "--config", config, "--out", tmp_path, "--data", data) == 4


class TestEval:
    def test_identical_json_twice(self, evaluated):
        a, b = evaluated
        for name in ("metrics.json", "metrics_anp.json", "comparison.csv", "curves/rf_test_qq.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_every_model_on_both_splits(self, evaluated):
        metrics = json.loads((evaluated[0] / "metrics.json").read_text())
        assert sorted(metrics["models"]) == ["anp", "gbq", "idw", "mlp", "rf"]
        for rep in metrics["models"].values():
            assert set(rep) == {"val", "test"}
            assert {"accuracy", "calibration", "sigma_floored"} <= set(rep["test"])
        assert metrics["models"]["gbq"]["test"]["calibration"]["quantile_crossings"] is not None
        with open(evaluated[0] / "comparison.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10 and {r["split"] for r in rows} == {"val", "test"}

    def test_idw_uses_episode_context(self, workspace, evaluated):
        _, _, out, data = workspace
        spec = NormalizationSpec.from_dict(json.loads((out / "normalization.json").read_text()))
        split = SplitAssignment.load(out / "split.json")
        tiles = assign_tiles(filter_observations(load_observations_csv(data, 4)))
        by_id = {t.tile_id: t for t in tiles}
        eps = eval_episodes([by_id[i] for i in split.test], spec, seed=0)
        mu, sigma = predict_idw(eps, tiles)
        acc, _, _ = score(targets(eps), mu, sigma, spec)
        got = json.loads((evaluated[0] / "metrics_idw.json").read_text())["test"]["accuracy"]
        assert got["log_r2"] == acc.log_r2 and got["n"] == len(targets(eps))

    def test_missing_split(self, workspace, tmp_path, capsys):
        _, config, out, data = workspace
        assert run("eval", "--config", config, "--out", tmp_path, "--data", data,
                   "--checkpoint", out / "anp.ckpt") == 3
        assert "split" in capsys.readouterr().err

    def test_checkpoint_data_mismatch(self, workspace, tmp_path):
        _, _, out, _ = workspace
        other = write_config(tmp_path / "c.json", synthetic={"embed_dim": 2})
        assert run("synth", "--config", other, "--out", tmp_path) == 0
        assert run("eval", "--config", other, "--out", tmp_path, "--data", tmp_path / "observations.csv",
                   "--split", out / "split.json", "--checkpoint", out / "anp.ckpt") == 3

    def test_normalization_mismatch(self, workspace, tmp_path):
        _, config, out, data = workspace
        forest = json.loads((out / "rf.json").read_text())
        forest["normalization"]["scale"] = 100.0
        (tmp_path / "rf.json").write_text(json.dumps(forest))
        assert run("eval", "--config", config, "--out", tmp_path, "--data", data, "--split", out / "split.json",
                   "--checkpoint", out / "anp.ckpt", "--checkpoint", tmp_path / "rf.json") == 3


class TestMap:
    def _map(self, workspace, dest, *extra):
        _, config, out, data = workspace
        tile = sorted(SplitAssignment.load(out / "split.json").test)[0]
        code = run("map", "--config", config, "--out", dest, "--data", data, "--checkpoint", out / "anp.ckpt",
                   "--tiles", tile, *extra)
        return code, dest / "map.csv"

    def test_one_tile_grid(self, workspace, tmp_path):
        code, path = self._map(workspace, tmp_path)
        assert code == 0
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 121  # 11 x 11 inclusive nodes
        assert list(rows[0]) == ["lon", "lat", "mu_raw", "sigma_raw"]
        assert all(float(r["sigma_raw"]) >= 0 for r in rows)
        lon = np.array([float(r["lon"]) for r in rows])
        assert np.ptp(lon) == pytest.approx(0.1)

    def test_deterministic_and_worker_independent(self, workspace, tmp_path):
        _, a = self._map(workspace, tmp_path / "a")
        _, b = self._map(workspace, tmp_path / "b", "--workers", "3")
        assert a.read_bytes() == b.read_bytes()

    def test_empty_tile_skipped_with_warning(self, workspace, tmp_path, capsys):
        _, config, out, data = workspace
        assert run("map", "--config", config, "--out", tmp_path, "--data", data, "--checkpoint", out / "anp.ckpt",
                   "--tiles", "0_0") == 0
        assert "0_0" in capsys.readouterr().err
        assert (tmp_path / "map.csv").read_text().strip() == "lon,lat,mu_raw,sigma_raw"

    def test_needs_anp(self, workspace, tmp_path):
        _, config, out, data = workspace
        assert run("map", "--config", config, "--out", tmp_path, "--data", data,
                   "--checkpoint", out / "rf.json") == 3


class TestFinetune:
    def _ft(self, workspace, dest, *extra):
        _, config, out, data = workspace
        return run("finetune", "--config", config, "--out", dest, "--data", data, "--checkpoint", out / "anp.ckpt",
                   *extra)

    def test_zero_epochs_bit_identical(self, workspace, tmp_path):
        _, _, out, _ = workspace
        assert self._ft(workspace, tmp_path, "--epochs", "0", "--n-tiles", "3") == 0
        assert (tmp_path / "anp_finetuned.ckpt").read_bytes() == (out / "anp.ckpt").read_bytes()
        report = json.loads((tmp_path / "finetune_report.json").read_text())
        assert report["zero_shot"] == report["few_shot"]

    def test_defaults_and_pairs(self, workspace, tmp_path):
        assert self._ft(workspace, tmp_path) == 0
        report = json.loads((tmp_path / "finetune_report.json").read_text())
        assert (report["n_tiles"], report["epochs"]) == (10, 5)
        assert len(report["finetune_tiles"]) == 10 and len(report["history"]["train_elbo"]) == 5
        for pair in report["pairs"].values():
            assert set(pair) == {"zero_shot", "few_shot"}

    def test_insufficient_tiles(self, workspace, tmp_path, capsys):
        assert self._ft(workspace, tmp_path, "--n-tiles", "500") == 3
        assert "500" in capsys.readouterr().err
