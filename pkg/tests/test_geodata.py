import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geonp.geodata import (
    EXCLUDED,
    TEST,
    DataFormatError,
    NormalizationSpec,
    Observation,
    SplitAssignment,
    SplitError,
    SyntheticConfig,
    Tile,
    assign_tiles,
    backtransform_sigma,
    buffered_spatial_split,
    context_count,
    csv_header,
    denormalize_coords,
    episode_rng,
    generate_synthetic_region,
    inverse_transform_agbd,
    load_observations_csv,
    min_distance_to_test,
    normalize_coords,
    quality_filter,
    sample_episode,
    transform_agbd,
    write_observations_csv,
)

D = 2


def make_obs(lon=0.05, lat=0.05, agbd=120.0, d=D, **quality):
    return Observation(lon, lat, agbd, np.zeros((3, 3, d), dtype=np.float32), **quality)


NOMINAL = dict(quality_flag=1, degrade_flag=0, surface_flag=1, sensitivity_a0=0.95, sensitivity_a2=0.98,
               elevation_difference_tdx=3.0)


@pytest.fixture
def spec():
    return NormalizationSpec(lon_min=0.0, lon_max=1.0, lat_min=0.0, lat_max=1.0)


def grid_tiles(n_side, shots=12, pitch=0.1):
    obs = []
    for r in range(n_side):
        for c in range(n_side):
            for k in range(shots):
                obs.append(make_obs(lon=(c + 0.1 + 0.8 * k / shots) * pitch, lat=(r + 0.5) * pitch))
    return assign_tiles(obs, pitch)


class TestQualityFilter:
    def test_nominal_passes(self):
        assert quality_filter(make_obs(agbd=120.0, **NOMINAL))

    def test_agbd_over_cap(self):
        assert not quality_filter(make_obs(agbd=600.0, **NOMINAL))

    def test_low_sensitivity(self):
        assert not quality_filter(make_obs(**{**NOMINAL, "sensitivity_a0": 0.85}))

    @pytest.mark.parametrize("field,value", [
        ("quality_flag", 0), ("degrade_flag", 1), ("surface_flag", 0),
        ("sensitivity_a2", 0.94), ("elevation_difference_tdx", 151.0), ("elevation_difference_tdx", -150.5),
    ])
    def test_each_rule(self, field, value):
        assert not quality_filter(make_obs(**{**NOMINAL, field: value}))

    def test_missing_fields_pass(self):
        assert quality_filter(make_obs())

    def test_cap_is_strict(self):
        assert quality_filter(make_obs(agbd=499.99))
        assert not quality_filter(make_obs(agbd=500.0))

    def test_pure(self):
        o = make_obs(**NOMINAL)
        assert all(quality_filter(o) for _ in range(5))


class TestTransforms:
    def test_coords_endpoints(self):
        s = NormalizationSpec(-73.0, -72.0, 2.0, 3.0)
        x, y = normalize_coords([-73.0, -72.5, -72.0], [2.0, 2.5, 3.0], s)
        np.testing.assert_allclose(x, [0.0, 0.5, 1.0])
        np.testing.assert_allclose(y, [0.0, 0.5, 1.0])
        lon, lat = denormalize_coords(x, y, s)
        np.testing.assert_allclose(lon, [-73.0, -72.5, -72.0])

    def test_out_of_bounds_allowed(self, spec):
        x, _ = normalize_coords([-0.5], [0.0], spec)
        assert x[0] == -0.5

    @pytest.mark.parametrize("kwargs", [
        dict(lon_min=1.0, lon_max=1.0, lat_min=0.0, lat_max=1.0),
        dict(lon_min=0.0, lon_max=1.0, lat_min=2.0, lat_max=1.0),
        dict(lon_min=0.0, lon_max=1.0, lat_min=0.0, lat_max=1.0, scale=0.0),
    ])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            NormalizationSpec(**kwargs)

    def test_agbd_examples(self):
        assert transform_agbd(0.0) == 0.0
        assert transform_agbd(200.0) == pytest.approx(1.0, abs=1e-15)
        # ln 51 / ln 201 from a 30-digit evaluation
        assert transform_agbd(50.0) == pytest.approx(0.74139158522629819, abs=1e-12)

    def test_agbd_negative(self):
        with pytest.raises(ValueError):
            transform_agbd(-1.0)

    def test_round_trip_grid(self):
        y = np.linspace(0.0, 500.0, 5001)
        assert np.max(np.abs(inverse_transform_agbd(transform_agbd(y)) - y)) < 1e-9

    def test_strictly_increasing(self):
        v = transform_agbd(np.linspace(0.0, 500.0, 5001))
        assert np.all(np.diff(v) > 0)

    @pytest.mark.parametrize("sigma,mu,expected", [(0.0, 50.0, 0.0), (0.1, 99.0, 53.0330), (0.1, 0.0, 0.530330)])
    def test_sigma_examples(self, sigma, mu, expected):
        assert backtransform_sigma(sigma, mu) == pytest.approx(expected, abs=5e-5)

    @given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 500), st.floats(0, 500))
    def test_sigma_monotone(self, s1, s2, m1, m2):
        lo_s, hi_s = sorted((s1, s2))
        lo_m, hi_m = sorted((m1, m2))
        assert backtransform_sigma(lo_s, lo_m) <= backtransform_sigma(hi_s, lo_m) + 1e-12
        assert backtransform_sigma(lo_s, lo_m) <= backtransform_sigma(lo_s, hi_m) + 1e-12

    def test_sigma_negative(self):
        with pytest.raises(ValueError):
            backtransform_sigma(-0.1, 10.0)

    def test_spec_dict_round_trip(self, spec):
        assert NormalizationSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


class TestTiles:
    def test_boundary_goes_to_higher_tile(self):
        tiles = assign_tiles([make_obs(lon=0.3, lat=0.05), make_obs(lon=0.2999999, lat=0.05)])
        by_col = {t.col: len(t) for t in tiles}
        assert by_col == {2: 1, 3: 1}

    def test_negative_coordinates(self):
        (tile,) = assign_tiles([make_obs(lon=-72.95, lat=-0.05)])
        assert (tile.row, tile.col) == (-1, -730)
        lon0, lon1, lat0, lat1 = tile.bounds
        assert lon0 <= -72.95 < lon1 and lat0 <= -0.05 < lat1

    def test_counts_sum(self):
        obs = [make_obs(lon=0.01 + 0.004 * i, lat=0.05) for i in range(15)]
        obs += [make_obs(lon=0.15, lat=0.01 + 0.008 * i) for i in range(10)]
        tiles = assign_tiles(obs)
        assert len(tiles) == 2
        assert sum(len(t) for t in tiles) == 25

    def test_unusable_tile(self):
        (tile,) = assign_tiles([make_obs(lon=0.01 + 0.005 * i) for i in range(9)])
        assert not tile.usable()
        assert Tile(0, 0, tile.observations + [make_obs()]).usable()

    def test_members_inside_bounds(self):
        rng = np.random.default_rng(3)
        obs = [make_obs(lon=x, lat=y) for x, y in rng.uniform(-1, 1, size=(400, 2))]
        for t in assign_tiles(obs):
            lon0, lon1, lat0, lat1 = t.bounds
            assert all(lon0 - 1e-12 <= o.lon < lon1 + 1e-12 and lat0 - 1e-12 <= o.lat < lat1 + 1e-12
                       for o in t.observations)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            assign_tiles([make_obs(lon=math.nan)])


class TestSplit:
    def test_center_test_tile_excludes_rook_neighbours(self):
        tiles = grid_tiles(3)
        split = buffered_spatial_split(tiles, buffer=0.1, seed=0, test_ids=["1_1"])
        assert split.test == ["1_1"]
        assert sorted(split.excluded) == ["0_1", "1_0", "1_2", "2_1"]
        for diag in ("0_0", "0_2", "2_0", "2_2"):
            assert split.labels[diag] not in (TEST, EXCLUDED)

    def test_deterministic(self):
        tiles = grid_tiles(6)
        assert buffered_spatial_split(tiles, seed=4).labels == buffered_spatial_split(tiles, seed=4).labels

    @pytest.mark.parametrize("seed", range(100))
    def test_invariants(self, seed):
        tiles = grid_tiles(8)
        split = buffered_spatial_split(tiles, seed=seed)
        assert min_distance_to_test(tiles, split) > split.buffer
        assert not set(split.train) & set(split.test)
        assert split.train and split.val and split.test
        assert len(split.test) == round(0.15 * len(tiles))

    def test_too_few_tiles(self):
        with pytest.raises(SplitError):
            buffered_spatial_split(grid_tiles(2)[:2])
        # a 2x2 block cannot keep any train tile once a test tile and its two rook neighbours go
        with pytest.raises(SplitError):
            buffered_spatial_split(grid_tiles(2), test_ids=["0_0"])

    def test_unusable_tiles_ignored(self):
        tiles = grid_tiles(4) + [Tile(9, 9, [make_obs(lon=0.95, lat=0.95)])]
        split = buffered_spatial_split(tiles, seed=1)
        assert "9_9" not in split.labels

    def test_json_round_trip(self, tmp_path):
        split = buffered_spatial_split(grid_tiles(5), seed=2)
        split.save(tmp_path / "split.json")
        assert SplitAssignment.load(tmp_path / "split.json") == split


class TestEpisodes:
    @pytest.fixture
    def tile(self):
        return grid_tiles(1, shots=40)[0]

    def test_half_split(self, spec):
        tile = grid_tiles(1, shots=10)[0]
        ep = sample_episode(tile, spec, np.random.default_rng(0), ratio=0.5)
        assert (len(ep.context), len(ep.targets)) == (5, 5)
        assert not set(ep.context.index) & set(ep.targets.index)

    @pytest.mark.parametrize("n,ratio,expected", [(10, 0.5, 5), (11, 0.5, 6), (10, 0.01, 1), (10, 0.99, 9)])
    def test_context_count(self, n, ratio, expected):
        assert context_count(n, ratio) == expected

    def test_eval_mode_unperturbed(self, tile, spec):
        ep = sample_episode(tile, spec, np.random.default_rng(0), train_mode=False)
        x, y = normalize_coords(tile.lon[ep.context.index], tile.lat[ep.context.index], spec)
        np.testing.assert_array_equal(ep.context.coords, np.stack([x, y], 1).astype(np.float32))

    def test_train_mode_noise(self, tile, spec):
        ep = sample_episode(tile, spec, np.random.default_rng(0), train_mode=True)
        x, y = normalize_coords(tile.lon[ep.targets.index], tile.lat[ep.targets.index], spec)
        diff = ep.targets.coords - np.stack([x, y], 1)
        assert 0.03 < diff.std() < 0.3

    def test_unusable(self, spec):
        tile = grid_tiles(1, shots=9)[0]
        with pytest.raises(ValueError, match="at least 10"):
            sample_episode(tile, spec, np.random.default_rng(0))

    def test_masked(self, tile, spec):
        ep = sample_episode(tile, spec, np.random.default_rng(0)).masked()
        assert np.all(np.isnan(ep.targets.agbd)) and not np.any(np.isnan(ep.context.agbd))

    def test_episode_rng_streams(self, tile):
        a = episode_rng(0, tile, 0).random(4)
        np.testing.assert_array_equal(a, episode_rng(0, tile, 0).random(4))
        assert not np.array_equal(a, episode_rng(0, tile, 1).random(4))

    def test_thousand_draws(self, spec):
        rng = np.random.default_rng(11)
        for draw in range(1000):
            n = int(rng.integers(10, 60))
            tile = grid_tiles(1, shots=n)[0]
            ep = sample_episode(tile, spec, episode_rng(5, tile, draw), train_mode=bool(draw % 2))
            c, t = set(ep.context.index), set(ep.targets.index)
            assert c and t and not c & t
            assert c | t == set(range(n))
            # rounding moves the realized fraction by at most half a shot
            assert 0.3 - 0.5 / n <= len(c) / n <= 0.7 + 0.5 / n
            assert len(c) + len(t) >= 10


class TestCsv:
    def test_header_only(self, tmp_path):
        p = tmp_path / "obs.csv"
        p.write_text(",".join(csv_header(D)) + "\n")
        assert load_observations_csv(p, D) == []

    def test_one_row(self, tmp_path):
        p = tmp_path / "obs.csv"
        patch = np.arange(9 * D, dtype=np.float32).reshape(3, 3, D)
        write_observations_csv(p, [Observation(-72.5, 2.25, 80.0, patch, **NOMINAL)])
        (o,) = load_observations_csv(p, D)
        assert (o.lon, o.lat, o.agbd) == (-72.5, 2.25, 80.0)
        assert o.sensitivity_a0 == 0.95 and o.quality_flag == 1
        # row-major over (row, col, channel)
        assert o.patch[0, 1, 1] == 3.0 and o.patch[2, 2, 0] == 16.0

    def test_without_quality_block(self, tmp_path):
        p = tmp_path / "obs.csv"
        write_observations_csv(p, [make_obs()])
        (o,) = load_observations_csv(p, D)
        assert o.quality_flag is None

    def test_nan_rejected_with_line(self, tmp_path):
        p = tmp_path / "obs.csv"
        row = ["0.05", "0.05", "10.0"] + ["0.0"] * (9 * D)
        bad = list(row)
        bad[5] = "nan"
        p.write_text("\n".join([",".join(csv_header(D, with_quality=False)), ",".join(row), ",".join(bad)]) + "\n")
        with pytest.raises(DataFormatError, match="line 3"):
            load_observations_csv(p, D)

    def test_wrong_dimension(self, tmp_path):
        p = tmp_path / "obs.csv"
        write_observations_csv(p, [make_obs()])
        with pytest.raises(DataFormatError, match="embedding columns"):
            load_observations_csv(p, D + 1)

    def test_short_row(self, tmp_path):
        p = tmp_path / "obs.csv"
        p.write_text(",".join(csv_header(D, with_quality=False)) + "\n0.1,0.1,3\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_observations_csv(p, D)


class TestSynthetic:
    CFG = dict(tiles_per_side=2, shots_per_tile=60, shots_jitter=10, embed_dim=3)

    def test_deterministic(self):
        a = generate_synthetic_region(SyntheticConfig(**self.CFG, seed=3))
        b = generate_synthetic_region(SyntheticConfig(**self.CFG, seed=3))
        assert [t.tile_id for t in a] == [t.tile_id for t in b]
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.agbd, tb.agbd)
            np.testing.assert_array_equal(ta.patches, tb.patches)

    def test_seed_changes_data(self):
        a = generate_synthetic_region(SyntheticConfig(**self.CFG, seed=3))
        b = generate_synthetic_region(SyntheticConfig(**self.CFG, seed=4))
        assert not np.array_equal(a[0].agbd[:5], b[0].agbd[:5])

    def test_layout(self):
        region = generate_synthetic_region(SyntheticConfig(**self.CFG))
        assert len(region) == 4
        for t in region:
            assert 50 <= len(t) <= 70
            assert t.patches.shape[1:] == (3, 3, 3)
            assert all(quality_filter(o) for o in t.observations)

    def test_uninformative_embeddings(self):
        region = generate_synthetic_region(SyntheticConfig(**self.CFG, informativeness=0.0))
        land = region.landscape
        lon = np.concatenate([t.lon for t in region])
        lat = np.concatenate([t.lat for t in region])
        # with zero weight the embeddings are exactly the nuisance fields
        np.testing.assert_allclose(land.embeddings(lon, lat), land.cfg.embed_noise * land._nuisance(lon, lat))

    def test_homoscedastic(self):
        region = generate_synthetic_region(SyntheticConfig(**self.CFG, sigma_lo=0.05, sigma_hi=0.05))
        for s in region.true_noise_std.values():
            np.testing.assert_allclose(s, 0.05)

    def test_noise_range(self):
        region = generate_synthetic_region(SyntheticConfig(**self.CFG))
        s = np.concatenate(list(region.true_noise_std.values()))
        assert s.min() >= 0.05 and s.max() <= 0.15 and s.std() > 0.005

    def test_invalid(self):
        with pytest.raises(ValueError):
            SyntheticConfig(sigma_lo=0.2, sigma_hi=0.1)
        with pytest.raises(ValueError):
            SyntheticConfig(embed_dim=0)

    def test_truth_sidecar(self, tmp_path):
        region = generate_synthetic_region(SyntheticConfig(**self.CFG))
        region.write_truth(tmp_path / "truth.json")
        doc = json.loads((tmp_path / "truth.json").read_text())
        assert [t["tile_id"] for t in doc["tiles"]] == [t.tile_id for t in region]
        assert SyntheticConfig.from_dict(doc["config"]) == region.landscape.cfg

    def test_csv_round_trip(self, tmp_path):
        region = generate_synthetic_region(SyntheticConfig(**self.CFG))
        write_observations_csv(tmp_path / "obs.csv", region.observations)
        back = assign_tiles(load_observations_csv(tmp_path / "obs.csv", 3))
        assert [len(t) for t in back] == [len(t) for t in region]
        np.testing.assert_array_equal(back[0].patches, region[0].patches)

    def test_feature_shift(self):
        a = generate_synthetic_region(SyntheticConfig(**self.CFG))
        b = generate_synthetic_region(SyntheticConfig(**self.CFG, feature_seed=99))
        np.testing.assert_array_equal(a[0].agbd, b[0].agbd)
        assert not np.allclose(a[0].patches, b[0].patches)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_patch_centre_matches_field(self, seed):
        region = generate_synthetic_region(SyntheticConfig(tiles_per_side=1, shots_per_tile=12,
                                                           shots_jitter=0, embed_dim=2, seed=seed))
        t = region[0]
        centre = region.landscape.embeddings(t.lon, t.lat).astype(np.float32)
        np.testing.assert_allclose(t.patches[:, 1, 1, :], centre, rtol=1e-6, atol=1e-6)
