import numpy as np
import pytest

from ztfed.data import (
    FEATURE_NAMES,
    MaskConfig,
    apply_mask,
    denormalize,
    export_csv,
    generate_mask,
    load_csv,
    minmax_normalize,
    round_half_away,
    split_dataset,
    split_rates,
    synth_wind,
)


class TestNormalize:
    def test_hand_case(self):
        x, lo, hi = minmax_normalize(np.array([0.0, 5.0, 10.0]))
        assert x.tolist() == [0.0, 0.5, 1.0]
        assert (lo, hi) == (0.0, 10.0)

    def test_endpoints(self):
        x, _, _ = minmax_normalize(np.array([3.0, -1.0, 7.0]))
        assert x.min() == 0.0 and x.max() == 1.0

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        col = rng.normal(size=50) * 40 + 7
        x, lo, hi = minmax_normalize(col)
        assert np.allclose(denormalize(x, lo, hi), col, atol=1e-12)

    def test_constant_column(self):
        x, lo, hi = minmax_normalize(np.full(5, 3.3))
        assert np.all(x == 0.5)
        assert lo == hi == 3.3


class TestSplitRates:
    def test_hand_case(self):
        assert split_rates(0.5, 0.25) == (0.125, 0.375)

    def test_all_discrete(self):
        d, c = split_rates(0.4, 1.0)
        assert d == 0.4 and c == 0.0

    def test_partition_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            mr, r = rng.uniform(0, 1, 2)
            d, c = split_rates(mr, r)
            assert d + c == pytest.approx(mr)


class TestRounding:
    def test_half_away(self):
        assert round_half_away(0.5) == 1
        assert round_half_away(1.5) == 2
        assert round_half_away(2.4) == 2
        assert round_half_away(-0.5) == -1


class TestGenerateMask:
    def test_zero_rate_empty(self):
        hm = generate_mask(96, MaskConfig(total_rate=0.0), seed=0)
        assert not hm.mask.any()
        assert hm.continuous_positions == () and hm.discrete_positions == ()

    def test_exact_count_over_seeds(self):
        cfg = MaskConfig(total_rate=0.5, discrete_ratio=0.25)
        for seed in range(100):
            hm = generate_mask(96, cfg, seed=seed)
            assert hm.mask.sum() == 48

    def test_sets_disjoint_and_cover(self):
        cfg = MaskConfig(total_rate=0.6, discrete_ratio=0.4)
        for seed in range(20):
            hm = generate_mask(96, cfg, seed=seed)
            cont, disc = set(hm.continuous_positions), set(hm.discrete_positions)
            assert not cont & disc
            assert sorted(cont | disc) == list(np.flatnonzero(hm.mask))

    def test_pure_continuous_run_lengths(self):
        cfg = MaskConfig(total_rate=0.5, discrete_ratio=0.0)
        for seed in range(50):
            hm = generate_mask(96, cfg, seed=seed)
            for run in _runs(hm.continuous_positions):
                assert cfg.run_length_min <= run <= cfg.run_length_max

    def test_determinism(self):
        cfg = MaskConfig(total_rate=0.3, discrete_ratio=0.5)
        a = generate_mask(96, cfg, seed=5)
        b = generate_mask(96, cfg, seed=5)
        assert np.array_equal(a.mask, b.mask)
        assert a.continuous_positions == b.continuous_positions

    def test_infeasible_budget_rejected(self):
        # 90 masked of 96 in runs of exactly [4,4] needs 23 runs + 22 gaps > 96
        cfg = MaskConfig(total_rate=0.9375, discrete_ratio=0.0, run_length_min=4, run_length_max=4)
        with pytest.raises(ValueError):
            generate_mask(96, cfg, seed=0)


def _runs(positions):
    runs, current = [], 0
    prev = None
    for p in positions:
        if prev is not None and p == prev + 1:
            current += 1
        else:
            if current:
                runs.append(current)
            current = 1
        prev = p
    if current:
        runs.append(current)
    return runs


class TestApplyMask:
    def test_empty_mask_identity(self):
        x = np.arange(5.0)
        assert np.array_equal(apply_mask(x, np.zeros(5), -1.0), x)

    def test_full_mask_constant(self):
        x = np.arange(5.0)
        assert np.all(apply_mask(x, np.ones(5), -1.0) == -1.0)

    def test_observed_positions_untouched(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(size=20)
        mask = (rng.uniform(size=20) < 0.4).astype(int)
        out = apply_mask(x, mask, -1.0)
        assert np.array_equal(out[mask == 0], x[mask == 0])
        assert np.all(out[mask == 1] == -1.0)


class TestSynthWind:
    def test_shapes_and_range(self):
        datasets = synth_wind(3, 8, t_len=48, seed=0)
        assert len(datasets) == 3
        for ds in datasets:
            assert ds.features.shape == (8, 48, 6)
            assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0

    def test_determinism(self):
        a = synth_wind(2, 4, t_len=24, seed=3)
        b = synth_wind(2, 4, t_len=24, seed=3)
        for da, db in zip(a, b):
            assert np.array_equal(da.features, db.features)

    def test_power_curve_floor_and_monotonicity(self):
        from ztfed.data import _CUT_IN, _RATED, _power_curve

        speeds = np.linspace(0, 30, 500)
        power = _power_curve(speeds)
        assert np.all(power[speeds < _CUT_IN] == 0.0)
        between = (speeds >= _CUT_IN) & (speeds <= _RATED)
        assert np.all(np.diff(power[between]) >= 0)

    def test_farms_differ(self):
        a, b = synth_wind(2, 4, t_len=24, seed=4)
        assert not np.array_equal(a.features, b.features)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = synth_wind(1, 4, t_len=24, seed=5)[0]
        path = tmp_path / "farm_00.csv"
        export_csv(ds, path)
        loaded = load_csv(path, t_len=24)
        assert loaded.features.shape == ds.features.shape
        assert np.allclose(loaded.features, ds.features, atol=1e-9)

    def test_windowing_arithmetic(self, tmp_path):
        path = tmp_path / "data.csv"
        rows = ["power,speed,direction,temperature,pressure,density"]
        rng = np.random.default_rng(6)
        for _ in range(192):
            rows.append(",".join(f"{v:.4f}" for v in rng.uniform(0, 10, 6)))
        path.write_text("\n".join(rows) + "\n")
        assert load_csv(path, t_len=96).samples == 2

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("power,speed,direction,temperature,pressure\n1,2,3,4,5\n")
        with pytest.raises(ValueError, match="density"):
            load_csv(path, t_len=1)

    def test_short_file_rejected(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("power,speed,direction,temperature,pressure,density\n1,2,3,4,5,6\n")
        with pytest.raises(ValueError, match="usable rows"):
            load_csv(path, t_len=96)

    def test_unparseable_rows_dropped_with_line_numbers(self, tmp_path, caplog):
        path = tmp_path / "dirty.csv"
        lines = ["power,speed,direction,temperature,pressure,density"]
        lines += ["1,2,3,4,5,6"] * 3
        lines.append("1,oops,3,4,5,6")
        lines.append("1,2,3,4,5,6")
        path.write_text("\n".join(lines) + "\n")
        with caplog.at_level("WARNING"):
            ds = load_csv(path, t_len=4)
        assert ds.samples == 1
        assert any("line" in r.message.lower() or "5" in r.message for r in caplog.records)

    def test_farm_id_from_filename(self, tmp_path):
        ds = synth_wind(1, 2, t_len=8, seed=7)[0]
        path = tmp_path / "farm_07.csv"
        export_csv(ds, path)
        assert load_csv(path, t_len=8).farm_id == 7


class TestSplitDataset:
    def test_80_10_10(self):
        ds = synth_wind(1, 100, t_len=8, seed=8)[0]
        train, val, test = split_dataset(ds, seed=1)
        assert (train.samples, val.samples, test.samples) == (80, 10, 10)

    def test_disjoint_cover(self):
        ds = synth_wind(1, 30, t_len=8, seed=9)[0]
        train, val, test = split_dataset(ds, seed=2)
        rows = np.concatenate([train.features, val.features, test.features])
        assert rows.shape[0] == 30
        # every original window appears exactly once
        original = {ds.features[i].tobytes() for i in range(30)}
        recombined = {rows[i].tobytes() for i in range(30)}
        assert original == recombined

    def test_determinism(self):
        ds = synth_wind(1, 30, t_len=8, seed=10)[0]
        a = split_dataset(ds, seed=3)
        b = split_dataset(ds, seed=3)
        for da, db in zip(a, b):
            assert np.array_equal(da.features, db.features)
