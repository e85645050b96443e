import math
from dataclasses import dataclass

import numpy as np
import pytest

from ztfed.evaluation import (
    AttackConfig,
    MiaConfig,
    build_mia_batches,
    communication_overhead,
    imputation_metrics,
    mean_imputation_baseline,
    mia_evaluate,
    sensitivity,
    sign_flip,
    utility,
)
from ztfed.model import Mas2sConfig, SeqBatch, init_params
from ztfed.params import LayerSpec, ModelParams, flatten


def vec_params(v):
    v = np.asarray(v, dtype=float)
    return ModelParams([(LayerSpec("w", v.shape), v)])


class TestSignFlip:
    def test_zero_fraction_identity(self):
        p = vec_params([1.0, -2.0, 3.0])
        assert sign_flip(p, 0.0, np.random.default_rng(0)) == p

    def test_full_fraction_negation(self):
        p = vec_params([1.0, -2.0, 3.0])
        flipped = sign_flip(p, 1.0, np.random.default_rng(0))
        assert np.array_equal(flatten(flipped), [-1.0, 2.0, -3.0])

    def test_flip_count_exact(self):
        rng = np.random.default_rng(1)
        p = vec_params(rng.uniform(1, 2, size=100))
        for frac in (0.1, 0.25, 0.5, 0.8):
            flipped = sign_flip(p, frac, np.random.default_rng(2))
            changed = int((flatten(flipped) != flatten(p)).sum())
            assert changed == round(frac * 100)

    def test_involution_at_one(self):
        rng = np.random.default_rng(3)
        p = vec_params(rng.normal(size=50))
        twice = sign_flip(sign_flip(p, 1.0, rng), 1.0, rng)
        assert twice == p

    def test_norm_preserved(self):
        rng = np.random.default_rng(4)
        p = vec_params(rng.normal(size=64))
        flipped = sign_flip(p, 0.2, rng)
        assert np.linalg.norm(flatten(flipped)) == pytest.approx(np.linalg.norm(flatten(p)))


class TestImputationMetrics:
    def test_perfect(self):
        y = np.array([1.0, 2.0, 3.0])
        mask = np.array([1, 1, 0])
        assert imputation_metrics(y, y, mask) == (0.0, 0.0, 0.0)

    def test_maape_double(self):
        y = np.array([2.0, 4.0])
        pred = 2 * y
        _, _, maape = imputation_metrics(pred, y, np.array([1, 1]))
        assert maape == pytest.approx(math.pi / 4)

    def test_zero_truth_convention(self):
        y = np.array([0.0])
        _, _, maape = imputation_metrics(np.array([0.5]), y, np.array([1]))
        assert maape == pytest.approx(math.pi / 2)

    def test_only_missing_positions_scored(self):
        y = np.array([1.0, 1.0])
        pred = np.array([1.0, 9.0])
        mae, _, _ = imputation_metrics(pred, y, np.array([1, 0]))
        assert mae == 0.0

    def test_mae_bounded_by_rmse(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            y = rng.normal(size=30)
            pred = y + rng.normal(size=30)
            mae, rmse, _ = imputation_metrics(pred, y, np.ones(30, dtype=int))
            assert mae <= rmse + 1e-12

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            imputation_metrics(np.ones(3), np.ones(3), np.zeros(3))


class TestSensitivity:
    def test_constant_rmse_zero(self):
        assert sensitivity([0.2, 0.5, 0.7], [1.0, 1.0, 1.0]) == 0.0

    def test_linear_slope_two(self):
        xs = [0.1, 0.4, 0.9]
        assert sensitivity(xs, [2 * x for x in xs]) == pytest.approx(2.0, abs=1e-12)

    def test_shift_invariance(self):
        xs = [0.2, 0.5, 0.7, 0.9]
        rmses = [0.03, 0.05, 0.04, 0.08]
        shifted = [r + 0.77 for r in rmses]
        assert sensitivity(xs, rmses) == pytest.approx(sensitivity(xs, shifted))

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            sensitivity([0.5, 0.5], [1.0, 2.0])


class TestMia:
    def batch_from_losses(self, rng, n, t=4):
        # craft inputs so targets are irrelevant: model unused in these tests
        x = rng.uniform(0, 1, size=(n, t, 3))
        x[:, :, -1] = 0.0
        y = rng.uniform(0, 1, size=(n, t))
        return SeqBatch(inputs=x, targets=y)

    def test_separable_case_100(self):
        cfg = Mas2sConfig(input_features=3, hidden_size=4, heads=1, key_dim=2, sequence_length=4)
        params = init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        members = self.batch_from_losses(rng, 10)
        nonmembers = self.batch_from_losses(rng, 10)
        # members: targets equal to the model output -> zero loss
        from ztfed.model import forward

        y_m, _ = forward(members.inputs, params, cfg)
        members = SeqBatch(inputs=members.inputs, targets=y_m)
        # nonmembers: targets far away -> loss ~ 5
        y_n, _ = forward(nonmembers.inputs, params, cfg)
        nonmembers = SeqBatch(inputs=nonmembers.inputs, targets=y_n + 5.0)
        sr, tau = mia_evaluate(params, cfg, members, nonmembers, MiaConfig(member_count=10, nonmember_count=10))
        assert sr == 100.0
        assert 0.0 < tau < 5.0

    def test_identical_distributions_near_chance(self):
        cfg = Mas2sConfig(input_features=3, hidden_size=4, heads=1, key_dim=2, sequence_length=4)
        params = init_params(cfg, np.random.default_rng(2))
        rates = []
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            members = self.batch_from_losses(rng, 100)
            nonmembers = self.batch_from_losses(rng, 100)
            sr, _ = mia_evaluate(params, cfg, members, nonmembers, MiaConfig(member_count=100, nonmember_count=100))
            rates.append(sr)
        assert abs(np.mean(rates) - 50.0) <= 8.0

    def test_range(self):
        cfg = Mas2sConfig(input_features=3, hidden_size=4, heads=1, key_dim=2, sequence_length=4)
        params = init_params(cfg, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        sr, _ = mia_evaluate(
            params, cfg, self.batch_from_losses(rng, 20), self.batch_from_losses(rng, 20),
            MiaConfig(member_count=20, nonmember_count=20),
        )
        assert 0.0 <= sr <= 100.0

    def test_swept_at_least_fixed(self):
        cfg = Mas2sConfig(input_features=3, hidden_size=4, heads=1, key_dim=2, sequence_length=4)
        params = init_params(cfg, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        members = self.batch_from_losses(rng, 30)
        nonmembers = self.batch_from_losses(rng, 30)
        swept, _ = mia_evaluate(params, cfg, members, nonmembers, MiaConfig(member_count=30, nonmember_count=30))
        for tau in (0.0, 0.1, 0.5, 1.0, 10.0):
            fixed, _ = mia_evaluate(
                params, cfg, members, nonmembers,
                MiaConfig(member_count=30, nonmember_count=30, strategy="fixed", fixed_threshold=tau),
            )
            assert swept >= fixed


class TestUtility:
    def test_self_is_100(self):
        assert utility(0.138, 0.138) == pytest.approx(100.0)

    def test_hand_value(self):
        assert utility(0.5, 0.0) == pytest.approx(50.0)


@dataclass
class FakeRecord:
    upload_bytes: dict
    download_bytes: int
    client_count: int


class TestCommunicationOverhead:
    def test_zero_rounds(self):
        assert communication_overhead([]) == 0.0

    def test_hand_count(self):
        rec = FakeRecord(upload_bytes={0: 1000, 1: 500}, download_bytes=200, client_count=4)
        # 1500 + 4*200 = 2300 bytes
        assert communication_overhead([rec]) == pytest.approx(2300 / 2**20)

    def test_linear_in_rounds(self):
        rec = FakeRecord(upload_bytes={0: 100}, download_bytes=50, client_count=2)
        assert communication_overhead([rec, rec]) == pytest.approx(2 * communication_overhead([rec]))


class TestMeanBaseline:
    def test_fills_with_observed_mean(self):
        series = np.array([1.0, 2.0, 3.0, 100.0])
        mask = np.array([0, 0, 0, 1])
        out = mean_imputation_baseline(series, mask)
        assert out[3] == pytest.approx(2.0)
        assert np.array_equal(out[:3], series[:3])

    def test_batch_shape(self):
        series = np.ones((3, 5))
        mask = np.zeros((3, 5), dtype=int)
        assert mean_imputation_baseline(series, mask).shape == (3, 5)


def test_build_mia_batches_counts():
    rng = np.random.default_rng(7)

    @dataclass
    class FakeClient:
        train: SeqBatch
        test: SeqBatch

    def mk(n):
        x = rng.uniform(0, 1, size=(n, 4, 3))
        x[:, :, -1] = 0.0
        return SeqBatch(inputs=x, targets=rng.uniform(0, 1, size=(n, 4)))

    data = [FakeClient(train=mk(10), test=mk(5)) for _ in range(3)]
    members, nonmembers = build_mia_batches(data, MiaConfig(member_count=12, nonmember_count=9))
    assert len(members) == 12
    assert len(nonmembers) == 9


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(anomaly_rate=1.5)
    with pytest.raises(ValueError):
        MiaConfig(member_count=0)
