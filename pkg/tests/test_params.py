import numpy as np
import pytest

from ztfed.params import (
    LayerSpec,
    ModelParams,
    digest,
    flatten,
    l2_norm,
    params_add,
    params_scale,
    unflatten,
)

# canonical serialization is normative; this vector must never change
GOLDEN_DIGEST = "7afc11111bcb907db8a7f4ac33f7d3f09a6ccee37c2357df356c2f3134c22ef8"


def random_params(rng, n_layers=3, max_dim=6):
    layers = []
    for i in range(n_layers):
        shape = tuple(int(rng.integers(1, max_dim)) for _ in range(int(rng.integers(1, 3))))
        layers.append((LayerSpec(f"layer{i}", shape), rng.normal(size=shape)))
    return ModelParams(layers)


class TestConstruction:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ModelParams([(LayerSpec("w", (2, 2)), np.zeros(3))])

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            ModelParams([(LayerSpec("w", (2,)), np.array([1.0, np.nan]))])

    def test_inf_rejected(self):
        with pytest.raises(ValueError):
            ModelParams([(LayerSpec("w", (2,)), np.array([1.0, np.inf]))])

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ModelParams([(LayerSpec("w", (1,)), [1.0]), (LayerSpec("w", (1,)), [2.0])])

    def test_bad_shape_rejected(self):
        with pytest.raises(ValueError):
            LayerSpec("w", (0, 3))

    def test_arrays_immutable(self):
        p = ModelParams([(LayerSpec("w", (2,)), [1.0, 2.0])])
        with pytest.raises(ValueError):
            p.layers[0][1][0] = 9.0


class TestFlatten:
    def test_concatenation(self):
        p = ModelParams([(LayerSpec("a", (2,)), [1.0, 2.0]), (LayerSpec("b", (1,)), [3.0])])
        assert flatten(p).tolist() == [1.0, 2.0, 3.0]

    def test_empty(self):
        assert flatten(ModelParams([])).size == 0

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = random_params(rng)
            assert unflatten(flatten(p), p.specs) == p

    def test_unflatten_wrong_length(self):
        with pytest.raises(ValueError):
            unflatten(np.zeros(5), (LayerSpec("a", (2,)),))


class TestNorm:
    def test_three_four_five(self):
        p = ModelParams([(LayerSpec("a", (2,)), [3.0, 4.0])])
        assert l2_norm(p) == pytest.approx(5.0)

    def test_zero(self):
        assert l2_norm(ModelParams([(LayerSpec("a", (3,)), np.zeros(3))])) == 0.0

    def test_homogeneity(self):
        rng = np.random.default_rng(1)
        p = random_params(rng)
        assert l2_norm(params_scale(p, -2.5)) == pytest.approx(2.5 * l2_norm(p))

    def test_disjoint_concat_pythagoras(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=4)
        b = rng.normal(size=3)
        pa = ModelParams([(LayerSpec("a", (4,)), a)])
        pb = ModelParams([(LayerSpec("b", (3,)), b)])
        both = ModelParams([(LayerSpec("a", (4,)), a), (LayerSpec("b", (3,)), b)])
        assert l2_norm(both) ** 2 == pytest.approx(l2_norm(pa) ** 2 + l2_norm(pb) ** 2)


class TestDigest:
    def golden_params(self):
        return ModelParams(
            [
                (LayerSpec("w", (2, 2)), np.array([[1.0, -2.5], [0.125, 3.75]])),
                (LayerSpec("b", (3,)), np.array([0.0, 1e-3, -7.0])),
            ]
        )

    def test_golden_vector(self):
        assert digest(self.golden_params()).hex == GOLDEN_DIGEST

    def test_deterministic_on_copy(self):
        p = self.golden_params()
        q = ModelParams(list(p.layers))
        assert digest(p) == digest(q)

    def test_single_flip_changes_digest(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            p = random_params(rng)
            vec = flatten(p)
            i = int(rng.integers(vec.size))
            vec2 = vec.copy()
            vec2[i] = vec2[i] + 1.0
            assert digest(unflatten(vec2, p.specs)) != digest(p)

    def test_layer_order_matters(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = random_params(rng, n_layers=3)
            swapped = ModelParams([p.layers[1], p.layers[0], p.layers[2]])
            assert digest(swapped) != digest(p)


def test_params_add_layout_check():
    a = ModelParams([(LayerSpec("a", (2,)), [1.0, 2.0])])
    b = ModelParams([(LayerSpec("b", (2,)), [1.0, 2.0])])
    with pytest.raises(ValueError):
        params_add(a, b)
