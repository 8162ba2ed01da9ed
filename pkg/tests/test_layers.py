import math

import numpy as np
import pytest

from conftest import make_backend
from hecnn import layers as nn
from hecnn.errors import DepthExhausted
from hecnn.packing import CipherMatrix, ImageBatch, pack_batch, pack_kernel


def plain_conv(img, w):
    """Independent cross-correlation oracle, direct from the definition."""
    m, n = img.shape
    p, q = w.shape
    out = np.zeros((m - p + 1, n - q + 1))
    for i in range(m - p + 1):
        for j in range(n - q + 1):
            out[i, j] = float(np.sum(img[i : i + p, j : j + q] * w))
    return out


def enc_matrix(be, keys, img):
    return pack_batch(be, ImageBatch(images=img[None]), keys)


def dec_matrix(be, keys, grid):
    return np.array([[be.decrypt(c, keys).values[0] for c in row] for row in grid])


class TestConv:
    def test_identity_structured_kernel_frozen_values(self, any_backend):
        be, keys = any_backend
        img = np.arange(1, 10, dtype=np.float64).reshape(3, 3) / 10.0
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        # oracle on the unscaled grid: [[6, 8], [12, 14]] / 10
        assert np.array_equal(plain_conv(np.arange(1, 10.0).reshape(3, 3), w), [[6, 8], [12, 14]])
        cm = enc_matrix(be, keys, img)
        ck = pack_kernel(be, w, keys)
        out = dec_matrix(be, keys, nn.conv2d_enc(be, cm, ck))
        assert np.max(np.abs(out - np.array([[6, 8], [12, 14]]) / 10.0)) <= 1e-6

    def test_1x1_kernel_scales_in_place(self, any_backend):
        be, keys = any_backend
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (3, 4))
        cm = enc_matrix(be, keys, img)
        ck = pack_kernel(be, np.array([[0.5]]), keys)
        out = dec_matrix(be, keys, nn.conv2d_enc(be, cm, ck))
        assert out.shape == (3, 4)
        assert np.max(np.abs(out - img * 0.5)) <= 1e-6

    def test_random_conv_matches_oracle(self, any_backend):
        be, keys = any_backend
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (5, 6))
        w = rng.uniform(-0.5, 0.5, (3, 3))
        cm = enc_matrix(be, keys, img)
        ck = pack_kernel(be, w, keys)
        out = dec_matrix(be, keys, nn.conv2d_enc(be, cm, ck))
        assert np.max(np.abs(out - plain_conv(img, w))) <= 1e-6

    def test_consumes_exactly_one_level(self, any_backend):
        be, keys = any_backend
        cm = enc_matrix(be, keys, np.ones((3, 3)) * 0.5)
        ck = pack_kernel(be, np.ones((2, 2)) * 0.1, keys)
        rows = nn.conv2d_enc(be, cm, ck)
        assert rows[0][0].level == cm.level - 1

    def test_mnist_scale_multiplication_count(self):
        # 28x28 input, one 3x3 filter: 26*26*9 = 6084 CT-CT multiplies
        be = make_backend("ref", m=2**8)
        keys = be.keygen()
        be.set_eval_key(keys)
        cm = pack_batch(be, ImageBatch(images=np.zeros((1, 28, 28))), keys)
        ck = pack_kernel(be, np.zeros((3, 3)), keys)
        be.counters.reset()
        nn.conv2d_enc(be, cm, ck)
        snap = be.counters.snapshot()
        assert snap.ctct_mult == 6084
        assert snap.ctct_add == 26 * 26 * 8

    def test_dimension_mismatch_rejected(self, any_backend):
        be, keys = any_backend
        cm = enc_matrix(be, keys, np.ones((2, 2)))
        ck = pack_kernel(be, np.ones((3, 3)), keys)
        with pytest.raises(ValueError):
            nn.conv2d_enc(be, cm, ck)


class TestActivation:
    @pytest.mark.parametrize(
        "value,expected",
        [
            (0.0, 0.47),
            (1.0, 1.06),
            (-math.sqrt(2.0), 0.47 - 0.50 * math.sqrt(2.0) + 0.18),
        ],
    )
    def test_reference_points_at_unit_scale(self, any_backend, value, expected):
        be, keys = any_backend
        act = nn.PolyActivation()
        assert abs(act.apply(value) - expected) <= 1e-9
        cm = enc_matrix(be, keys, np.full((1, 1), value))
        out = dec_matrix(be, keys, nn.approx_relu(be, cm, act).grid)
        assert abs(out[0, 0] - expected) <= 1e-3

    def test_folding_identity_for_prescaled_inputs(self, any_backend):
        # s*g(y/s) at y=2, s=2 equals 2*g(1) = 2.12
        be, keys = any_backend
        act = nn.PolyActivation(input_scale=2.0)
        assert abs(act.apply(2.0) - 2.12) <= 1e-9
        cm = enc_matrix(be, keys, np.full((1, 1), 2.0))
        out = dec_matrix(be, keys, nn.approx_relu(be, cm, act).grid)
        assert abs(out[0, 0] - 2.12) <= 1e-3

    def test_output_returns_to_canonical_scale(self, any_backend):
        be, keys = any_backend
        cm = enc_matrix(be, keys, np.full((2, 2), 0.3))
        conv = nn.conv2d_enc(be, cm, pack_kernel(be, np.full((1, 1), 0.7), keys))
        x = CipherMatrix(grid=conv, batch=1)
        assert x.scale != be.canonical_scale
        out = nn.approx_relu(be, x, nn.PolyActivation())
        assert out.scale == be.canonical_scale
        assert out.level == x.level - 2

    def test_needs_two_levels(self, any_backend):
        be, keys = any_backend
        cm = enc_matrix(be, keys, np.full((1, 1), 0.5))
        low = CipherMatrix(
            grid=[[be.drop_to_level(cm.grid[0][0], 1)]], batch=1
        )
        with pytest.raises(DepthExhausted):
            nn.approx_relu(be, low, nn.PolyActivation())

    def test_invalid_input_scale_rejected(self):
        with pytest.raises(ValueError):
            nn.PolyActivation(input_scale=0.0)


class TestActPool:
    def test_constant_window_equals_single_activation(self, any_backend):
        be, keys = any_backend
        a = 0.37
        act = nn.PolyActivation()
        cm = enc_matrix(be, keys, np.full((2, 2), a))
        out = dec_matrix(be, keys, nn.act_pool(be, cm, act).grid)
        assert abs(out[0, 0] - act.apply(a)) <= 1e-3

    def test_mixed_window_frozen_value(self, any_backend):
        be, keys = any_backend
        img = np.array([[1.0, 0.0], [1.0, 0.0]])
        cm = enc_matrix(be, keys, img)
        out = dec_matrix(be, keys, nn.act_pool(be, cm, nn.PolyActivation()).grid)
        assert abs(out[0, 0] - (1.06 + 1.06 + 0.47 + 0.47) / 4.0) <= 1e-3

    def test_halves_dimensions(self):
        be = make_backend("ref", m=2**8)
        keys = be.keygen()
        be.set_eval_key(keys)
        cm = pack_batch(be, ImageBatch(images=np.random.default_rng(0).uniform(0, 1, (1, 26, 26))), keys)
        out = nn.act_pool(be, cm, nn.PolyActivation())
        assert out.dims == (13, 13)

    def test_odd_dims_rejected(self, any_backend):
        be, keys = any_backend
        cm = enc_matrix(be, keys, np.ones((3, 2)))
        with pytest.raises(ValueError):
            nn.act_pool(be, cm, nn.PolyActivation())

    def test_symmetry_property_over_random_points(self):
        # f(a,a,a,a) = g(a) across the valid interval
        act = nn.PolyActivation()
        rng = np.random.default_rng(7)
        for a in rng.uniform(-math.sqrt(2), math.sqrt(2), 100):
            window = sum(act.apply(a, pool_divisor=4.0) for _ in range(4))
            assert abs(window - act.apply(a)) <= 1e-12


class TestFlatten:
    def _maps(self, be, keys, i_dim, j_dim, filters):
        rng = np.random.default_rng(0)
        return [
            pack_batch(be, ImageBatch(images=rng.uniform(0, 1, (1, i_dim, j_dim))), keys)
            for _ in range(filters)
        ]

    def test_mnist_scale_flatten_length(self):
        be = make_backend("ref", m=2**8)
        keys = be.keygen()
        maps = self._maps(be, keys, 13, 13, 28)
        assert len(nn.flatten(maps)) == 4732

    def test_identity_on_degenerate_map(self, any_backend):
        be, keys = any_backend
        maps = self._maps(be, keys, 1, 1, 1)
        flat = nn.flatten(maps)
        assert len(flat) == 1
        assert flat[0] is maps[0].grid[0][0]

    def test_marker_position_formula(self):
        be = make_backend("ref", m=2**8)
        keys = be.keygen()
        maps = self._maps(be, keys, 13, 13, 28)
        marker = maps[3].grid[2][5]
        flat = nn.flatten(maps)
        assert nn.flat_index(2, 5, 3, j_dim=13, filters=28) == 871
        assert flat[871] is marker

    def test_ragged_maps_rejected(self, any_backend):
        be, keys = any_backend
        a = self._maps(be, keys, 2, 2, 1)[0]
        b = self._maps(be, keys, 2, 3, 1)[0]
        with pytest.raises(ValueError):
            nn.flatten([a, b])


class TestDense:
    def _enc_list(self, be, keys, values):
        return [be.encrypt(np.full(be.slots, float(v)), keys) for v in values]

    def test_dot_product_oracle(self, any_backend):
        be, keys = any_backend
        x = self._enc_list(be, keys, [1.0, 2.0, 3.0])
        w = [self._enc_list(be, keys, [c])[0:1] for c in [1.0, 0.0, -1.0]]
        out = nn.dense_enc(be, x, w, bias=None)
        got = be.decrypt(out[0], keys).values[0]
        assert abs(got - (-2.0)) <= 1e-5

    def test_identity_weights_pass_through_plus_bias(self, any_backend):
        be, keys = any_backend
        x = self._enc_list(be, keys, [0.3, 0.6])
        eye = [
            [self._enc_list(be, keys, [1.0 if i == r else 0.0])[0] for r in range(2)]
            for i in range(2)
        ]
        # bias must sit at the dense output scale to add cleanly
        lvl = x[0].level
        out_scale = x[0].scale * be.canonical_scale / be.chain.level_primes[lvl - 1]
        bias = [be.encrypt(np.full(be.slots, 0.1), keys, scale=out_scale) for _ in range(2)]
        out = nn.dense_enc(be, x, eye, bias=bias)
        got = [be.decrypt(c, keys).values[0] for c in out]
        assert np.max(np.abs(np.array(got) - [0.4, 0.7])) <= 1e-5

    def test_mnist_scale_multiplication_count(self):
        be = make_backend("ref", m=2**8)
        keys = be.keygen()
        be.set_eval_key(keys)
        x = [be.encrypt(np.zeros(be.slots), keys) for _ in range(4732)]
        w_col = [be.encrypt(np.zeros(be.slots), keys) for _ in range(4732)]
        w = [[w_col[i]] * 10 for i in range(4732)]
        be.counters.reset()
        nn.dense_enc(be, x, w, bias=None)
        assert be.counters.snapshot().ctct_mult == 47320

    def test_dimension_mismatch_rejected(self, any_backend):
        be, keys = any_backend
        x = self._enc_list(be, keys, [1.0, 2.0])
        w = [self._enc_list(be, keys, [1.0])]
        with pytest.raises(ValueError):
            nn.dense_enc(be, x, w)

    def test_consumes_exactly_one_level(self, any_backend):
        be, keys = any_backend
        x = self._enc_list(be, keys, [1.0, 2.0])
        w = [[self._enc_list(be, keys, [0.5])[0]], [self._enc_list(be, keys, [0.5])[0]]]
        out = nn.dense_enc(be, x, w)
        assert out[0].level == x[0].level - 1
