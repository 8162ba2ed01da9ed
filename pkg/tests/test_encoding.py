import numpy as np
import pytest

from hecnn.backends.chain import build_chain
from hecnn.backends.ckks import CkksBackend
from hecnn.backends.encoding import coeffs_from_slots, slots_from_coeffs
from hecnn.errors import EncodeOverflow
from hecnn.params import derive_params


def test_zero_vector_roundtrips_exactly():
    n = 256
    c = np.round(coeffs_from_slots(np.zeros(n // 2), 2.0**35, n))
    assert np.all(c == 0)
    assert np.all(slots_from_coeffs(c, 2.0**35, n) == 0)


def test_many_random_roundtrips_within_tolerance():
    # encode/decode error stays below 1e-6 at 35-bit precision
    n = 2**11
    scale = 2.0**35
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        v = rng.uniform(-1.0, 1.0, n // 2)
        c = np.round(coeffs_from_slots(v, scale, n))
        worst = max(worst, float(np.max(np.abs(slots_from_coeffs(c, scale, n) - v))))
    assert worst <= 1e-6


def test_roundtrip_at_large_ring():
    n = 2**15
    scale = 2.0**35
    rng = np.random.default_rng(1)
    for _ in range(3):
        v = rng.uniform(-1.0, 1.0, n // 2)
        c = np.round(coeffs_from_slots(v, scale, n))
        assert np.max(np.abs(slots_from_coeffs(c, scale, n) - v)) <= 1e-6


def test_slotwise_product_matches_negacyclic_ring_product():
    n = 128
    scale = 2.0**30
    rng = np.random.default_rng(2)
    v1 = rng.uniform(-1, 1, n // 2)
    v2 = rng.uniform(-1, 1, n // 2)
    c1 = np.round(coeffs_from_slots(v1, scale, n))
    c2 = np.round(coeffs_from_slots(v2, scale, n))
    full = np.convolve(c1, c2)
    neg = full[:n].copy()
    neg[: n - 1] -= full[n:]
    prod = slots_from_coeffs(neg, scale * scale, n)
    assert np.max(np.abs(prod - v1 * v2)) < 1e-6


class TestEncodeOverflow:
    def test_scale_beyond_base_prime_raises(self):
        backend = CkksBackend(derive_params(2**10, 270, 35))
        with pytest.raises(EncodeOverflow):
            backend._encode_coeffs(np.ones(backend.slots), scale=2**70, level=0)

    def test_normal_scale_is_fine_at_level_zero(self):
        backend = CkksBackend(derive_params(2**10, 270, 35))
        coeffs = backend._encode_coeffs(np.ones(backend.slots) * 0.5, scale=2**35, level=0)
        assert coeffs.dtype == np.int64

    def test_headroom_grows_with_level(self):
        backend = CkksBackend(derive_params(2**10, 270, 35))
        chain = build_chain(backend.params)
        big = 2 ** (chain.base_prime.bit_length() + 1)  # above q0/2, within int64
        with pytest.raises(EncodeOverflow):
            backend._encode_coeffs(np.ones(backend.slots), scale=big, level=0)
        backend._encode_coeffs(np.ones(backend.slots), scale=big, level=backend.fresh_level)
