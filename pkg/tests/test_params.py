import pytest

from hecnn.params import (
    HEParams,
    NoMultiplicationWarning,
    check_security_gate,
    derive_params,
    security_estimate,
)


class TestDeriveParams:
    def test_large_ring_slot_count(self):
        p = derive_params(2**16, 600, 35)
        assert p.ring_degree == 32768
        assert p.slots == 16384

    def test_minimal_ring(self):
        p = derive_params(16, 200, 20)
        assert p.ring_degree == 8
        assert p.slots == 4

    def test_mid_ring(self):
        p = derive_params(2**14, 500, 30)
        assert p.slots == 4096

    @pytest.mark.parametrize("bad_m", [15, 24, 8, 0, 100])
    def test_rejects_bad_m(self, bad_m):
        with pytest.raises(ValueError):
            derive_params(bad_m, 300, 30)

    @pytest.mark.parametrize("bad_r", [19, 51, 0])
    def test_rejects_precision_out_of_range(self, bad_r):
        with pytest.raises(ValueError):
            derive_params(2**12, 300, bad_r)

    def test_small_modulus_warns_not_errors(self):
        with pytest.warns(NoMultiplicationWarning):
            p = derive_params(2**12, 150, 30)
        assert p.modulus_bits == 150

    def test_fingerprint_depends_on_seed(self):
        a = derive_params(2**12, 300, 30, seed=1)
        b = derive_params(2**12, 300, 30, seed=2)
        c = derive_params(2**12, 300, 30, seed=1)
        assert a.fingerprint == c.fingerprint
        assert a.fingerprint != b.fingerprint


class TestSecurityEstimate:
    def test_reference_configuration_meets_target(self):
        est = security_estimate(derive_params(2**16, 600, 35))
        assert est.meets_target
        assert est.lam >= 128

    def test_oversized_modulus_fails(self):
        est = security_estimate(derive_params(2**16, 900, 35))
        assert not est.meets_target
        assert est.lam < 128

    def test_smaller_ring_same_modulus_fails(self):
        est = security_estimate(derive_params(2**15, 600, 35))
        assert est.known_degree
        assert not est.meets_target

    def test_unknown_degree_is_never_a_silent_pass(self):
        est = security_estimate(derive_params(2**10, 270, 35))
        assert not est.known_degree
        assert est.verdict == "unknown"
        assert not est.meets_target

    def test_monotone_in_modulus(self):
        lams = []
        for l_bits in (400, 600, 800, 900, 1200):
            est = security_estimate(derive_params(2**16, l_bits, 35))
            lams.append(est.lam)
        assert all(a >= b for a, b in zip(lams, lams[1:]))

    def test_monotone_in_ring_degree(self):
        lams = []
        for m in (2**12, 2**13, 2**14, 2**15, 2**16):
            est = security_estimate(derive_params(m, 600, 35))
            lams.append(est.lam)
        assert all(a <= b for a, b in zip(lams, lams[1:]))

    def test_gate_blocks_insecure_without_flag(self):
        params = derive_params(2**12, 600, 35)
        with pytest.raises(ValueError, match="allow-insecure"):
            check_security_gate(params, allow_insecure=False)
        check_security_gate(params, allow_insecure=True)
