"""Dual-route check of key switching: relinearized results must agree with
direct degree-2 decryption (c0 + c1*s + c2*s^2 under the secret key), which
never touches the evaluation key.  Any systematic error introduced by the
digit decomposition, the special-prime mod-down, or rescaling would split
the two routes apart.
"""

import numpy as np
import pytest

from conftest import make_backend
from hecnn.backends import kernels
from hecnn.backends.encoding import slots_from_coeffs


def degree2_decrypt(be, raw, secret):
    """Decrypt a degree-2 product directly: d0 + d1*s + d2*s^2.

    Coefficients at the product scale exceed any single residue, so this
    reconstructs them exactly by CRT over the active primes (big-int, slow,
    test-only) before decoding.
    """
    ch = be.chain
    k = raw.level + 1
    s = secret.s_eval[:k]
    p, p_inv = ch.p[:k], ch.p_inv[:k]
    acc = raw.payload.d0.copy()
    t = np.empty_like(acc)
    kernels.mul_rows(raw.payload.d1, s, p, p_inv, t)
    kernels.add_rows(acc, t, p, acc)
    kernels.mul_rows(raw.payload.d2, s, p, p_inv, t)
    kernels.mul_rows(t, s, p, p_inv, t)
    kernels.add_rows(acc, t, p, acc)
    kernels.ntt_inv_rows(acc, ch.twiddles[:k], ch.n_inv[:k], p, p_inv)
    kernels.from_mont_rows(acc, p, p_inv)

    primes = [int(q) for q in p]
    modulus = 1
    for q in primes:
        modulus *= q
    basis = []
    for i, q in enumerate(primes):
        others = modulus // q
        basis.append(others * pow(others, -1, q))
    coeffs = np.empty(be.n, dtype=np.float64)
    half = modulus // 2
    for j in range(be.n):
        val = sum(int(acc[i, j]) * basis[i] for i in range(k)) % modulus
        if val > half:
            val -= modulus
        coeffs[j] = float(val)
    return slots_from_coeffs(coeffs, float(raw.scale), be.n)


@pytest.mark.parametrize("level_drops", [0, 1, 2])
def test_relinearized_matches_direct_degree2_decryption(level_drops):
    be = make_backend("ckks", m=2**11, l_bits=300, r=35, seed=9)
    keys = be.keygen()
    be.set_eval_key(keys)
    rng = np.random.default_rng(level_drops)
    va = rng.uniform(-1, 1, be.slots)
    vb = rng.uniform(-1, 1, be.slots)
    a = be.encrypt(va, keys, entropy=1)
    b = be.encrypt(vb, keys, entropy=2)
    for _ in range(level_drops):
        a = be.drop_to_level(a, a.level - 1)
        b = be.drop_to_level(b, b.level - 1)

    raw = be.mul_ct_ct_raw(a, b)
    direct = degree2_decrypt(be, raw, keys.secret)
    relin = be.decrypt(be.raw_finalize(raw), keys).values

    assert np.max(np.abs(direct - va * vb)) <= 1e-6
    assert np.max(np.abs(relin - direct)) <= 1e-6


def test_relinearization_of_accumulated_sum():
    be = make_backend("ckks", m=2**11, l_bits=300, r=35, seed=10)
    keys = be.keygen()
    be.set_eval_key(keys)
    rng = np.random.default_rng(3)
    xs = [rng.uniform(-1, 1, be.slots) for _ in range(9)]
    ys = [rng.uniform(-1, 1, be.slots) for _ in range(9)]
    cxs = [be.encrypt(v, keys, entropy=100 + i) for i, v in enumerate(xs)]
    cys = [be.encrypt(v, keys, entropy=200 + i) for i, v in enumerate(ys)]
    acc = be.mul_ct_ct_raw(cxs[0], cys[0])
    for i in range(1, 9):
        acc = be.raw_add(acc, be.mul_ct_ct_raw(cxs[i], cys[i]))
    direct = degree2_decrypt(be, acc, keys.secret)
    relin = be.decrypt(be.raw_finalize(acc), keys).values
    expect = np.sum([x * y for x, y in zip(xs, ys)], axis=0)
    assert np.max(np.abs(direct - expect)) <= 1e-5
    assert np.max(np.abs(relin - direct)) <= 1e-5
