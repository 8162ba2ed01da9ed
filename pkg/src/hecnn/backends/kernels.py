"""Numba kernels for exact residue arithmetic over NTT-friendly primes.

All residues live in Montgomery form (R = 2**64) as uint64 arrays; primes are
capped below 2**62 so Montgomery reduction needs a single conditional
subtraction.  Ring elements are stacked one row per prime; kernels loop rows
internally to keep Python dispatch off the hot path.  Every kernel is
compiled with ``nogil`` so executor threads overlap.

The NTT pair is the negacyclic (x^n + 1) transform with the 2n-th root
merged into a bit-reversed twiddle table; the inverse walks the same table
backwards.  Forward output is in bit-reversed order, which is irrelevant
here because slots are only ever combined pointwise.
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint64, int64

U32_MASK = uint64(0xFFFFFFFF)
U64_BITS = uint64(32)


@njit(nogil=True, inline="always", cache=True)
def _mulhi(a, b):
    """High 64 bits of the 128-bit product a*b (a, b uint64)."""
    a_lo = a & U32_MASK
    a_hi = a >> U64_BITS
    b_lo = b & U32_MASK
    b_hi = b >> U64_BITS
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    mid = (ll >> U64_BITS) + (lh & U32_MASK) + (hl & U32_MASK)
    return a_hi * b_hi + (lh >> U64_BITS) + (hl >> U64_BITS) + (mid >> U64_BITS)


@njit(nogil=True, inline="always", cache=True)
def _mont_mul(x, y, p, p_inv):
    """Montgomery product x*y*R^-1 mod p; operands reduced, p < 2**62."""
    lo = x * y
    hi = _mulhi(x, y)
    m = lo * p_inv
    t = hi + _mulhi(m, p)
    if lo != uint64(0):
        t += uint64(1)
    if t >= p:
        t -= p
    return t


@njit(nogil=True, inline="always", cache=True)
def _addmod(x, y, p):
    s = x + y
    if s >= p:
        s -= p
    return s


@njit(nogil=True, inline="always", cache=True)
def _submod(x, y, p):
    d = x + p - y
    if d >= p:
        d -= p
    return d


@njit(nogil=True, cache=True)
def ntt_fwd_rows(f, tw, p, p_inv):
    """In-place forward negacyclic NTT of every row of f (rows, n)."""
    rows, n = f.shape
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        l = n >> 1
        wi = 0
        while l > 0:
            i = 0
            while i < n:
                wi += 1
                z = tw[r, wi]
                for j in range(i, i + l):
                    x = f[r, j]
                    y = _mont_mul(f[r, j + l], z, pr, pir)
                    f[r, j] = _addmod(x, y, pr)
                    f[r, j + l] = _submod(x, y, pr)
                i += l << 1
            l >>= 1


@njit(nogil=True, cache=True)
def ntt_inv_rows(f, tw, n_inv, p, p_inv):
    """In-place inverse negacyclic NTT of every row of f (rows, n)."""
    rows, n = f.shape
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        l = 1
        wi = n
        while l < n:
            i = 0
            while i < n:
                wi -= 1
                z = tw[r, wi]
                for j in range(i, i + l):
                    x = f[r, j]
                    y = f[r, j + l]
                    f[r, j] = _addmod(x, y, pr)
                    f[r, j + l] = _mont_mul(_submod(y, x, pr), z, pr, pir)
                i += l << 1
            l <<= 1
        sc = n_inv[r]
        for j in range(n):
            f[r, j] = _mont_mul(f[r, j], sc, pr, pir)


@njit(nogil=True, cache=True)
def add_rows(a, b, p, out):
    rows, n = a.shape
    for r in range(rows):
        pr = p[r]
        for j in range(n):
            out[r, j] = _addmod(a[r, j], b[r, j], pr)


@njit(nogil=True, cache=True)
def sub_rows(a, b, p, out):
    rows, n = a.shape
    for r in range(rows):
        pr = p[r]
        for j in range(n):
            out[r, j] = _submod(a[r, j], b[r, j], pr)


@njit(nogil=True, cache=True)
def neg_rows(a, p, out):
    rows, n = a.shape
    for r in range(rows):
        pr = p[r]
        for j in range(n):
            x = a[r, j]
            out[r, j] = uint64(0) if x == uint64(0) else pr - x


@njit(nogil=True, cache=True)
def mul_rows(a, b, p, p_inv, out):
    rows, n = a.shape
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        for j in range(n):
            out[r, j] = _mont_mul(a[r, j], b[r, j], pr, pir)


@njit(nogil=True, cache=True)
def mul_acc_rows(a, b, p, p_inv, acc):
    """acc += a * b, all in Montgomery form."""
    rows, n = a.shape
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        for j in range(n):
            acc[r, j] = _addmod(acc[r, j], _mont_mul(a[r, j], b[r, j], pr, pir), pr)


@njit(nogil=True, cache=True)
def scalar_mul_rows(a, c, p, p_inv, out):
    """out = a * c[r] with a per-row Montgomery constant c."""
    rows, n = a.shape
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        cr = c[r]
        for j in range(n):
            out[r, j] = _mont_mul(a[r, j], cr, pr, pir)


@njit(nogil=True, cache=True)
def to_mont_rows(a, r2, p, p_inv):
    rows, n = a.shape
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        c = r2[r]
        for j in range(n):
            a[r, j] = _mont_mul(a[r, j], c, pr, pir)


@njit(nogil=True, cache=True)
def from_mont_rows(a, p, p_inv):
    rows, n = a.shape
    one = uint64(1)
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        for j in range(n):
            a[r, j] = _mont_mul(a[r, j], one, pr, pir)


@njit(nogil=True, cache=True)
def centered_rows(a, p, out):
    """Standard-form rows -> centered signed representatives in (-p/2, p/2]."""
    rows, n = a.shape
    for r in range(rows):
        pr = p[r]
        half = pr >> uint64(1)
        for j in range(n):
            x = a[r, j]
            if x > half:
                out[r, j] = int64(x) - int64(pr)
            else:
                out[r, j] = int64(x)


@njit(nogil=True, cache=True)
def spread_centered(coeffs, p, r2, p_inv, out):
    """Reduce centered int64 coefficients into Montgomery rows per prime."""
    rows = p.shape[0]
    n = coeffs.shape[0]
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        c = r2[r]
        pr_i = int64(pr)
        for j in range(n):
            v = coeffs[j] % pr_i  # numba follows Python mod: result in [0, pr)
            out[r, j] = _mont_mul(uint64(v), c, pr, pir)


@njit(nogil=True, cache=True)
def ctct_products(a0, a1, b0, b1, p, p_inv, d0, d1, d2):
    """Degree-2 ciphertext product: (d0, d1, d2) = (a0b0, a0b1+a1b0, a1b1)."""
    rows, n = a0.shape
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        for j in range(n):
            x0 = a0[r, j]
            x1 = a1[r, j]
            y0 = b0[r, j]
            y1 = b1[r, j]
            d0[r, j] = _mont_mul(x0, y0, pr, pir)
            d1[r, j] = _addmod(
                _mont_mul(x0, y1, pr, pir), _mont_mul(x1, y0, pr, pir), pr
            )
            d2[r, j] = _mont_mul(x1, y1, pr, pir)


@njit(nogil=True, cache=True)
def ctct_products_acc(a0, a1, b0, b1, p, p_inv, d0, d1, d2):
    """Accumulating variant of :func:`ctct_products` for fused inner products."""
    rows, n = a0.shape
    for r in range(rows):
        pr = p[r]
        pir = p_inv[r]
        for j in range(n):
            x0 = a0[r, j]
            x1 = a1[r, j]
            y0 = b0[r, j]
            y1 = b1[r, j]
            d0[r, j] = _addmod(d0[r, j], _mont_mul(x0, y0, pr, pir), pr)
            d1[r, j] = _addmod(
                d1[r, j],
                _addmod(_mont_mul(x0, y1, pr, pir), _mont_mul(x1, y0, pr, pir), pr),
                pr,
            )
            d2[r, j] = _addmod(d2[r, j], _mont_mul(x1, y1, pr, pir), pr)


@njit(nogil=True, cache=True)
def divide_drop_last(comp, tw, n_inv, p, p_inv, r2, drop_inv_mont, out):
    """Rounded division of a ring element by its last prime.

    ``comp`` holds k rows in evaluation/Montgomery form; the last row's prime
    is divided out and dropped.  Used both for rescaling (drop a level prime)
    and for the key-switching mod-down (drop the special prime).  ``tw``,
    ``n_inv``, ``p``, ``p_inv``, ``r2`` cover all k rows; ``drop_inv_mont``
    holds q_last^-1 mod q_i in Montgomery form for the k-1 surviving rows.
    """
    k, n = comp.shape
    last = comp[k - 1 :, :].copy()
    ntt_inv_rows(last, tw[k - 1 :, :], n_inv[k - 1 :], p[k - 1 :], p_inv[k - 1 :])
    from_mont_rows(last, p[k - 1 :], p_inv[k - 1 :])
    cent = np.empty((1, n), dtype=np.int64)
    centered_rows(last, p[k - 1 :], cent)
    tmp = np.empty((k - 1, n), dtype=np.uint64)
    spread_centered(cent[0], p[: k - 1], r2[: k - 1], p_inv[: k - 1], tmp)
    ntt_fwd_rows(tmp, tw[: k - 1, :], p[: k - 1], p_inv[: k - 1])
    for r in range(k - 1):
        pr = p[r]
        pir = p_inv[r]
        c = drop_inv_mont[r]
        for j in range(n):
            out[r, j] = _mont_mul(_submod(comp[r, j], tmp[r, j], pr), c, pr, pir)


@njit(nogil=True, cache=True)
def relin_accumulate(
    d2_eval,
    d2_cent,
    evk_b,
    evk_a,
    sp_row,
    tw_all,
    p_all,
    p_inv_all,
    r2_all,
    acc0,
    acc1,
):
    """Key-switching inner loop: acc += digit_j * evk_j over the extended basis.

    ``d2_eval`` is the degree-2 component over the k active rows (evaluation/
    Montgomery form); ``d2_cent`` its centered coefficient form.  Active rows
    are the prefix 0..k-1 of the global per-prime stacks; the special prime
    sits at global row ``sp_row`` and local row k of the (k+1, n)
    accumulators.  ``evk_b``/``evk_a`` have shape (digits, global_rows, n).
    """
    k = d2_eval.shape[0]
    n = d2_eval.shape[1]
    dig = np.empty((1, n), dtype=np.uint64)
    for j in range(k):
        for t in range(k + 1):
            gt = t if t < k else sp_row
            pt = p_all[gt]
            pit = p_inv_all[gt]
            if t == j:
                # centered digit is congruent to the residue mod its own prime
                for x in range(n):
                    dig[0, x] = d2_eval[j, x]
            else:
                pt_i = int64(pt)
                c = r2_all[gt]
                for x in range(n):
                    v = d2_cent[j, x] % pt_i
                    dig[0, x] = _mont_mul(uint64(v), c, pt, pit)
                ntt_fwd_rows(dig, tw_all[gt : gt + 1, :], p_all[gt : gt + 1], p_inv_all[gt : gt + 1])
            for x in range(n):
                acc0[t, x] = _addmod(acc0[t, x], _mont_mul(dig[0, x], evk_b[j, gt, x], pt, pit), pt)
                acc1[t, x] = _addmod(acc1[t, x], _mont_mul(dig[0, x], evk_a[j, gt, x], pt, pit), pt)


@njit(nogil=True, cache=True)
def moddown_special(acc, sp_row, tw_all, n_inv_all, p_all, p_inv_all, r2_all, sp_inv_mont, out):
    """Rounded division by the special prime after key switching.

    ``acc`` has k active rows (global prefix) plus the special residue at
    local row k; ``out`` receives the k active rows of round(acc / P).
    """
    k = acc.shape[0] - 1
    n = acc.shape[1]
    last = acc[k : k + 1, :].copy()
    ntt_inv_rows(
        last,
        tw_all[sp_row : sp_row + 1, :],
        n_inv_all[sp_row : sp_row + 1],
        p_all[sp_row : sp_row + 1],
        p_inv_all[sp_row : sp_row + 1],
    )
    from_mont_rows(last, p_all[sp_row : sp_row + 1], p_inv_all[sp_row : sp_row + 1])
    cent = np.empty((1, n), dtype=np.int64)
    centered_rows(last, p_all[sp_row : sp_row + 1], cent)
    tmp = np.empty((k, n), dtype=np.uint64)
    spread_centered(cent[0], p_all[:k], r2_all[:k], p_inv_all[:k], tmp)
    ntt_fwd_rows(tmp, tw_all[:k, :], p_all[:k], p_inv_all[:k])
    for r in range(k):
        pr = p_all[r]
        pir = p_inv_all[r]
        c = sp_inv_mont[r]
        for j in range(n):
            out[r, j] = _mont_mul(_submod(acc[r, j], tmp[r, j], pr), c, pr, pir)


@njit(nogil=True, cache=True)
def residue_check(coeffs, q, expect):
    """Count coefficients whose reduction mod q disagrees with expect."""
    n = coeffs.shape[0]
    bad = 0
    qi = int64(q)
    for j in range(n):
        if coeffs[j] % qi != int64(expect[j]):
            bad += 1
    return bad


# ---------------------------------------------------------------------------
# Python-side prime/root utilities (cold path, exact big-int arithmetic)
# ---------------------------------------------------------------------------

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 2**64."""
    if n < 2:
        return False
    for sp in _MR_BASES:
        if n % sp == 0:
            return n == sp
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_primes_below(bits: int, m: int, count: int, exclude: set[int]) -> list[int]:
    """Descending search for ``count`` primes p = 1 (mod m) with p < 2**bits.

    Deterministic: always scans downwards from 2**bits.  Raises if the search
    would fall below 2**(bits-1), which would break the chain's bit budget.
    """
    found: list[int] = []
    c = (1 << bits) - 1
    c -= (c - 1) % m
    floor = 1 << (bits - 1)
    while len(found) < count:
        if c <= floor:
            raise RuntimeError(
                f"could not find {count} NTT-friendly primes of {bits} bits for m={m}"
            )
        if c not in exclude and is_prime(c):
            found.append(c)
        c -= m
    return found


def find_2n_root(n: int, p: int) -> int:
    """Deterministic generator of order 2n mod p (requires 2n | p-1)."""
    r = (p - 1) // (2 * n)
    for x in range(2, 1 << 20):
        y = pow(x, r, p)
        if pow(y, n, p) == p - 1:
            return y
    raise RuntimeError(f"no order-{2 * n} generator found mod {p}")


def _bitrev(x: int, bits: int) -> int:
    y = 0
    for i in range(bits):
        y |= ((x >> i) & 1) << (bits - 1 - i)
    return y


def mont_neg_inv(p: int) -> int:
    """-p^-1 mod 2**64 by Newton iteration."""
    x = p
    for _ in range(6):
        x = (x * (2 - p * x)) % (1 << 64)
    return ((1 << 64) - x) % (1 << 64)


def twiddle_table(n: int, p: int) -> np.ndarray:
    """Bit-reverse-ordered powers of an order-2n root, in Montgomery form."""
    g = find_2n_root(n, p)
    r_mod = (1 << 64) % p
    logn = n.bit_length() - 1
    powers = [1] * n
    for i in range(1, n):
        powers[i] = powers[i - 1] * g % p
    table = np.empty(n, dtype=np.uint64)
    for i in range(n):
        table[i] = powers[_bitrev(i, logn)] * r_mod % p
    return table
