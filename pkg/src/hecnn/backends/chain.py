"""Modulus chain construction: NTT-friendly primes realizing the L budget.

The chain holds one base prime of (r+25) bits, then floor((L-(r+25))/r)
level primes just under r bits each, so the total bit size never exceeds L.
The number of level primes is the multiplicative depth the chain supports.
A separate special prime of (r+25) bits backs key switching; it is never
part of a ciphertext's modulus and is not counted against L.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from hecnn.errors import ConfigurationError
from hecnn.params import HEParams
from hecnn.backends import kernels

BASE_EXTRA_BITS = 25


@dataclass(frozen=True)
class ModulusChain:
    """Prime ladder plus per-prime NTT/Montgomery contexts.

    Row layout for the stacked arrays: row 0 is the base prime, rows
    1..num_levels are the level primes in rescale order (the highest row is
    dropped first), and the final row is the key-switching special prime.
    """

    ring_degree: int
    base_prime: int
    level_primes: tuple[int, ...]
    special_prime: int
    # stacked per-row contexts, one row per prime (base, levels..., special)
    p: np.ndarray  # uint64 (rows,)
    p_inv: np.ndarray  # uint64 (rows,) Montgomery -p^-1 mod 2^64
    r2: np.ndarray  # uint64 (rows,) (2^64)^2 mod p
    n_inv: np.ndarray  # uint64 (rows,) n^-1 mod p, Montgomery form
    twiddles: np.ndarray  # uint64 (rows, n) bit-reversed, Montgomery form

    @property
    def num_levels(self) -> int:
        return len(self.level_primes)

    @property
    def num_rows(self) -> int:
        return len(self.level_primes) + 2

    @property
    def special_row(self) -> int:
        return self.num_rows - 1

    @property
    def total_bits(self) -> int:
        return self.base_prime.bit_length() + sum(q.bit_length() for q in self.level_primes)

    def primes_at_level(self, level: int) -> list[int]:
        """Active ciphertext primes at a level: base plus `level` level primes."""
        return [self.base_prime] + list(self.level_primes[:level])

    def active_rows(self, level: int) -> int:
        return level + 1

    def modulus_at_level(self, level: int) -> int:
        q = self.base_prime
        for lp in self.level_primes[:level]:
            q *= lp
        return q

    def drop_inv_mont(self, level: int) -> np.ndarray:
        """(q_drop)^-1 mod q_i, Montgomery form, for rescaling from `level`."""
        drop = self.level_primes[level - 1]
        rows = self.primes_at_level(level - 1)
        out = np.empty(len(rows), dtype=np.uint64)
        for i, q in enumerate(rows):
            out[i] = pow(drop, -1, q) * ((1 << 64) % q) % q
        return out

    def special_inv_mont(self, level: int) -> np.ndarray:
        """P^-1 mod q_i, Montgomery form, over the active rows at `level`."""
        rows = self.primes_at_level(level)
        out = np.empty(len(rows), dtype=np.uint64)
        for i, q in enumerate(rows):
            out[i] = pow(self.special_prime, -1, q) * ((1 << 64) % q) % q
        return out


def chain_capacity(params: HEParams) -> int:
    """Number of level primes the (L, r) budget supports."""
    base_bits = params.precision_bits + BASE_EXTRA_BITS
    return max(0, (params.modulus_bits - base_bits) // params.precision_bits)


@lru_cache(maxsize=16)
def _build_chain_cached(m: int, modulus_bits: int, precision_bits: int) -> ModulusChain:
    n = m // 2
    r = precision_bits
    base_bits = r + BASE_EXTRA_BITS
    n_level = (modulus_bits - base_bits) // r
    if n_level < 0:
        raise ConfigurationError(
            f"L={modulus_bits} cannot fit the {base_bits}-bit base prime for r={r}"
        )
    try:
        base = kernels.find_primes_below(base_bits, m, 1, set())[0]
        special = kernels.find_primes_below(base_bits, m, 2, set())[1]
        levels = kernels.find_primes_below(r, m, n_level, {base, special}) if n_level else []
    except RuntimeError as exc:
        raise ConfigurationError(str(exc)) from exc

    all_primes = [base] + levels + [special]
    rows = len(all_primes)
    p = np.array(all_primes, dtype=np.uint64)
    p_inv = np.array([kernels.mont_neg_inv(q) for q in all_primes], dtype=np.uint64)
    r2 = np.array([pow(1 << 64, 2, q) for q in all_primes], dtype=np.uint64)
    n_inv = np.array(
        [pow(n, -1, q) * ((1 << 64) % q) % q for q in all_primes], dtype=np.uint64
    )
    tw = np.empty((rows, n), dtype=np.uint64)
    for i, q in enumerate(all_primes):
        tw[i] = kernels.twiddle_table(n, q)

    chain = ModulusChain(
        ring_degree=n,
        base_prime=base,
        level_primes=tuple(levels),
        special_prime=special,
        p=p,
        p_inv=p_inv,
        r2=r2,
        n_inv=n_inv,
        twiddles=tw,
    )
    assert chain.total_bits <= modulus_bits
    return chain


def build_chain(params: HEParams) -> ModulusChain:
    """Deterministically construct the modulus chain for a parameter set.

    The chain depends only on (m, L, r); identical parameters always yield
    identical primes, so both backends and all parties agree on levels.
    """
    return _build_chain_cached(params.m, params.modulus_bits, params.precision_bits)
