"""HE parameter set, validation, and a table-based security estimate.

The parameter triple (m, L, r) governs everything downstream: the ring degree
is phi(m) = m/2 for power-of-two m, the slot count is K = phi(m)/2, L is the
bit budget of a fresh ciphertext's modulus, and r is the encoding precision
in bits.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field

PRECISION_MIN = 20
PRECISION_MAX = 50

# Smallest modulus budget that leaves room for one multiplication under the
# calibrated 100-bits-per-level view (see hecnn.analyzer); below this the
# parameter set is assumed addition-only and derive_params warns.
MIN_MULT_MODULUS_BITS = 200


class InsecureParamsWarning(UserWarning):
    """Parameter set falls short of the 128-bit security target."""


class NoMultiplicationWarning(UserWarning):
    """Modulus budget likely too small for any multiplication."""


@dataclass(frozen=True)
class HEParams:
    """Validated parameter set for the leveled approximate-HE backends.

    Attributes:
        m: cyclotomic index, a power of two >= 16.
        ring_degree: phi(m) = m/2.
        slots: K = phi(m)/2 packed scalar lanes per ciphertext.
        modulus_bits: L, bit size of a fresh ciphertext's modulus.
        precision_bits: r, encoding scale is 2**r.
        security_target: requested security level in bits (advisory).
        rng_seed: 64-bit seed; all key/encryption randomness derives from it.
    """

    m: int
    modulus_bits: int
    precision_bits: int
    security_target: int | None = None
    rng_seed: int = 0
    ring_degree: int = field(init=False)
    slots: int = field(init=False)

    def __post_init__(self) -> None:
        if self.m < 16 or (self.m & (self.m - 1)) != 0:
            raise ValueError(f"m must be a power of two >= 16, got {self.m}")
        if self.modulus_bits <= 0:
            raise ValueError("modulus_bits must be positive")
        if not (PRECISION_MIN <= self.precision_bits <= PRECISION_MAX):
            raise ValueError(
                f"precision_bits must lie in [{PRECISION_MIN}, {PRECISION_MAX}],"
                f" got {self.precision_bits}"
            )
        if not (0 <= self.rng_seed < 2**64):
            raise ValueError("rng_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "ring_degree", self.m // 2)
        object.__setattr__(self, "slots", self.m // 4)

    @property
    def fingerprint(self) -> bytes:
        """16-byte digest binding keys and ciphertexts to this parameter set.

        Includes the seed, so key material from different seeds never
        cross-validates, without revealing the seed itself.
        """
        blob = struct.pack(
            "<4sQQQQ", b"HEPS", self.m, self.modulus_bits, self.precision_bits, self.rng_seed
        )
        return hashlib.sha256(blob).digest()[:16]

    def public_triple(self) -> tuple[int, int, int]:
        """(m, L, r) — everything needed to rebuild a backend context."""
        return (self.m, self.modulus_bits, self.precision_bits)


def derive_params(
    m: int,
    modulus_bits: int,
    precision_bits: int,
    seed: int = 0,
    security_target: int | None = None,
) -> HEParams:
    """Build and validate an :class:`HEParams` from the raw (m, L, r) triple.

    Emits :class:`NoMultiplicationWarning` when L is below the 200-bit
    guideline for a first multiplication; this is a warning, not an error,
    because the realized prime chain may still fit one level.
    """
    params = HEParams(
        m=m,
        modulus_bits=modulus_bits,
        precision_bits=precision_bits,
        security_target=security_target,
        rng_seed=seed,
    )
    if modulus_bits < MIN_MULT_MODULUS_BITS:
        warnings.warn(
            f"L={modulus_bits} is below {MIN_MULT_MODULUS_BITS} bits; "
            "no multiplication possible under the calibrated depth heuristic",
            NoMultiplicationWarning,
            stacklevel=2,
        )
    return params


# Maximum total modulus bits supporting 128-bit security per ring degree,
# for ternary secrets against classical attacks (published HE-standard
# mapping).  This is a table approximation, not a lattice estimator; the
# key-switching prime is not counted in L, so treat results as coarse.
SECURITY_TABLE_128: dict[int, int] = {
    1024: 27,
    2048: 54,
    4096: 109,
    8192: 218,
    16384: 438,
    32768: 829,
}

SECURITY_TARGET_BITS = 128


@dataclass(frozen=True)
class SecurityEstimate:
    """Coarse security verdict for a parameter set."""

    lam: float | None  # estimated security lower bound in bits, None if unknown
    known_degree: bool
    max_secure_bits: int | None

    @property
    def meets_target(self) -> bool:
        return self.lam is not None and self.lam >= SECURITY_TARGET_BITS

    @property
    def verdict(self) -> str:
        if not self.known_degree:
            return "unknown"
        return "ok" if self.meets_target else "insecure"


def security_estimate(params: HEParams) -> SecurityEstimate:
    """Estimate a security lower bound in bits from the standard table.

    Returns >=128 iff L does not exceed the tabulated cap for the ring
    degree; above the cap the estimate degrades proportionally to cap/L
    (security is roughly inverse in log Q at fixed degree).  Ring degrees
    outside the table yield an "unknown" verdict, never a silent pass.
    """
    cap = SECURITY_TABLE_128.get(params.ring_degree)
    if cap is None:
        return SecurityEstimate(lam=None, known_degree=False, max_secure_bits=None)
    if params.modulus_bits <= cap:
        return SecurityEstimate(
            lam=float(SECURITY_TARGET_BITS), known_degree=True, max_secure_bits=cap
        )
    lam = SECURITY_TARGET_BITS * cap / params.modulus_bits
    return SecurityEstimate(lam=lam, known_degree=True, max_secure_bits=cap)


def check_security_gate(params: HEParams, allow_insecure: bool) -> SecurityEstimate:
    """Refuse parameter sets below the 128-bit target unless explicitly allowed."""
    est = security_estimate(params)
    if not est.meets_target:
        if not allow_insecure:
            raise ValueError(
                f"parameter set (m={params.m}, L={params.modulus_bits}) is below the "
                f"{SECURITY_TARGET_BITS}-bit security target "
                f"(estimate: {est.lam if est.lam is not None else 'unknown'}); "
                "pass --allow-insecure to proceed"
            )
        warnings.warn(
            f"proceeding with sub-{SECURITY_TARGET_BITS}-bit parameters "
            f"(m={params.m}, L={params.modulus_bits})",
            InsecureParamsWarning,
            stacklevel=2,
        )
    return est
