"""Backend-neutral leveled-HE contract shared by the real and reference backends.

Levels count the rescales a ciphertext can still absorb: every
multiplication (ciphertext-ciphertext or ciphertext-plaintext) rescales and
consumes exactly one level; additions preserve the level.  Scales are exact
rationals updated by the same chain primes on both backends, so traces and
failure points match bit for bit.

Operands at different levels are aligned by dropping modulus primes from the
fresher one (free, scale-preserving).  Additions with mismatched scales are
aligned by multiplying the smaller-scale operand by a plaintext one at an
adjusted scale, which costs a level; the layer code is written so this path
is never taken.

Ciphertexts, plaintexts, and keys are immutable after creation and safe to
share across threads; the operation counters are the only shared mutable
state and are updated under a lock.
"""

from __future__ import annotations

import math
import threading
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from hecnn.backends.chain import ModulusChain, build_chain
from hecnn.errors import (
    DepthExhausted,
    FingerprintMismatch,
    MissingEvalKey,
    ScaleMismatch,
)
from hecnn.params import HEParams


@dataclass(frozen=True)
class CounterSnapshot:
    """Immutable view of the operation tallies."""

    ctct_mult: int = 0
    ctpt_mult: int = 0
    ctct_add: int = 0
    ctpt_add: int = 0

    def __sub__(self, other: "CounterSnapshot") -> "CounterSnapshot":
        return CounterSnapshot(
            ctct_mult=self.ctct_mult - other.ctct_mult,
            ctpt_mult=self.ctpt_mult - other.ctpt_mult,
            ctct_add=self.ctct_add - other.ctct_add,
            ctpt_add=self.ctpt_add - other.ctpt_add,
        )

    def __add__(self, other: "CounterSnapshot") -> "CounterSnapshot":
        return CounterSnapshot(
            ctct_mult=self.ctct_mult + other.ctct_mult,
            ctpt_mult=self.ctpt_mult + other.ctpt_mult,
            ctct_add=self.ctct_add + other.ctct_add,
            ctpt_add=self.ctpt_add + other.ctpt_add,
        )

    def total(self) -> int:
        return self.ctct_mult + self.ctpt_mult + self.ctct_add + self.ctpt_add


class OpCounters:
    """Thread-safe monotone tallies of homomorphic operations by category."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._ctct_mult = 0
        self._ctpt_mult = 0
        self._ctct_add = 0
        self._ctpt_add = 0

    def bump(self, ctct_mult=0, ctpt_mult=0, ctct_add=0, ctpt_add=0) -> None:
        with self._lock:
            self._ctct_mult += ctct_mult
            self._ctpt_mult += ctpt_mult
            self._ctct_add += ctct_add
            self._ctpt_add += ctpt_add

    def snapshot(self) -> CounterSnapshot:
        with self._lock:
            return CounterSnapshot(
                ctct_mult=self._ctct_mult,
                ctpt_mult=self._ctpt_mult,
                ctct_add=self._ctct_add,
                ctpt_add=self._ctpt_add,
            )

    def reset(self) -> None:
        with self._lock:
            self._ctct_mult = 0
            self._ctpt_mult = 0
            self._ctct_add = 0
            self._ctpt_add = 0


@dataclass(frozen=True)
class CipherVec:
    """Opaque ciphertext over K packed slots with level/scale bookkeeping.

    No slot-indexed access is exposed; slots can only be recovered together
    through decryption.  ``noise_bits`` is a conservative log2 estimate of
    the slot-domain error; it is flagged once it reaches 0 (error of order
    the values themselves).
    """

    payload: Any
    level: int
    scale: Fraction
    slots: int
    fingerprint: bytes
    backend_name: str
    noise_bits: float = float("-inf")

    @property
    def noise_flagged(self) -> bool:
        return self.noise_bits >= 0.0


@dataclass(frozen=True)
class PlainVec:
    """Slot values with an encoding scale; optionally carries an encoded form.

    ``scale`` is None for raw values that adopt the ciphertext's scale at the
    point of use.  The encoded ``payload`` (ring element for the real
    backend) is bound to a specific level.
    """

    values: np.ndarray
    scale: Fraction | None = None
    level: int | None = None
    payload: Any = None
    fingerprint: bytes | None = None


@dataclass(frozen=True)
class RawProduct:
    """Degree-2 accumulation state between raw multiplies and finalize.

    Produced by :meth:`HEBackend.mul_ct_ct_raw`; raw products with identical
    level and scale may be added, deferring the single relinearize+rescale to
    :meth:`HEBackend.raw_finalize`.  Addition of raw products is exact on
    both backends, so fused inner products are bit-identical no matter how
    the terms were partitioned across workers.
    """

    payload: Any
    level: int
    scale: Fraction
    slots: int
    fingerprint: bytes
    backend_name: str
    noise_bits: float = float("-inf")


@dataclass(frozen=True)
class KeyMaterial:
    """Key bundle bound to a parameter fingerprint.

    ``secret`` decrypts; ``public`` encrypts; ``evaluation`` relinearizes.
    The public bundle strips the secret part for distribution to the model
    owner and the server.
    """

    fingerprint: bytes
    backend_name: str
    public: Any = None
    secret: Any = None
    evaluation: Any = None

    @property
    def has_secret(self) -> bool:
        return self.secret is not None

    def public_bundle(self) -> "KeyMaterial":
        return replace(self, secret=None)

    def secret_only(self) -> "KeyMaterial":
        return replace(self, public=None, evaluation=None)


class HEBackend(ABC):
    """Template for both backends: shared bookkeeping, per-backend payload math."""

    name: str = "abstract"

    def __init__(self, params: HEParams) -> None:
        self.params = params
        self.chain: ModulusChain = build_chain(params)
        self.counters = OpCounters()
        self._eval_key: KeyMaterial | None = None
        self._canonical_scale = Fraction(2**params.precision_bits)
        self._fingerprint = params.fingerprint

    # ------------------------------------------------------------------
    # Derived properties
    # ------------------------------------------------------------------

    @property
    def slots(self) -> int:
        return self.params.slots

    @property
    def fresh_level(self) -> int:
        return self.chain.num_levels

    @property
    def canonical_scale(self) -> Fraction:
        return self._canonical_scale

    @property
    def fingerprint(self) -> bytes:
        return self._fingerprint

    def adopt_fingerprint(self, fingerprint: bytes) -> None:
        """Join the key family of loaded material.

        The fingerprint commits to the key seed, which only the key owner
        knows; parties that receive public material (server, model owner)
        rebuild the context from the public (m, L, r) triple and adopt the
        fingerprint carried by the files.  Mismatched families still fail.
        """
        self._fingerprint = fingerprint

    # ------------------------------------------------------------------
    # Key management
    # ------------------------------------------------------------------

    @abstractmethod
    def keygen(self) -> KeyMaterial:
        """Generate secret/public/evaluation keys, deterministic in the seed."""

    def set_eval_key(self, key: KeyMaterial) -> None:
        """Bind the evaluation key used by ciphertext-ciphertext multiplies."""
        self._check_key(key)
        if key.evaluation is None:
            raise MissingEvalKey("key material carries no evaluation key")
        self._eval_key = key

    def _require_eval_key(self) -> KeyMaterial:
        if self._eval_key is None:
            raise MissingEvalKey(
                "ciphertext-ciphertext multiplication requires set_eval_key()"
            )
        return self._eval_key

    def _check_key(self, key: KeyMaterial) -> None:
        if key.backend_name != self.name:
            raise FingerprintMismatch(
                f"key belongs to backend {key.backend_name!r}, not {self.name!r}"
            )
        if key.fingerprint != self.fingerprint:
            raise FingerprintMismatch("key material bound to different parameters")

    def _check_cipher(self, ct: CipherVec) -> None:
        if ct.backend_name != self.name:
            raise FingerprintMismatch(
                f"ciphertext belongs to backend {ct.backend_name!r}, not {self.name!r}"
            )
        if ct.fingerprint != self.fingerprint:
            raise FingerprintMismatch("ciphertext bound to different parameters")

    # ------------------------------------------------------------------
    # Encoding / encryption
    # ------------------------------------------------------------------

    def _as_slot_array(self, values: Sequence[float] | np.ndarray) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size > self.slots:
            raise ValueError(f"{arr.size} values exceed {self.slots} slots")
        if arr.size < self.slots:
            arr = np.concatenate([arr, np.zeros(self.slots - arr.size)])
        return arr

    def encode_plain(
        self,
        values: Sequence[float] | np.ndarray,
        scale: Fraction | None = None,
        level: int | None = None,
    ) -> PlainVec:
        """Encode slot values at a scale, bound to a level's modulus."""
        arr = self._as_slot_array(values)
        scale = self.canonical_scale if scale is None else Fraction(scale)
        level = self.fresh_level if level is None else level
        payload = self._encode_impl(arr, scale, level)
        return PlainVec(
            values=arr,
            scale=scale,
            level=level,
            payload=payload,
            fingerprint=self.fingerprint,
        )

    def encrypt(
        self,
        values: Sequence[float] | np.ndarray | PlainVec,
        key: KeyMaterial,
        scale: Fraction | None = None,
        entropy: int | None = None,
    ) -> CipherVec:
        """Encrypt under the public key; fresh ciphertexts sit at the top level.

        The encryption randomness derives from the parameter seed plus either
        a process-local counter or, when ``entropy`` is given, that value —
        callers encrypting collections in parallel pass the element index so
        results do not depend on scheduling order.
        """
        self._check_key(key)
        if key.public is None:
            raise FingerprintMismatch("key material carries no public key")
        if isinstance(values, PlainVec):
            arr = self._as_slot_array(values.values)
            scale = values.scale if scale is None else Fraction(scale)
        else:
            arr = self._as_slot_array(values)
        scale = self.canonical_scale if scale is None else Fraction(scale)
        payload = self._encrypt_impl(arr, scale, key, entropy)
        return CipherVec(
            payload=payload,
            level=self.fresh_level,
            scale=scale,
            slots=self.slots,
            fingerprint=self.fingerprint,
            backend_name=self.name,
            noise_bits=self._fresh_noise_bits(),
        )

    def decrypt(self, ct: CipherVec, key: KeyMaterial) -> PlainVec:
        """Recover slot values; warns when the tracked noise estimate is flagged."""
        self._check_cipher(ct)
        self._check_key(key)
        if key.secret is None:
            raise FingerprintMismatch("decryption requires the secret key")
        if ct.noise_flagged:
            warnings.warn(
                "decrypting a ciphertext whose noise estimate reached the scale",
                stacklevel=2,
            )
        values = self._decrypt_impl(ct, key)
        return PlainVec(values=values, scale=ct.scale, level=ct.level)

    # ------------------------------------------------------------------
    # Level/scale plumbing
    # ------------------------------------------------------------------

    def drop_to_level(self, ct: CipherVec, level: int) -> CipherVec:
        """Discard modulus primes down to `level`; value and scale unchanged."""
        if level > ct.level:
            raise ValueError("cannot raise a ciphertext's level")
        if level == ct.level:
            return ct
        return replace(ct, payload=self._drop_impl(ct, level), level=level)

    def _align(self, a: CipherVec, b: CipherVec) -> tuple[CipherVec, CipherVec, int]:
        lvl = min(a.level, b.level)
        return self.drop_to_level(a, lvl), self.drop_to_level(b, lvl), lvl

    def _rescale_scale(self, scale: Fraction, level: int) -> Fraction:
        """Scale after the rescale that drops the top prime of `level`."""
        return scale / self.chain.level_primes[level - 1]

    def _lift_scale(self, ct: CipherVec, target: Fraction) -> CipherVec:
        """Bring `ct` to scale `target` via a plaintext-one multiply (one level)."""
        if ct.level < 1:
            raise ScaleMismatch(
                f"cannot align scale {float(ct.scale):g} to {float(target):g} at level 0"
            )
        drop = self.chain.level_primes[ct.level - 1]
        ones_scale = target * drop / ct.scale
        ones = self.encode_plain(np.ones(self.slots), scale=ones_scale, level=ct.level)
        return self.mul_ct_pt(ct, ones)

    # ------------------------------------------------------------------
    # Arithmetic (shared bookkeeping, backend-specific payload math)
    # ------------------------------------------------------------------

    def add_ct_ct(self, a: CipherVec, b: CipherVec) -> CipherVec:
        self._check_cipher(a)
        self._check_cipher(b)
        if a.scale != b.scale:
            if a.scale < b.scale:
                a = self._lift_scale(a, b.scale)
            else:
                b = self._lift_scale(b, a.scale)
            if a.scale != b.scale:
                raise ScaleMismatch("scales remain unequal after alignment")
        a, b, lvl = self._align(a, b)
        payload = self._add_ct_ct_impl(a, b)
        self.counters.bump(ctct_add=1)
        return CipherVec(
            payload=payload,
            level=lvl,
            scale=a.scale,
            slots=self.slots,
            fingerprint=self.fingerprint,
            backend_name=self.name,
            noise_bits=self._noise_sum(a.noise_bits, b.noise_bits),
        )

    def add_ct_pt(self, ct: CipherVec, plain: PlainVec | np.ndarray | Sequence[float]) -> CipherVec:
        self._check_cipher(ct)
        plain = self._coerce_plain(plain, scale=ct.scale, level=ct.level)
        if plain.scale != ct.scale:
            raise ScaleMismatch(
                "plaintext addend must be encoded at the ciphertext scale"
            )
        payload = self._add_ct_pt_impl(ct, plain)
        self.counters.bump(ctpt_add=1)
        return replace(
            ct,
            payload=payload,
            noise_bits=self._noise_sum(ct.noise_bits, self._encode_noise_bits()),
        )

    def mul_ct_ct(self, a: CipherVec, b: CipherVec) -> CipherVec:
        raw = self.mul_ct_ct_raw(a, b)
        return self.raw_finalize(raw)

    def mul_ct_pt(self, ct: CipherVec, plain: PlainVec | np.ndarray | Sequence[float]) -> CipherVec:
        self._check_cipher(ct)
        if ct.level < 1:
            raise DepthExhausted("ciphertext-plaintext multiply at level 0")
        plain = self._coerce_plain(plain, scale=None, level=ct.level)
        payload = self._mul_ct_pt_impl(ct, plain)
        self.counters.bump(ctpt_mult=1)
        mag = float(np.max(np.abs(plain.values))) if plain.values.size else 1.0
        noise = ct.noise_bits + max(0.0, math.log2(max(mag, 1e-300))) + 1.0
        scale = self._rescale_scale(ct.scale * plain.scale, ct.level)
        return CipherVec(
            payload=payload,
            level=ct.level - 1,
            scale=scale,
            slots=self.slots,
            fingerprint=self.fingerprint,
            backend_name=self.name,
            noise_bits=max(noise, self._round_noise_bits(scale)),
        )

    def mul_ct_ct_raw(self, a: CipherVec, b: CipherVec) -> RawProduct:
        """Degree-2 product without relinearize/rescale; counts one CT-CT mult."""
        self._check_cipher(a)
        self._check_cipher(b)
        a, b, lvl = self._align(a, b)
        if lvl < 1:
            raise DepthExhausted("ciphertext-ciphertext multiply at level 0")
        payload = self._mul_raw_impl(a, b)
        self.counters.bump(ctct_mult=1)
        noise = self._noise_sum(a.noise_bits, b.noise_bits)
        noise = noise + 1.0 if noise > float("-inf") else noise
        return RawProduct(
            payload=payload,
            level=lvl,
            scale=a.scale * b.scale,
            slots=self.slots,
            fingerprint=self.fingerprint,
            backend_name=self.name,
            noise_bits=noise,
        )

    def raw_add(self, x: RawProduct, y: RawProduct) -> RawProduct:
        if x.level != y.level or x.scale != y.scale:
            raise ScaleMismatch("raw products must share level and scale")
        payload = self._raw_add_impl(x, y)
        self.counters.bump(ctct_add=1)
        return replace(x, payload=payload, noise_bits=self._noise_sum(x.noise_bits, y.noise_bits))

    def raw_finalize(self, x: RawProduct) -> CipherVec:
        """Relinearize and rescale an accumulated degree-2 product."""
        self._require_eval_key()  # both backends fail identically without it
        payload = self._raw_finalize_impl(x)
        scale = self._rescale_scale(x.scale, x.level)
        return CipherVec(
            payload=payload,
            level=x.level - 1,
            scale=scale,
            slots=self.slots,
            fingerprint=self.fingerprint,
            backend_name=self.name,
            noise_bits=max(x.noise_bits, self._round_noise_bits(scale)),
        )

    def dot_ct_ct(self, xs: Sequence[CipherVec], ys: Sequence[CipherVec]) -> CipherVec:
        """Inner product sum_i xs[i]*ys[i] with one relinearize+rescale.

        Semantically identical to folding mul_ct_ct results with add_ct_ct
        and counts the same logical operations (n CT-CT mults, n-1 CT-CT
        adds), but spends the key-switch and rescale once.
        """
        if len(xs) != len(ys) or not xs:
            raise ValueError("dot_ct_ct requires equally sized, non-empty inputs")
        acc = self.mul_ct_ct_raw(xs[0], ys[0])
        for i in range(1, len(xs)):
            acc = self.raw_add(acc, self.mul_ct_ct_raw(xs[i], ys[i]))
        return self.raw_finalize(acc)

    # ------------------------------------------------------------------
    # Noise model (coarse, documented heuristic for |values| = O(1))
    # ------------------------------------------------------------------

    @staticmethod
    def _noise_sum(*bits: float) -> float:
        """Combine log2 error estimates by adding the linear magnitudes.

        Two equal estimates grow by exactly one bit; long running sums grow
        by the logarithm of the term count, keeping the estimate usable.
        """
        total = sum(2.0 ** b for b in bits if b > float("-inf"))
        return math.log2(total) if total > 0.0 else float("-inf")

    def _encode_noise_bits(self) -> float:
        n = self.params.ring_degree
        return 0.5 * math.log2(n) - self.params.precision_bits

    def _round_noise_bits(self, scale: Fraction) -> float:
        n = self.params.ring_degree
        return math.log2(64.0 * math.sqrt(n)) - math.log2(float(scale))

    def _fresh_noise_bits(self) -> float:
        return float("-inf")

    # ------------------------------------------------------------------
    # Plain coercion
    # ------------------------------------------------------------------

    def _coerce_plain(
        self, plain: PlainVec | np.ndarray | Sequence[float], scale: Fraction | None, level: int
    ) -> PlainVec:
        if isinstance(plain, PlainVec):
            if plain.fingerprint is not None and plain.fingerprint != self.fingerprint:
                raise FingerprintMismatch("plaintext encoded for different parameters")
            if plain.payload is None or plain.level != level or (
                scale is not None and plain.scale != scale
            ):
                return self.encode_plain(
                    plain.values,
                    scale=scale if scale is not None else plain.scale,
                    level=level,
                )
            return plain
        return self.encode_plain(plain, scale=scale, level=level)

    # ------------------------------------------------------------------
    # Backend hooks
    # ------------------------------------------------------------------

    @abstractmethod
    def _encode_impl(self, values: np.ndarray, scale: Fraction, level: int) -> Any: ...

    @abstractmethod
    def _encrypt_impl(
        self, values: np.ndarray, scale: Fraction, key: KeyMaterial, entropy: int | None
    ) -> Any: ...

    @abstractmethod
    def _decrypt_impl(self, ct: CipherVec, key: KeyMaterial) -> np.ndarray: ...

    @abstractmethod
    def _drop_impl(self, ct: CipherVec, level: int) -> Any: ...

    @abstractmethod
    def _add_ct_ct_impl(self, a: CipherVec, b: CipherVec) -> Any: ...

    @abstractmethod
    def _add_ct_pt_impl(self, ct: CipherVec, plain: PlainVec) -> Any: ...

    @abstractmethod
    def _mul_ct_pt_impl(self, ct: CipherVec, plain: PlainVec) -> Any: ...

    @abstractmethod
    def _mul_raw_impl(self, a: CipherVec, b: CipherVec) -> Any: ...

    @abstractmethod
    def _raw_add_impl(self, x: RawProduct, y: RawProduct) -> Any: ...

    @abstractmethod
    def _raw_finalize_impl(self, x: RawProduct) -> Any: ...

    # ------------------------------------------------------------------
    # Serialization hooks (payload only; the envelope lives elsewhere)
    # ------------------------------------------------------------------

    @abstractmethod
    def cipher_payload_bytes(self, ct: CipherVec) -> bytes: ...

    @abstractmethod
    def cipher_from_payload(
        self, data: bytes, level: int, scale: Fraction, noise_bits: float
    ) -> CipherVec: ...

    @abstractmethod
    def key_payload_bytes(self, key: KeyMaterial) -> dict[str, bytes]: ...

    @abstractmethod
    def key_from_payload(self, parts: dict[str, bytes]) -> KeyMaterial: ...
