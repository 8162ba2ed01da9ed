"""Exact plaintext simulator of the backend contract.

Slot values are held in the clear as float64 vectors while level and scale
bookkeeping, operand alignment, counter updates, and depth exhaustion follow
exactly the same code paths as the real backend (the level budget comes from
the same chain construction).  Raw degree-2 accumulations keep their terms
as a list and are summed in insertion order at finalize time, so fused inner
products are bit-identical no matter how workers partitioned the terms.

Serialization stores raw slot values: test use only, not an encryption.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from hecnn.backends.base import CipherVec, HEBackend, KeyMaterial
from hecnn.errors import FingerprintMismatch
from hecnn.params import HEParams


@dataclass(frozen=True)
class SimCipher:
    values: np.ndarray


@dataclass(frozen=True)
class SimRaw:
    terms: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class SimKeyToken:
    role: str


class RefBackend(HEBackend):
    name = "ref"

    def __init__(self, params: HEParams) -> None:
        super().__init__(params)

    def keygen(self) -> KeyMaterial:
        return KeyMaterial(
            fingerprint=self.params.fingerprint,
            backend_name=self.name,
            secret=SimKeyToken("secret"),
            public=SimKeyToken("public"),
            evaluation=SimKeyToken("evaluation"),
        )

    # ------------------------------------------------------------------
    # Payload math
    # ------------------------------------------------------------------

    def _encode_impl(self, values, scale, level):
        return None

    def _encrypt_impl(self, values, scale, key, entropy):
        return SimCipher(values=values.copy())

    def _decrypt_impl(self, ct, key):
        return ct.payload.values.copy()

    def _drop_impl(self, ct, level):
        return ct.payload

    def _add_ct_ct_impl(self, a, b):
        return SimCipher(values=a.payload.values + b.payload.values)

    def _add_ct_pt_impl(self, ct, plain):
        return SimCipher(values=ct.payload.values + plain.values)

    def _mul_ct_pt_impl(self, ct, plain):
        return SimCipher(values=ct.payload.values * plain.values)

    def _mul_raw_impl(self, a, b):
        return SimRaw(terms=(a.payload.values * b.payload.values,))

    def _raw_add_impl(self, x, y):
        return SimRaw(terms=x.payload.terms + y.payload.terms)

    def _raw_finalize_impl(self, x):
        terms = x.payload.terms
        acc = terms[0].copy()
        for t in terms[1:]:
            acc += t
        return SimCipher(values=acc)

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def cipher_payload_bytes(self, ct: CipherVec) -> bytes:
        values = ct.payload.values
        return struct.pack("<I", values.size) + values.astype("<f8").tobytes()

    def cipher_from_payload(
        self, data: bytes, level: int, scale: Fraction, noise_bits: float
    ) -> CipherVec:
        (size,) = struct.unpack_from("<I", data, 0)
        if size != self.slots:
            raise FingerprintMismatch("ciphertext payload does not match parameters")
        values = np.frombuffer(data, dtype="<f8", count=size, offset=4).copy()
        return CipherVec(
            payload=SimCipher(values=values),
            level=level,
            scale=scale,
            slots=self.slots,
            fingerprint=self.fingerprint,
            backend_name=self.name,
            noise_bits=noise_bits,
        )

    def key_payload_bytes(self, key: KeyMaterial) -> dict[str, bytes]:
        parts = {}
        for role in ("secret", "public", "evaluation"):
            if getattr(key, role) is not None:
                parts[role] = role.encode()
        return parts

    def key_from_payload(self, parts: dict[str, bytes]) -> KeyMaterial:
        return KeyMaterial(
            fingerprint=self.fingerprint,
            backend_name=self.name,
            secret=SimKeyToken("secret") if "secret" in parts else None,
            public=SimKeyToken("public") if "public" in parts else None,
            evaluation=SimKeyToken("evaluation") if "evaluation" in parts else None,
        )
