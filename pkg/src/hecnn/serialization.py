"""Binary envelope for keys and ciphertexts, identical across backends.

Layout (little-endian throughout)::

    "HECN" | version u8 | kind u8 | backend u8 | reserved u8
    | fingerprint (16 bytes) | m u64 | L u64 | r u64
    | payload length u64 | payload

The (m, L, r) triple makes files self-describing so any party can rebuild a
backend context; the fingerprint additionally commits to the key seed and is
adopted by receiving parties.  Ciphertext payloads embed level, scale (exact
rational), and the noise estimate ahead of the backend-specific residue data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from hecnn.backends.base import CipherVec, HEBackend, KeyMaterial
from hecnn.errors import FingerprintMismatch, HecnnError
from hecnn.params import HEParams, derive_params

MAGIC = b"HECN"
VERSION = 1

KIND_CIPHER = 1
KIND_KEY_SECRET = 2
KIND_KEY_PUBLIC = 3
KIND_KEY_EVAL = 4
KIND_CIPHER_MATRIX = 5
KIND_CIPHER_LIST = 6

BACKEND_CODES = {"ckks": 0, "ref": 1}
BACKEND_NAMES = {v: k for k, v in BACKEND_CODES.items()}

_KEY_KINDS = {"secret": KIND_KEY_SECRET, "public": KIND_KEY_PUBLIC, "evaluation": KIND_KEY_EVAL}
_KIND_ROLES = {v: k for k, v in _KEY_KINDS.items()}


@dataclass(frozen=True)
class Envelope:
    kind: int
    backend_name: str
    fingerprint: bytes
    m: int
    modulus_bits: int
    precision_bits: int
    payload: bytes

    def derive_params(self, seed: int = 0) -> HEParams:
        return derive_params(self.m, self.modulus_bits, self.precision_bits, seed=seed)


def wrap(kind: int, backend: HEBackend, payload: bytes) -> bytes:
    head = struct.pack(
        _HEADER_FMT,
        MAGIC,
        VERSION,
        kind,
        BACKEND_CODES[backend.name],
        0,
        backend.fingerprint,
        backend.params.m,
        backend.params.modulus_bits,
        backend.params.precision_bits,
        len(payload),
    )
    return head + payload


_HEADER_FMT = "<4sBBBB16sQQQQ"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


def unwrap(data: bytes) -> Envelope:
    if len(data) < _HEADER_SIZE or data[:4] != MAGIC:
        raise HecnnError("not a HECN envelope")
    magic, version, kind, backend_code, _, fp, m, l_bits, r_bits, plen = struct.unpack_from(
        _HEADER_FMT, data, 0
    )
    if version != VERSION:
        raise HecnnError(f"unsupported envelope version {version}")
    payload = data[_HEADER_SIZE : _HEADER_SIZE + plen]
    if len(payload) != plen:
        raise HecnnError("truncated envelope payload")
    return Envelope(
        kind=kind,
        backend_name=BACKEND_NAMES[backend_code],
        fingerprint=fp,
        m=m,
        modulus_bits=l_bits,
        precision_bits=r_bits,
        payload=payload,
    )


def _pack_fraction(x: Fraction) -> bytes:
    num = x.numerator.to_bytes((x.numerator.bit_length() + 7) // 8 or 1, "little")
    den = x.denominator.to_bytes((x.denominator.bit_length() + 7) // 8 or 1, "little")
    return struct.pack("<II", len(num), len(den)) + num + den


def _unpack_fraction(data: bytes, offset: int) -> tuple[Fraction, int]:
    nlen, dlen = struct.unpack_from("<II", data, offset)
    offset += 8
    num = int.from_bytes(data[offset : offset + nlen], "little")
    offset += nlen
    den = int.from_bytes(data[offset : offset + dlen], "little")
    offset += dlen
    return Fraction(num, den), offset


def cipher_record(backend: HEBackend, ct: CipherVec) -> bytes:
    """Self-contained ciphertext record: level, scale, noise, residue data."""
    body = backend.cipher_payload_bytes(ct)
    head = struct.pack("<Id", ct.level, ct.noise_bits)
    rec = head + _pack_fraction(ct.scale) + body
    return struct.pack("<Q", len(rec)) + rec


def cipher_from_record(backend: HEBackend, data: bytes, offset: int = 0) -> tuple[CipherVec, int]:
    (rlen,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    end = offset + rlen
    level, noise = struct.unpack_from("<Id", data, offset)
    scale, body_off = _unpack_fraction(data, offset + 12)
    ct = backend.cipher_from_payload(data[body_off:end], level, scale, noise)
    return ct, end


def save_cipher(backend: HEBackend, ct: CipherVec, path: str | Path) -> None:
    Path(path).write_bytes(wrap(KIND_CIPHER, backend, cipher_record(backend, ct)))


def load_cipher(backend: HEBackend, path: str | Path) -> CipherVec:
    env = read_envelope(path, expected_kind=KIND_CIPHER, backend=backend)
    ct, _ = cipher_from_record(backend, env.payload)
    return ct


def save_key(backend: HEBackend, key: KeyMaterial, role: str, path: str | Path) -> None:
    """Persist one role (secret/public/evaluation) of a key bundle."""
    parts = backend.key_payload_bytes(key)
    if role not in parts:
        raise HecnnError(f"key material has no {role!r} part")
    Path(path).write_bytes(wrap(_KEY_KINDS[role], backend, parts[role]))


def load_key(backend: HEBackend, path: str | Path) -> tuple[str, KeyMaterial]:
    env = read_envelope(path, backend=backend)
    role = _KIND_ROLES.get(env.kind)
    if role is None:
        raise HecnnError(f"file {path} is not a key envelope")
    key = backend.key_from_payload({role: env.payload})
    key = KeyMaterial(
        fingerprint=env.fingerprint,
        backend_name=key.backend_name,
        public=key.public,
        secret=key.secret,
        evaluation=key.evaluation,
    )
    return role, key


def merge_keys(*keys: KeyMaterial) -> KeyMaterial:
    """Combine separately loaded roles into one bundle (fingerprints must agree)."""
    base = keys[0]
    public, secret, evaluation = base.public, base.secret, base.evaluation
    for k in keys[1:]:
        if k.fingerprint != base.fingerprint or k.backend_name != base.backend_name:
            raise FingerprintMismatch("cannot merge keys from different families")
        public = public if k.public is None else k.public
        secret = secret if k.secret is None else k.secret
        evaluation = evaluation if k.evaluation is None else k.evaluation
    return KeyMaterial(
        fingerprint=base.fingerprint,
        backend_name=base.backend_name,
        public=public,
        secret=secret,
        evaluation=evaluation,
    )


def read_envelope(
    path: str | Path, expected_kind: int | None = None, backend: HEBackend | None = None
) -> Envelope:
    env = unwrap(Path(path).read_bytes())
    if expected_kind is not None and env.kind != expected_kind:
        raise HecnnError(f"{path}: expected envelope kind {expected_kind}, got {env.kind}")
    if backend is not None:
        if env.backend_name != backend.name:
            raise FingerprintMismatch(
                f"{path}: written by backend {env.backend_name!r}, not {backend.name!r}"
            )
        if (env.m, env.modulus_bits, env.precision_bits) != backend.params.public_triple():
            raise FingerprintMismatch(f"{path}: parameter triple does not match context")
        if env.fingerprint != backend.fingerprint:
            raise FingerprintMismatch(f"{path}: key family fingerprint mismatch")
    return env


def peek_params(path: str | Path) -> Envelope:
    """Read only the envelope header to discover (m, L, r) and the fingerprint."""
    return unwrap(Path(path).read_bytes())
