"""Real leveled approximate-HE backend over the negacyclic ring of degree phi(m).

Residue-number-system representation with one negacyclic NTT per chain
prime; ciphertext components are kept in evaluation (NTT) domain and
Montgomery form throughout, so additions and multiplications are pointwise.
Transforms happen only at encode/encrypt/decrypt boundaries, at rescaling,
and inside key switching.

Instantiation: sparse ternary secrets and encryption randomness (64 nonzero
coefficients), centered discrete Gaussian errors with sigma = 3.2, and
key switching by per-prime digit decomposition against a single special
prime.  Intermediate products stay within 128 bits; primes are found by
deterministic descending search, so every party derives the same chain.
"""

from __future__ import annotations

import itertools
import math
import struct
import threading
from dataclasses import dataclass
from fractions import Fraction
import numpy as np

from hecnn.backends import kernels
from hecnn.backends.base import CipherVec, HEBackend, KeyMaterial, PlainVec, RawProduct
from hecnn.backends.encoding import coeffs_from_slots, slots_from_coeffs
from hecnn.errors import DecryptionOutOfRange, EncodeOverflow, FingerprintMismatch
from hecnn.params import HEParams

SIGMA = 3.2
SPARSE_WEIGHT = 64
INT64_COEFF_LIMIT = float(2**62)


@dataclass(frozen=True)
class CkksCipher:
    """Two ring components in evaluation/Montgomery form, one row per prime."""

    c0: np.ndarray
    c1: np.ndarray


@dataclass(frozen=True)
class CkksRaw:
    """Degree-2 accumulation: three components awaiting relinearization."""

    d0: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


@dataclass(frozen=True)
class CkksPlain:
    """Encoded plaintext rows in evaluation/Montgomery form."""

    rows: np.ndarray


@dataclass(frozen=True)
class SecretKeyPayload:
    s_eval: np.ndarray  # (all rows, n)


@dataclass(frozen=True)
class PublicKeyPayload:
    b: np.ndarray  # (fresh rows, n)
    a: np.ndarray


@dataclass(frozen=True)
class EvalKeyPayload:
    b: np.ndarray  # (digits, all rows, n)
    a: np.ndarray


class CkksBackend(HEBackend):
    name = "ckks"

    def __init__(self, params: HEParams) -> None:
        super().__init__(params)
        self.n = params.ring_degree
        ch = self.chain
        # per-level inverse constants, precomputed so ops never synchronize
        self._drop_inv = {
            lvl: ch.drop_inv_mont(lvl) for lvl in range(1, ch.num_levels + 1)
        }
        self._special_inv = {
            lvl: ch.special_inv_mont(lvl) for lvl in range(0, ch.num_levels + 1)
        }
        self._enc_counter = itertools.count()
        self._enc_lock = threading.Lock()

    # ------------------------------------------------------------------
    # Sampling
    # ------------------------------------------------------------------

    def _rng(self, *tag: int) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.params.rng_seed,) + tag))
        )

    def _sample_ternary(self, rng: np.random.Generator) -> np.ndarray:
        coeffs = np.zeros(self.n, dtype=np.int64)
        weight = min(SPARSE_WEIGHT, self.n // 2)
        idx = rng.choice(self.n, size=weight, replace=False)
        coeffs[idx] = rng.integers(0, 2, size=weight, dtype=np.int64) * 2 - 1
        return coeffs

    def _sample_gaussian(self, rng: np.random.Generator) -> np.ndarray:
        return np.round(rng.normal(0.0, SIGMA, self.n)).astype(np.int64)

    def _sample_uniform_rows(self, rng: np.random.Generator, rows: int) -> np.ndarray:
        out = np.empty((rows, self.n), dtype=np.uint64)
        for r in range(rows):
            out[r] = rng.integers(0, int(self.chain.p[r]), size=self.n, dtype=np.uint64)
        return out

    def _coeffs_to_rows(self, coeffs: np.ndarray, rows: int) -> np.ndarray:
        """Centered int64 coefficients -> evaluation/Montgomery rows (prefix)."""
        ch = self.chain
        out = np.empty((rows, self.n), dtype=np.uint64)
        kernels.spread_centered(coeffs, ch.p[:rows], ch.r2[:rows], ch.p_inv[:rows], out)
        kernels.ntt_fwd_rows(out, ch.twiddles[:rows], ch.p[:rows], ch.p_inv[:rows])
        return out

    def _coeffs_to_all_rows(self, coeffs: np.ndarray) -> np.ndarray:
        return self._coeffs_to_rows(coeffs, self.chain.num_rows)

    # ------------------------------------------------------------------
    # Keys
    # ------------------------------------------------------------------

    def keygen(self) -> KeyMaterial:
        ch = self.chain
        rows_all = ch.num_rows
        rows_fresh = self.fresh_level + 1

        s_coeffs = self._sample_ternary(self._rng(1))
        s_eval = self._coeffs_to_all_rows(s_coeffs)

        rng_pk = self._rng(2)
        pk_a = self._sample_uniform_rows(rng_pk, rows_fresh)
        e_eval = self._coeffs_to_rows(self._sample_gaussian(rng_pk), rows_fresh)
        pk_b = np.empty_like(pk_a)
        kernels.mul_rows(pk_a, s_eval[:rows_fresh], ch.p[:rows_fresh], ch.p_inv[:rows_fresh], pk_b)
        kernels.neg_rows(pk_b, ch.p[:rows_fresh], pk_b)
        kernels.add_rows(pk_b, e_eval, ch.p[:rows_fresh], pk_b)

        # evaluation key: digit j encrypts (P mod q_j) * s^2 on row j only
        s2_eval = np.empty_like(s_eval)
        kernels.mul_rows(s_eval, s_eval, ch.p, ch.p_inv, s2_eval)
        digits = rows_all - 1
        rng_evk = self._rng(3)
        evk_a = np.empty((digits, rows_all, self.n), dtype=np.uint64)
        evk_b = np.empty_like(evk_a)
        p_special = ch.special_prime
        for j in range(digits):
            evk_a[j] = self._sample_uniform_rows(rng_evk, rows_all)
            e_j = self._coeffs_to_all_rows(self._sample_gaussian(rng_evk))
            bj = evk_b[j]
            kernels.mul_rows(evk_a[j], s_eval, ch.p, ch.p_inv, bj)
            kernels.neg_rows(bj, ch.p, bj)
            kernels.add_rows(bj, e_j, ch.p, bj)
            q_j = int(ch.p[j])
            factor = (p_special % q_j) * ((1 << 64) % q_j) % q_j  # Montgomery form
            term = np.empty((1, self.n), dtype=np.uint64)
            kernels.scalar_mul_rows(
                s2_eval[j : j + 1],
                np.array([factor], dtype=np.uint64),
                ch.p[j : j + 1],
                ch.p_inv[j : j + 1],
                term,
            )
            kernels.add_rows(bj[j : j + 1], term, ch.p[j : j + 1], bj[j : j + 1])

        return KeyMaterial(
            fingerprint=self.params.fingerprint,
            backend_name=self.name,
            secret=SecretKeyPayload(s_eval=s_eval),
            public=PublicKeyPayload(b=pk_b, a=pk_a),
            evaluation=EvalKeyPayload(b=evk_b, a=evk_a),
        )

    # ------------------------------------------------------------------
    # Encoding / encryption
    # ------------------------------------------------------------------

    def _encode_coeffs(self, values: np.ndarray, scale: Fraction, level: int) -> np.ndarray:
        raw = coeffs_from_slots(values, float(scale), self.n)
        max_mag = float(np.max(np.abs(raw))) if raw.size else 0.0
        modulus_cap = float(self.chain.modulus_at_level(level)) / 2.0
        if max_mag >= min(modulus_cap, INT64_COEFF_LIMIT):
            raise EncodeOverflow(
                f"scaled coefficients reach {max_mag:.3g}, beyond the level-{level} "
                f"modulus capacity {modulus_cap:.3g}"
            )
        return np.round(raw).astype(np.int64)

    def _encode_impl(self, values: np.ndarray, scale: Fraction, level: int) -> CkksPlain:
        coeffs = self._encode_coeffs(values, scale, level)
        return CkksPlain(rows=self._coeffs_to_rows(coeffs, level + 1))

    def _encrypt_impl(
        self, values: np.ndarray, scale: Fraction, key: KeyMaterial, entropy: int | None
    ) -> CkksCipher:
        ch = self.chain
        rows = self.fresh_level + 1
        m_rows = self._coeffs_to_rows(
            self._encode_coeffs(values, scale, self.fresh_level), rows
        )
        if entropy is None:
            with self._enc_lock:
                rng = self._rng(4, 0, next(self._enc_counter))
        else:
            rng = self._rng(4, 1, entropy)
        v_eval = self._coeffs_to_rows(self._sample_ternary(rng), rows)
        e0 = self._coeffs_to_rows(self._sample_gaussian(rng), rows)
        e1 = self._coeffs_to_rows(self._sample_gaussian(rng), rows)
        pk: PublicKeyPayload = key.public
        c0 = np.empty((rows, self.n), dtype=np.uint64)
        c1 = np.empty_like(c0)
        kernels.mul_rows(v_eval, pk.b, ch.p[:rows], ch.p_inv[:rows], c0)
        kernels.add_rows(c0, e0, ch.p[:rows], c0)
        kernels.add_rows(c0, m_rows, ch.p[:rows], c0)
        kernels.mul_rows(v_eval, pk.a, ch.p[:rows], ch.p_inv[:rows], c1)
        kernels.add_rows(c1, e1, ch.p[:rows], c1)
        return CkksCipher(c0=c0, c1=c1)

    def _fresh_noise_bits(self) -> float:
        weight = min(SPARSE_WEIGHT, self.n // 2)
        coeff_err = SIGMA * math.sqrt(2.0 * weight + 1.0)
        slot_err = 4.0 * coeff_err * math.sqrt(self.n)
        return math.log2(slot_err) - self.params.precision_bits

    def _decrypt_coeffs(self, ct: CipherVec, key: KeyMaterial) -> np.ndarray:
        """Message coefficients via the base residue, with a consistency guard.

        Legitimate ciphertexts carry coefficients far below half the base
        prime, so the centered base residue is the exact integer coefficient.
        A second-prime residue check (or a magnitude margin at level 0)
        detects out-of-range coefficients instead of returning garbage.
        """
        ch = self.chain
        payload: CkksCipher = ct.payload
        k = ct.level + 1
        sk: SecretKeyPayload = key.secret
        rows = min(k, 2)
        m_eval = np.empty((rows, self.n), dtype=np.uint64)
        kernels.mul_rows(payload.c1[:rows], sk.s_eval[:rows], ch.p[:rows], ch.p_inv[:rows], m_eval)
        kernels.add_rows(m_eval, payload.c0[:rows], ch.p[:rows], m_eval)
        kernels.ntt_inv_rows(m_eval, ch.twiddles[:rows], ch.n_inv[:rows], ch.p[:rows], ch.p_inv[:rows])
        kernels.from_mont_rows(m_eval, ch.p[:rows], ch.p_inv[:rows])
        cent = np.empty((rows, self.n), dtype=np.int64)
        kernels.centered_rows(m_eval, ch.p[:rows], cent)
        if rows >= 2:
            bad = kernels.residue_check(cent[0], ch.p[1], m_eval[1])
            if bad:
                raise DecryptionOutOfRange(
                    f"{bad} coefficients inconsistent across residues; "
                    "ciphertext noise or magnitude exceeded the chain capacity"
                )
        else:
            if float(np.max(np.abs(cent[0]))) >= float(ch.base_prime) / 4.0:
                raise DecryptionOutOfRange(
                    "coefficients too close to the base modulus at level 0"
                )
        return cent[0]

    def _decrypt_impl(self, ct: CipherVec, key: KeyMaterial) -> np.ndarray:
        coeffs = self._decrypt_coeffs(ct, key)
        return slots_from_coeffs(coeffs.astype(np.float64), float(ct.scale), self.n)

    # ------------------------------------------------------------------
    # Arithmetic payload math
    # ------------------------------------------------------------------

    def _drop_impl(self, ct: CipherVec, level: int) -> CkksCipher:
        payload: CkksCipher = ct.payload
        rows = level + 1
        return CkksCipher(c0=payload.c0[:rows], c1=payload.c1[:rows])

    def _add_ct_ct_impl(self, a: CipherVec, b: CipherVec) -> CkksCipher:
        ch = self.chain
        pa: CkksCipher = a.payload
        pb: CkksCipher = b.payload
        rows = a.level + 1
        c0 = np.empty((rows, self.n), dtype=np.uint64)
        c1 = np.empty_like(c0)
        kernels.add_rows(pa.c0, pb.c0, ch.p[:rows], c0)
        kernels.add_rows(pa.c1, pb.c1, ch.p[:rows], c1)
        return CkksCipher(c0=c0, c1=c1)

    def _add_ct_pt_impl(self, ct: CipherVec, plain: PlainVec) -> CkksCipher:
        ch = self.chain
        pc: CkksCipher = ct.payload
        rows = ct.level + 1
        pt: CkksPlain = plain.payload
        c0 = np.empty((rows, self.n), dtype=np.uint64)
        kernels.add_rows(pc.c0, pt.rows[:rows], ch.p[:rows], c0)
        return CkksCipher(c0=c0, c1=pc.c1)

    def _rescale_comp(self, comp: np.ndarray, level: int) -> np.ndarray:
        ch = self.chain
        k = level + 1
        out = np.empty((k - 1, self.n), dtype=np.uint64)
        kernels.divide_drop_last(
            comp,
            ch.twiddles[:k],
            ch.n_inv[:k],
            ch.p[:k],
            ch.p_inv[:k],
            ch.r2[:k],
            self._drop_inv[level],
            out,
        )
        return out

    def _mul_ct_pt_impl(self, ct: CipherVec, plain: PlainVec) -> CkksCipher:
        ch = self.chain
        pc: CkksCipher = ct.payload
        rows = ct.level + 1
        pt: CkksPlain = plain.payload
        c0 = np.empty((rows, self.n), dtype=np.uint64)
        c1 = np.empty_like(c0)
        kernels.mul_rows(pc.c0, pt.rows[:rows], ch.p[:rows], ch.p_inv[:rows], c0)
        kernels.mul_rows(pc.c1, pt.rows[:rows], ch.p[:rows], ch.p_inv[:rows], c1)
        return CkksCipher(
            c0=self._rescale_comp(c0, ct.level), c1=self._rescale_comp(c1, ct.level)
        )

    def _mul_raw_impl(self, a: CipherVec, b: CipherVec) -> CkksRaw:
        ch = self.chain
        pa: CkksCipher = a.payload
        pb: CkksCipher = b.payload
        rows = a.level + 1
        d0 = np.empty((rows, self.n), dtype=np.uint64)
        d1 = np.empty_like(d0)
        d2 = np.empty_like(d0)
        kernels.ctct_products(
            pa.c0, pa.c1, pb.c0, pb.c1, ch.p[:rows], ch.p_inv[:rows], d0, d1, d2
        )
        return CkksRaw(d0=d0, d1=d1, d2=d2)

    def _raw_add_impl(self, x: RawProduct, y: RawProduct) -> CkksRaw:
        ch = self.chain
        px: CkksRaw = x.payload
        py: CkksRaw = y.payload
        rows = x.level + 1
        d0 = np.empty((rows, self.n), dtype=np.uint64)
        d1 = np.empty_like(d0)
        d2 = np.empty_like(d0)
        kernels.add_rows(px.d0, py.d0, ch.p[:rows], d0)
        kernels.add_rows(px.d1, py.d1, ch.p[:rows], d1)
        kernels.add_rows(px.d2, py.d2, ch.p[:rows], d2)
        return CkksRaw(d0=d0, d1=d1, d2=d2)

    def _raw_finalize_impl(self, x: RawProduct) -> CkksCipher:
        ch = self.chain
        evk: EvalKeyPayload = self._require_eval_key().evaluation
        px: CkksRaw = x.payload
        k = x.level + 1
        sp = ch.special_row

        d2_coeff = px.d2.copy()
        kernels.ntt_inv_rows(d2_coeff, ch.twiddles[:k], ch.n_inv[:k], ch.p[:k], ch.p_inv[:k])
        kernels.from_mont_rows(d2_coeff, ch.p[:k], ch.p_inv[:k])
        d2_cent = np.empty((k, self.n), dtype=np.int64)
        kernels.centered_rows(d2_coeff, ch.p[:k], d2_cent)

        acc0 = np.zeros((k + 1, self.n), dtype=np.uint64)
        acc1 = np.zeros_like(acc0)
        kernels.relin_accumulate(
            px.d2, d2_cent, evk.b, evk.a, sp, ch.twiddles, ch.p, ch.p_inv, ch.r2, acc0, acc1
        )
        rel0 = np.empty((k, self.n), dtype=np.uint64)
        rel1 = np.empty_like(rel0)
        sp_inv = self._special_inv[x.level]
        kernels.moddown_special(acc0, sp, ch.twiddles, ch.n_inv, ch.p, ch.p_inv, ch.r2, sp_inv, rel0)
        kernels.moddown_special(acc1, sp, ch.twiddles, ch.n_inv, ch.p, ch.p_inv, ch.r2, sp_inv, rel1)

        kernels.add_rows(rel0, px.d0, ch.p[:k], rel0)
        kernels.add_rows(rel1, px.d1, ch.p[:k], rel1)
        return CkksCipher(
            c0=self._rescale_comp(rel0, x.level), c1=self._rescale_comp(rel1, x.level)
        )

    # ------------------------------------------------------------------
    # Serialization payloads (coefficient form, little-endian, portable)
    # ------------------------------------------------------------------

    def _rows_to_coeff_bytes(self, rows_eval: np.ndarray) -> bytes:
        ch = self.chain
        k = rows_eval.shape[0]
        buf = rows_eval.copy()
        kernels.ntt_inv_rows(buf, ch.twiddles[:k], ch.n_inv[:k], ch.p[:k], ch.p_inv[:k])
        kernels.from_mont_rows(buf, ch.p[:k], ch.p_inv[:k])
        if buf.dtype.byteorder == ">":  # pragma: no cover - big-endian hosts
            buf = buf.byteswap()
        return buf.tobytes()

    def _rows_from_coeff_bytes(self, data: bytes, k: int) -> np.ndarray:
        ch = self.chain
        buf = np.frombuffer(data, dtype="<u8").reshape(k, self.n).copy()
        kernels.to_mont_rows(buf, ch.r2[:k], ch.p[:k], ch.p_inv[:k])
        kernels.ntt_fwd_rows(buf, ch.twiddles[:k], ch.p[:k], ch.p_inv[:k])
        return buf

    def cipher_payload_bytes(self, ct: CipherVec) -> bytes:
        payload: CkksCipher = ct.payload
        k = ct.level + 1
        head = struct.pack("<II", k, self.n)
        return head + self._rows_to_coeff_bytes(payload.c0) + self._rows_to_coeff_bytes(
            payload.c1
        )

    def cipher_from_payload(
        self, data: bytes, level: int, scale: Fraction, noise_bits: float
    ) -> CipherVec:
        k, n = struct.unpack_from("<II", data, 0)
        if n != self.n or k != level + 1:
            raise FingerprintMismatch("ciphertext payload does not match parameters")
        body = data[8:]
        half = k * self.n * 8
        c0 = self._rows_from_coeff_bytes(body[:half], k)
        c1 = self._rows_from_coeff_bytes(body[half : 2 * half], k)
        return CipherVec(
            payload=CkksCipher(c0=c0, c1=c1),
            level=level,
            scale=scale,
            slots=self.slots,
            fingerprint=self.fingerprint,
            backend_name=self.name,
            noise_bits=noise_bits,
        )

    @staticmethod
    def _pack_array(arr: np.ndarray) -> bytes:
        shape = np.asarray(arr.shape, dtype="<u4")
        return struct.pack("<I", arr.ndim) + shape.tobytes() + arr.astype("<u8").tobytes()

    @staticmethod
    def _unpack_array(data: bytes) -> np.ndarray:
        (ndim,) = struct.unpack_from("<I", data, 0)
        shape = tuple(int(x) for x in np.frombuffer(data, dtype="<u4", count=ndim, offset=4))
        count = 1
        for s in shape:
            count *= s
        return (
            np.frombuffer(data, dtype="<u8", count=count, offset=4 + 4 * ndim)
            .reshape(shape)
            .copy()
        )

    def key_payload_bytes(self, key: KeyMaterial) -> dict[str, bytes]:
        parts: dict[str, bytes] = {}
        if key.secret is not None:
            parts["secret"] = self._pack_array(key.secret.s_eval)
        if key.public is not None:
            parts["public"] = self._pack_array(key.public.b) + self._pack_array(key.public.a)
        if key.evaluation is not None:
            parts["evaluation"] = self._pack_array(key.evaluation.b) + self._pack_array(
                key.evaluation.a
            )
        return parts

    def key_from_payload(self, parts: dict[str, bytes]) -> KeyMaterial:
        secret = public = evaluation = None
        if "secret" in parts:
            secret = SecretKeyPayload(s_eval=self._unpack_array(parts["secret"]))
        if "public" in parts:
            data = parts["public"]
            b = self._unpack_array(data)
            a = self._unpack_array(data[self._packed_size(b) :])
            public = PublicKeyPayload(b=b, a=a)
        if "evaluation" in parts:
            data = parts["evaluation"]
            b = self._unpack_array(data)
            a = self._unpack_array(data[self._packed_size(b) :])
            evaluation = EvalKeyPayload(b=b, a=a)
        return KeyMaterial(
            fingerprint=self.fingerprint,
            backend_name=self.name,
            secret=secret,
            public=public,
            evaluation=evaluation,
        )

    @staticmethod
    def _packed_size(arr: np.ndarray) -> int:
        return 4 + 4 * arr.ndim + arr.size * 8
