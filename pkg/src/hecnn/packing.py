"""Batch-across-slots packing: one ciphertext per pixel position.

A batch of B <= K grayscale images becomes an M x N grid of ciphertexts
where cell (i, j) holds pixel (i, j) of every image, one image per slot.
Weights broadcast a single scalar across all slots.  Slot j belongs to
image j through the entire pipeline; nothing ever moves values between
slots, so the correspondence is stable by construction.

This layout maximizes throughput at the cost of single-image latency.  The
known alternative — packing one whole image into a single ciphertext and
convolving with slot rotations — trades that throughput for latency and is
deliberately out of scope here (no rotation keys exist in this package).
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hecnn.backends.base import CipherVec, HEBackend, KeyMaterial
from hecnn import serialization as ser


@dataclass(frozen=True)
class ImageBatch:
    """B uniform grayscale images with values normalized to [0, 1]."""

    images: np.ndarray  # (B, M, N) float64

    def __post_init__(self) -> None:
        arr = np.asarray(self.images, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("expected images of shape (B, M, N)")
        object.__setattr__(self, "images", arr)

    @property
    def batch(self) -> int:
        return self.images.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]


@dataclass
class CipherMatrix:
    """M x N grid of ciphertexts packing a batch pixel-wise."""

    grid: list[list[CipherVec]]
    batch: int

    @property
    def dims(self) -> tuple[int, int]:
        return len(self.grid), len(self.grid[0])

    @property
    def level(self) -> int:
        return self.grid[0][0].level

    @property
    def scale(self):
        return self.grid[0][0].scale

    def cells(self):
        for row in self.grid:
            yield from row


@dataclass
class CipherKernel:
    """P x Q grid of slot-broadcast weight ciphertexts, plus optional bias."""

    grid: list[list[CipherVec]]
    bias: CipherVec | None = None

    @property
    def dims(self) -> tuple[int, int]:
        return len(self.grid), len(self.grid[0])


def pack_batch(
    backend: HEBackend,
    batch: ImageBatch,
    key: KeyMaterial,
    workers: int = 1,
) -> CipherMatrix:
    """Encrypt a batch into M*N ciphertexts; unused slots are zero-filled.

    Zero fill (rather than ciphertext garbage) keeps slot-wise reductions
    clean when B < K.  Cells can be encrypted in parallel; the per-cell
    encryption randomness is derived from the cell index, so the grid is
    identical no matter the worker count.
    """
    b = batch.batch
    if b > backend.slots:
        raise ValueError(f"batch of {b} exceeds {backend.slots} slots")
    m, n = batch.dims
    flat = [batch.images[:, i, j] for i in range(m) for j in range(n)]

    def enc(idx: int) -> CipherVec:
        return backend.encrypt(flat[idx], key, entropy=idx)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(enc, range(m * n)))
    else:
        cells = [enc(i) for i in range(m * n)]
    grid = [[cells[i * n + j] for j in range(n)] for i in range(m)]
    return CipherMatrix(grid=grid, batch=b)


def pack_kernel(
    backend: HEBackend,
    weights: np.ndarray,
    key: KeyMaterial,
    bias: float | None = None,
) -> CipherKernel:
    """Broadcast-encrypt a P x Q kernel (every slot carries the same weight)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or not np.all(np.isfinite(w)):
        raise ValueError("kernel weights must be a finite 2-D array")
    grid = [
        [backend.encrypt(np.full(backend.slots, w[p, q]), key) for q in range(w.shape[1])]
        for p in range(w.shape[0])
    ]
    bias_ct = None
    if bias is not None:
        bias_ct = backend.encrypt(np.full(backend.slots, float(bias)), key)
    return CipherKernel(grid=grid, bias=bias_ct)


def broadcast_encrypt(backend: HEBackend, value: float, key: KeyMaterial, scale=None) -> CipherVec:
    """Encrypt a single scalar into all slots (weight/bias broadcast)."""
    return backend.encrypt(np.full(backend.slots, float(value)), key, scale=scale)


def unpack_batch(backend: HEBackend, cm: CipherMatrix, key: KeyMaterial) -> ImageBatch:
    """Decrypt a cipher matrix back to its B images."""
    m, n = cm.dims
    out = np.empty((cm.batch, m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            out[:, i, j] = backend.decrypt(cm.grid[i][j], key).values[: cm.batch]
    return ImageBatch(images=out)


def unpack_logits(
    backend: HEBackend, cts: list[CipherVec], key: KeyMaterial, batch: int
) -> np.ndarray:
    """Decrypt R output ciphertexts into a (B, R) logits matrix."""
    out = np.empty((batch, len(cts)), dtype=np.float64)
    for r, ct in enumerate(cts):
        out[:, r] = backend.decrypt(ct, key).values[:batch]
    return out


# ---------------------------------------------------------------------------
# Container files
# ---------------------------------------------------------------------------


def save_matrix(backend: HEBackend, cm: CipherMatrix, path: str | Path) -> None:
    m, n = cm.dims
    head = struct.pack("<III", m, n, cm.batch)
    body = b"".join(ser.cipher_record(backend, ct) for ct in cm.cells())
    Path(path).write_bytes(ser.wrap(ser.KIND_CIPHER_MATRIX, backend, head + body))


def load_matrix(backend: HEBackend, path: str | Path) -> CipherMatrix:
    env = ser.read_envelope(path, expected_kind=ser.KIND_CIPHER_MATRIX, backend=backend)
    m, n, batch = struct.unpack_from("<III", env.payload, 0)
    offset = 12
    grid = []
    for _ in range(m):
        row = []
        for _ in range(n):
            ct, offset = ser.cipher_from_record(backend, env.payload, offset)
            row.append(ct)
        grid.append(row)
    return CipherMatrix(grid=grid, batch=batch)


def save_cipher_list(
    backend: HEBackend, cts: list[CipherVec], batch: int, path: str | Path
) -> None:
    head = struct.pack("<II", len(cts), batch)
    body = b"".join(ser.cipher_record(backend, ct) for ct in cts)
    Path(path).write_bytes(ser.wrap(ser.KIND_CIPHER_LIST, backend, head + body))


def load_cipher_list(backend: HEBackend, path: str | Path) -> tuple[list[CipherVec], int]:
    env = ser.read_envelope(path, expected_kind=ser.KIND_CIPHER_LIST, backend=backend)
    count, batch = struct.unpack_from("<II", env.payload, 0)
    offset = 8
    cts = []
    for _ in range(count):
        ct, offset = ser.cipher_from_record(backend, env.payload, offset)
        cts.append(ct)
    return cts, batch
