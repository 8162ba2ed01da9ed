"""Encrypted CNN primitives over packed cipher matrices.

All operations are backend-generic and pure; parallelization decisions live
entirely in :mod:`hecnn.executor`.  Summations accumulate in fixed ascending
index order so results are bit-identical no matter how work was partitioned.

Scale discipline: the activation folds its coefficients so that its output
returns to the canonical scale 2^r regardless of the input scale, which
keeps every addition in the pipeline between operands of exactly equal
scale (no alignment multiplies are ever needed).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from hecnn.backends.base import CipherVec, HEBackend, RawProduct
from hecnn.errors import DepthExhausted
from hecnn.packing import CipherKernel, CipherMatrix

# 2x2 pool window offsets in summation order: (di, dj) relative to the
# window's top-left output anchor.  Shared with the plaintext oracle.
WINDOW_ORDER: tuple[tuple[int, int], ...] = ((0, 0), (1, 0), (0, 1), (1, 1))

DEFAULT_ACT_COEFFS = (0.47, 0.50, 0.09)


@dataclass(frozen=True)
class ConvSpec:
    """Valid cross-correlation, stride 1, no padding."""

    filters: int
    kernel: tuple[int, int]

    def out_dims(self, m: int, n: int) -> tuple[int, int]:
        p, q = self.kernel
        if p > m or q > n:
            raise ValueError(f"kernel {self.kernel} larger than input {(m, n)}")
        return m - p + 1, n - q + 1


@dataclass(frozen=True)
class PolyActivation:
    """Degree-2 approximation of ReLU: g(u) = a0 + a1*u + a2*u^2.

    Valid for u in [-sqrt(2), sqrt(2)].  The pre-activation scale s maps an
    input y to u = y/s so the approximation is evaluated inside its valid
    interval; the layer computes s*g(y/s).
    """

    a0: float = DEFAULT_ACT_COEFFS[0]
    a1: float = DEFAULT_ACT_COEFFS[1]
    a2: float = DEFAULT_ACT_COEFFS[2]
    input_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.input_scale <= 0:
            raise ValueError("activation input_scale must be positive")

    def folded(self, pool_divisor: float = 1.0) -> tuple[float, float, float]:
        """Coefficients of s*g(y/s)/d as a polynomial in y."""
        s = self.input_scale
        return (
            self.a0 * s / pool_divisor,
            self.a1 / pool_divisor,
            self.a2 / (s * pool_divisor),
        )

    def apply(self, y: np.ndarray | float, pool_divisor: float = 1.0):
        """Plaintext evaluation, same operation order as the encrypted path."""
        c0, c1, c2 = self.folded(pool_divisor)
        return ((y * y) * c2 + y * c1) + c0


@dataclass(frozen=True)
class DenseSpec:
    """Fully connected layer dimensions; out_dim is the class count."""

    in_dim: int
    out_dim: int
    has_bias: bool = True


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d_enc(
    backend: HEBackend,
    x: CipherMatrix,
    kern: CipherKernel,
    out_rows: range | None = None,
) -> list[list[CipherVec]]:
    """Valid cross-correlation of a packed batch with a broadcast kernel.

    Each output cell is the inner product of the P x Q input window with the
    kernel, accumulated in ascending (p, q) order and finalized with a single
    relinearize+rescale; the layer consumes exactly one level.  ``out_rows``
    restricts computation to a band of output rows for partitioned execution.
    """
    m, n = x.dims
    p, q = kern.dims
    om, on = m - p + 1, n - q + 1
    if om < 1 or on < 1:
        raise ValueError(f"kernel {kern.dims} larger than input {(m, n)}")
    rows = out_rows if out_rows is not None else range(om)
    out: list[list[CipherVec]] = []
    for i in rows:
        if not (0 <= i < om):
            raise ValueError(f"output row {i} outside 0..{om - 1}")
        row: list[CipherVec] = []
        for j in range(on):
            acc: RawProduct | None = None
            for dp in range(p):
                for dq in range(q):
                    term = backend.mul_ct_ct_raw(x.grid[i + dp][j + dq], kern.grid[dp][dq])
                    acc = term if acc is None else backend.raw_add(acc, term)
            cell = backend.raw_finalize(acc)
            if kern.bias is not None:
                cell = backend.add_ct_ct(cell, kern.bias)
            row.append(cell)
        out.append(row)
    return out


def conv_output_matrix(rows: list[list[CipherVec]], batch: int) -> CipherMatrix:
    return CipherMatrix(grid=rows, batch=batch)


# ---------------------------------------------------------------------------
# Activation and fused activation + mean pool
# ---------------------------------------------------------------------------


def _act_plaintexts(
    backend: HEBackend,
    act: PolyActivation,
    level: int,
    scale: Fraction,
    pool_divisor: float,
):
    """Encode the folded coefficients once per layer at scales chosen so the
    quadratic and linear paths land at the canonical scale 2^r exactly."""
    if level < 2:
        raise DepthExhausted(f"activation needs level >= 2, ciphertext at {level}")
    c0, c1, c2 = act.folded(pool_divisor)
    canon = backend.canonical_scale
    chain = backend.chain
    p1 = chain.level_primes[level - 1]
    p2 = chain.level_primes[level - 2]
    scale_quad = canon * p1 * p2 / (scale * scale)
    scale_lin = canon * p1 / scale
    slots = backend.slots
    pt_quad = backend.encode_plain(np.full(slots, c2), scale=scale_quad, level=level - 1)
    pt_lin = backend.encode_plain(np.full(slots, c1), scale=scale_lin, level=level)
    pt_const = backend.encode_plain(np.full(slots, c0), scale=canon, level=level - 2)
    return pt_quad, pt_lin, pt_const


def approx_relu_cell(backend, y: CipherVec, pt_quad, pt_lin, pt_const) -> CipherVec:
    """Per-cell polynomial activation: ((y*y)*c2 + y*c1) + c0.

    One CT-CT multiply, two CT-PT multiplies, one CT-CT add, one CT-PT add;
    two levels on the deepest path, output at the canonical scale.
    """
    t = backend.mul_ct_ct(y, y)
    quad = backend.mul_ct_pt(t, pt_quad)
    lin = backend.mul_ct_pt(y, pt_lin)
    r = backend.add_ct_ct(quad, lin)
    return backend.add_ct_pt(r, pt_const)


def approx_relu(
    backend: HEBackend,
    x: CipherMatrix,
    act: PolyActivation,
    pool_divisor: float = 1.0,
) -> CipherMatrix:
    """Apply the degree-2 ReLU approximation to every cell (two levels)."""
    pts = _act_plaintexts(backend, act, x.level, x.scale, pool_divisor)
    grid = [[approx_relu_cell(backend, c, *pts) for c in row] for row in x.grid]
    return CipherMatrix(grid=grid, batch=x.batch)


def mean_pool_2x2(backend: HEBackend, x: CipherMatrix) -> CipherMatrix:
    """Sum each 2x2 window in fixed order; the 1/4 factor was folded upstream."""
    m, n = x.dims
    if m % 2 or n % 2:
        raise ValueError(f"mean pool needs even dims, got {(m, n)}")
    grid = []
    for i in range(m // 2):
        row = []
        for j in range(n // 2):
            acc = None
            for di, dj in WINDOW_ORDER:
                cell = x.grid[2 * i + di][2 * j + dj]
                acc = cell if acc is None else backend.add_ct_ct(acc, cell)
            row.append(acc)
        grid.append(row)
    return CipherMatrix(grid=grid, batch=x.batch)


def act_pool(backend: HEBackend, x: CipherMatrix, act: PolyActivation) -> CipherMatrix:
    """Fused activation + 2x2 mean pool: (g(a)+g(b)+g(c)+g(d))/4 per window.

    The 1/4 is folded into the activation coefficients, so the fusion costs
    no level beyond the activation's two; dims are halved.
    """
    m, n = x.dims
    if m % 2 or n % 2:
        raise ValueError(f"act_pool needs even dims, got {(m, n)}")
    return mean_pool_2x2(backend, approx_relu(backend, x, act, pool_divisor=4.0))


# ---------------------------------------------------------------------------
# Flatten and dense
# ---------------------------------------------------------------------------


def flatten(maps: list[CipherMatrix]) -> list[CipherVec]:
    """Row-major, channel-last re-indexing: flat[(i*J + j)*F + c] = maps[c][i][j].

    Pure re-indexing: no homomorphic operations, no level change.
    """
    if not maps:
        raise ValueError("flatten needs at least one feature map")
    i_dim, j_dim = maps[0].dims
    for c, fm in enumerate(maps):
        if fm.dims != (i_dim, j_dim):
            raise ValueError(f"feature map {c} has dims {fm.dims}, expected {(i_dim, j_dim)}")
    filters = len(maps)
    flat: list[CipherVec] = [None] * (i_dim * j_dim * filters)  # type: ignore[list-item]
    for i in range(i_dim):
        for j in range(j_dim):
            for c in range(filters):
                flat[(i * j_dim + j) * filters + c] = maps[c].grid[i][j]
    return flat


def flat_index(i: int, j: int, c: int, j_dim: int, filters: int) -> int:
    return (i * j_dim + j) * filters + c


def dense_column_partial(
    backend: HEBackend,
    x: list[CipherVec],
    w_col: list[CipherVec],
    lo: int,
    hi: int,
) -> RawProduct:
    """Raw partial inner product over input indices [lo, hi) of one class column."""
    acc = backend.mul_ct_ct_raw(x[lo], w_col[lo])
    for i in range(lo + 1, hi):
        acc = backend.raw_add(acc, backend.mul_ct_ct_raw(x[i], w_col[i]))
    return acc


def dense_combine(
    backend: HEBackend, partials: list[RawProduct], bias: CipherVec | None
) -> CipherVec:
    """Fold partials in ascending chunk order, finalize once, add the bias."""
    acc = partials[0]
    for part in partials[1:]:
        acc = backend.raw_add(acc, part)
    out = backend.raw_finalize(acc)
    if bias is not None:
        out = backend.add_ct_ct(out, bias)
    return out


def dense_enc(
    backend: HEBackend,
    x: list[CipherVec],
    w: list[list[CipherVec]],
    bias: list[CipherVec] | None = None,
) -> list[CipherVec]:
    """Encrypted dense layer: out[r] = sum_i x[i]*w[i][r] (+ bias[r]).

    One level; in_dim * out_dim CT-CT multiplies; no output activation.
    """
    in_dim = len(x)
    if len(w) != in_dim:
        raise ValueError(f"weight rows {len(w)} != input length {in_dim}")
    out_dim = len(w[0])
    out = []
    for r in range(out_dim):
        col = [w[i][r] for i in range(in_dim)]
        partial = dense_column_partial(backend, x, col, 0, in_dim)
        out.append(dense_combine(backend, [partial], bias[r] if bias else None))
    return out
