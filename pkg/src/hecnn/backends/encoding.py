"""Canonical-embedding encoding between slot values and ring coefficients.

A real vector of K = n/2 slot values is placed at K primitive 2n-th roots of
unity (one per conjugate pair) and pulled back to a real polynomial of
degree < n via an FFT with the odd-root twist folded in.  Pointwise slot
arithmetic then corresponds exactly to negacyclic ring arithmetic.  Slot
ordering is fixed but arbitrary; nothing in the package permutes slots.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=8)
def _twist(n: int) -> np.ndarray:
    # exp(i*pi*j/n): maps coefficient index j onto the odd-exponent roots
    return np.exp(1j * np.pi * np.arange(n) / n)


def coeffs_from_slots(values: np.ndarray, scale: float, n: int) -> np.ndarray:
    """Unrounded real coefficients whose embedding equals values * scale."""
    k = n // 2
    z = np.empty(n, dtype=np.complex128)
    z[:k] = values
    z[k:] = np.conj(values[::-1])
    t = np.fft.fft(z) / n
    return (t * np.conj(_twist(n))).real * scale


def slots_from_coeffs(coeffs: np.ndarray, scale: float, n: int) -> np.ndarray:
    """Slot values of a real coefficient vector, divided by the scale."""
    t = coeffs.astype(np.float64) * _twist(n)
    z = np.fft.ifft(t) * n
    return z[: n // 2].real / scale
