"""Encrypted CNN inference on slot-packed ciphertexts.

The package is organized around a backend-neutral leveled-HE contract
(:mod:`hecnn.backends`), batch-across-slots packing (:mod:`hecnn.packing`),
encrypted CNN layer primitives (:mod:`hecnn.layers`), a model container with
a plaintext reference forward pass (:mod:`hecnn.model`), a static depth/cost
analyzer (:mod:`hecnn.analyzer`), and a two-stage parallel executor
(:mod:`hecnn.executor`).  The ``hecnn`` CLI wires these into the three-party
workflow (end user, model owner, untrusted server).
"""

from hecnn.params import HEParams, derive_params, security_estimate
from hecnn.errors import (
    HecnnError,
    DepthExhausted,
    FingerprintMismatch,
    ScaleMismatch,
    EncodeOverflow,
    MissingEvalKey,
    ConfigurationError,
    ModelValidationError,
)
from hecnn.backends import get_backend

__all__ = [
    "HEParams",
    "derive_params",
    "security_estimate",
    "get_backend",
    "HecnnError",
    "DepthExhausted",
    "FingerprintMismatch",
    "ScaleMismatch",
    "EncodeOverflow",
    "MissingEvalKey",
    "ConfigurationError",
    "ModelValidationError",
]

__version__ = "0.1.0"
