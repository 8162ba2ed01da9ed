"""Exception taxonomy shared by both HE backends and the higher layers."""


class HecnnError(Exception):
    """Base class for all package-specific errors."""


class DepthExhausted(HecnnError):
    """A multiplication was requested on a ciphertext with no levels left."""


class FingerprintMismatch(HecnnError):
    """Keys, ciphertexts, or plaintexts from incompatible parameter sets."""


class ScaleMismatch(HecnnError):
    """Addition of operands whose scales cannot be reconciled."""


class EncodeOverflow(HecnnError):
    """Scaled plaintext magnitude exceeds the active modulus."""


class MissingEvalKey(HecnnError):
    """Ciphertext-ciphertext multiplication attempted without an evaluation key."""


class DecryptionOutOfRange(HecnnError):
    """Decrypted coefficients exceed the correctness range of the chain."""


class ConfigurationError(HecnnError):
    """Parameter set cannot be realized (e.g. no suitable prime chain)."""


class ModelValidationError(HecnnError):
    """Model description violates the supported topology or dimension chain."""
