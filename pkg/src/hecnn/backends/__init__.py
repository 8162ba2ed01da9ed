"""HE backends implementing the shared leveled-HE contract."""

from __future__ import annotations

from hecnn.params import HEParams


def get_backend(name: str, params: HEParams):
    """Instantiate a backend by name: ``"ckks"`` (real) or ``"ref"`` (exact simulator)."""
    name = name.lower()
    if name == "ckks":
        from hecnn.backends.ckks import CkksBackend

        return CkksBackend(params)
    if name in ("ref", "reference"):
        from hecnn.backends.reference import RefBackend

        return RefBackend(params)
    raise ValueError(f"unknown backend {name!r}; expected 'ckks' or 'ref'")


__all__ = ["get_backend"]
