"""Deterministic seed derivation so each consumer gets an independent stream."""

import hashlib


def derive_seed(base: int, tag: str) -> int:
    """Stable 63-bit seed derived from a base seed and a purpose tag."""
    digest = hashlib.sha256(f"{base}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
