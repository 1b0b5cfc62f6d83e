"""Stable seed derivation so every RNG stream is independent and reproducible."""

from __future__ import annotations

import hashlib


def derive_seed(master: int, tag: str) -> int:
    """64-bit seed derived from a master seed and a stream tag; stable across
    platforms and Python versions."""
    digest = hashlib.blake2s(f"{master}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")
