"""Deterministic per-image RNG seed derivation."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, image_id: str) -> int:
    """Mix a global seed with an image id into a 64-bit stream seed.

    Stable across processes and platforms (unlike hash()), so parallel
    per-image work reproduces the single-process result.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    h.update(image_id.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")
