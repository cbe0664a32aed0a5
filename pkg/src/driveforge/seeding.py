"""Stable seed derivation.

Sub-seeds are derived by hashing, not by drawing from a shared RNG, so the
result is independent of execution order. That is what makes parallel
per-scene generation byte-identical to the serial run.
"""

from __future__ import annotations

import hashlib


def derive_seed(root_seed: int, *parts) -> int:
    """A 63-bit seed determined by the root seed and a label path."""
    text = ":".join([str(int(root_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
