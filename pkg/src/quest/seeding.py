"""Deterministic seed derivation for pipeline stages.

Every stage of a run (pair generation, adapter init, optimization, answer
sampling) draws its seed from the global seed plus a string path, so a
fused pipeline and its replayed stages see identical randomness.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, *labels: object) -> int:
    """Mix an integer seed with a sequence of labels into a new 63-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x00")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little") >> 1
