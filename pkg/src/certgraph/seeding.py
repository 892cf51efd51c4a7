"""Stable seed derivation.

Python's ``hash`` is salted per process, so per-node and per-episode random
streams are derived from a keyed BLAKE2 digest of the parts instead.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(*parts: object) -> int:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(*parts: object) -> random.Random:
    return random.Random(derive_seed(*parts))
