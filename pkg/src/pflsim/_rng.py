import hashlib

import numpy as np


def stable_int(text: str) -> int:
    """64-bit integer digest of ``text``; stable across processes (unlike ``hash``)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def _key(part) -> int:
    if isinstance(part, str):
        return stable_int(part)
    return int(part) & 0xFFFFFFFFFFFFFFFF


def rng_for(*parts) -> np.random.Generator:
    """Independent generator keyed by a tuple of ints and strings."""
    return np.random.default_rng(np.random.SeedSequence([_key(p) for p in parts]))
