"""Named, platform-stable RNG substreams derived from one root seed.

Every random draw in the engine flows from ``substream(root_seed, *keys)``
where the keys name the purpose ("init", "shuffle", "bootstrap", ...). The
keys are hashed with SHA-256, so the same (seed, keys) pair yields an
identical stream on any machine.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(key) -> list[int]:
    if isinstance(key, (int, np.integer)):
        return [int(key) & 0xFFFFFFFF, (int(key) >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(root_seed: int, *keys) -> np.random.Generator:
    """A generator keyed by (root seed, purpose keys), independent per key set."""
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        entropy.extend(_key_words(key))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
