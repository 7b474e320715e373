"""Named random streams.

Every stochastic operation draws from ``stream(seed, *tags)``: a Philox
counter-based generator keyed by the master seed and a purpose tag, so that
reordering stages never changes the draws of another stage.
"""

import hashlib

import numpy as np


def _tag_words(tags):
    words = []
    for tag in tags:
        digest = hashlib.md5(str(tag).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return tuple(words)


def stream(seed, *tags):
    """
    Derive an independent generator for a purpose.

    Args:
        seed: Master 64-bit seed
        *tags: Purpose tags (strings or ints), e.g. ("pretrain", epoch)

    Returns:
        numpy Generator backed by Philox
    """
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=_tag_words(tags))
    return np.random.Generator(np.random.Philox(seq))


def child_seed(seed, *tags):
    """Derive an integer seed (for libraries that take ints, e.g. networkx)."""
    return int(stream(seed, *tags).integers(0, 2**31 - 1))
