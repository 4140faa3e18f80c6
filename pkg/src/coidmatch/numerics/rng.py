"""Seeded, counter-based random streams.

Every stochastic draw in the pipeline (simulator noise, weight init,
dropout masks, random consensus features, epoch shuffles) comes from a
named stream so that runs are bit-reproducible and independent of
evaluation order or worker count.  Streams are Philox generators keyed
by a root seed plus an arbitrary tuple of tags; string tags are hashed
with a stable digest, never the salted builtin ``hash``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream tags must be int or str, got {type(tag).__name__}")


def stream(root_seed: int, *tags) -> np.random.Generator:
    """Return a generator for the (root_seed, *tags) stream.

    The same arguments always yield an identical stream; distinct tag
    tuples yield statistically independent streams.
    """
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    seq = np.random.SeedSequence(entropy)
    return np.random.Generator(np.random.Philox(seq))
