"""Seed derivation shared by every stochastic component.

All randomness flows through Philox (a counter-based generator) keyed by a
``SeedSequence`` over the caller's key tuple, so a stream depends only on its
keys and never on call order or scheduling.
"""

import hashlib

import numpy as np


def _as_entropy(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.blake2b(str(key).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(*keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_as_entropy(k) for k in keys])


def derive_rng(*keys) -> np.random.Generator:
    """Independent generator for the stream named by ``keys``."""
    return np.random.Generator(np.random.Philox(seed_sequence(*keys)))


def derive_seed(*keys) -> int:
    """A 63-bit integer seed for the stream named by ``keys``."""
    state = seed_sequence(*keys).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
