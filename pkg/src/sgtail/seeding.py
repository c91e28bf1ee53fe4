"""Seed derivation.

All randomness in the project flows from one master seed through
:func:`derive`, a splitmix64 step applied to the parent seed mixed with a
hashed label. Children are independent streams and regenerable in isolation
(e.g. the val split never depends on how many train scenes were drawn).
"""

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


def _label_key(label):
    h = 0xCBF29CE484222325  # FNV-1a over the UTF-8 label
    for byte in str(label).encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def derive(seed, *labels):
    """Child seed for (seed, labels...). Deterministic, order-sensitive."""
    x = int(seed) & _MASK
    for label in labels:
        x = _splitmix64(x ^ _label_key(label))
    return x


def rng(seed, *labels):
    """numpy Generator seeded from derive(seed, *labels)."""
    return np.random.Generator(np.random.PCG64(derive(seed, *labels)))
