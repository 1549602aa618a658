"""Labeled, counter-based random streams derived from one root seed.

Every consumer asks for ``make_rng(seed, label, *index)``; the stream depends
only on those arguments, never on call order or ambient entropy.
"""
import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_key(label):
    return zlib.crc32(label.encode("utf-8"))


def make_rng(seed, label, *index):
    """Return a Philox-backed generator keyed on ``(seed, label, index...)``."""
    seed = int(seed) & _MASK64
    spawn_key = (_label_key(label),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(seed, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, label, *index):
    """A plain 64-bit integer seed derived the same way (for nested configs)."""
    rng = make_rng(seed, label, *index)
    return int(rng.integers(0, 2**63 - 1))
