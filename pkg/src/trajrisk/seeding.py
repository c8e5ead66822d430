"""Named sub-seeds derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master: int, *names) -> int:
    """Stable 63-bit seed for the unit identified by ``names``."""
    words = [zlib.crc32(str(n).encode("utf-8")) for n in names]
    seq = np.random.SeedSequence([int(master) & (2**64 - 1)] + words)
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))
