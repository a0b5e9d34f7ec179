"""Per-purpose seeds derived from one root seed.

``derive_seed(root, "init")`` hashes the pair through numpy's SeedSequence,
so each stream stays fixed when unrelated options (or other streams) change.
"""

import zlib

import numpy as np

PURPOSES = ("data", "init", "shuffle", "sampling", "split")


def derive_seed(root: int, purpose: str) -> int:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown seed purpose {purpose!r}")
    tag = zlib.crc32(purpose.encode())
    return int(np.random.SeedSequence([int(root), tag]).generate_state(1, dtype=np.uint64)[0] >> 1)
