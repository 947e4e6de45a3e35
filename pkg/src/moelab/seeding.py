"""Counter-based random streams.

Every random draw in the package is made from a fresh generator keyed by
(global seed, purpose string, integer indices). Nothing consumes shared RNG
state, so any draw can be reproduced in isolation: re-running a step, or
resuming from a checkpoint, replays byte-identical randomness. Philox is the
counter-based bit generator backing the streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Map a (seed, purpose, indices...) tuple to a stable 64-bit key.

    The mapping is pure and independent of process state, platform hash
    randomization, and call order.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        else:
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def generator(*parts: int | str) -> np.random.Generator:
    """Fresh Philox generator keyed by the given parts."""
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))
