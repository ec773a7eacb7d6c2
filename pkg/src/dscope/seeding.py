"""Named random streams derived from one run seed."""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` under run ``seed``.

    Streams with different names never share state, so e.g. the shuffle order
    can be reproduced without re-running weight initialisation.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key]))
