"""Deterministic seed derivation.

Every random draw in a run is keyed by (root seed, purpose, round, client-id)
so results do not depend on execution order or thread count.
"""

import hashlib


def derive_seed(root, *parts):
    """Return a 32-bit seed derived from *root* and any number of key parts."""
    key = ':'.join(str(p) for p in (root,) + parts)
    return int(hashlib.sha256(key.encode()).hexdigest()[:8], 16)
