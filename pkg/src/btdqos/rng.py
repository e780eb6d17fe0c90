"""Deterministic seed fan-out.

Every run takes a single top-level seed; sub-tasks (splits, repeated runs,
per-model training) get their own seeds derived by hashing the top-level
seed together with a label path.  Hash-based derivation keeps sibling
sub-tasks statistically independent and is stable across platforms and
Python versions, unlike ``hash()``.
"""

import hashlib


def derive_seed(base_seed: int, *labels) -> int:
    """Derive a 63-bit sub-seed from ``base_seed`` and a label path."""
    text = repr((int(base_seed),) + tuple(str(x) for x in labels))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
