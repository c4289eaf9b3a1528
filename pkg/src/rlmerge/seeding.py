"""Purpose-keyed seed derivation.

Every random component in the package draws its seed from one root seed
through `derive_seed`, so any component can be reproduced in isolation
and no two purposes ever share a stream by accident.
"""

from __future__ import annotations

import hashlib

_SEP = b"\x1f"


def derive_seed(*parts: int | str, bits: int = 64) -> int:
    """Hash a tuple of ints/strings into a deterministic unsigned seed.

    `bits` is 64 for ordinary generator seeds and 128 for counter-based
    keys. Parts are type-tagged, so derive_seed(1) != derive_seed("1").
    """
    if bits not in (64, 128):
        raise ValueError(f"bits must be 64 or 128, got {bits}")
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
        tag = b"i" if isinstance(part, int) else b"s"
        h.update(tag + str(part).encode("utf-8") + _SEP)
    return int.from_bytes(h.digest()[: bits // 8], "little")
