"""Counter-based seeds and the rounding rules shared across the pipeline."""

from __future__ import annotations

import hashlib
import math


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from an arbitrary tuple of parts.

    Independent of PYTHONHASHSEED, so runs replay across processes.
    """
    h = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big") >> 1


def ceil_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)``, immune to float noise such as 0.7 * 10."""
    return min(n, math.ceil(round(fraction * n, 9)))


def round_half_up(x: float) -> int:
    return math.floor(round(x, 9) + 0.5)
