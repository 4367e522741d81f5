"""Stable per-item random streams."""

from __future__ import annotations

import hashlib


def derive_seed(*parts: object) -> int:
    """64-bit seed from the repr of ``parts``; independent of PYTHONHASHSEED and call order."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
