"""Canonical byte serialization and 128-bit identity digests.

Operator and chunk identities must be stable across process runs and are
persisted in the disk store, so they are computed with a cryptographic hash
(BLAKE2b truncated to 128 bits) over a length-prefixed, type-tagged encoding
that admits no map-ordering or concatenation ambiguity.
"""

from __future__ import annotations

import hashlib
import struct


def _lp(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def encode(obj) -> bytes:
    """Encode a parameter value into canonical bytes.

    Supported: None, bool, int, float, str, bytes, list/tuple, dict with
    string keys (encoded in sorted key order).
    """
    if obj is None:
        return b"N"
    if isinstance(obj, bool):
        return b"T" if obj else b"F"
    if isinstance(obj, int):
        return b"i" + _lp(str(obj).encode("ascii"))
    if isinstance(obj, float):
        return b"f" + struct.pack("<d", obj)
    if isinstance(obj, str):
        return b"s" + _lp(obj.encode("utf-8"))
    if isinstance(obj, (bytes, bytearray, memoryview)):
        return b"b" + _lp(bytes(obj))
    if isinstance(obj, (list, tuple)):
        parts = [b"l", struct.pack("<Q", len(obj))]
        parts.extend(encode(x) for x in obj)
        return b"".join(parts)
    if isinstance(obj, dict):
        keys = sorted(obj.keys())
        parts = [b"d", struct.pack("<Q", len(keys))]
        for k in keys:
            if not isinstance(k, str):
                raise TypeError(f"canonical dict keys must be str, got {type(k)!r}")
            parts.append(encode(k))
            parts.append(encode(obj[k]))
        return b"".join(parts)
    raise TypeError(f"cannot canonically encode {type(obj)!r}")


def digest128(*parts: bytes) -> bytes:
    """BLAKE2b digest truncated to 16 bytes over length-prefixed parts."""
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(_lp(p))
    return h.digest()
