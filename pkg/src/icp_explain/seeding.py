"""Deterministic seed derivation.

Every random stage in the pipeline draws from a Generator whose seed is
derived from a master seed plus a path of labels (pair id, setting values,
stage name, sample index). Derivation hashes a canonical byte encoding of
the path, so the same path always yields the same stream regardless of
evaluation order or worker count.

Floats are encoded by their IEEE-754 bytes, so 0.1 and 0.1000000000000001
derive different streams while bit-identical settings share one.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_SEP = b"\x1f"


def _encode_part(part) -> bytes:
    if isinstance(part, bool):
        return b"b" + (b"1" if part else b"0")
    if isinstance(part, int):
        return b"i" + str(part).encode("ascii")
    if isinstance(part, float):
        return b"f" + struct.pack(">d", part)
    if isinstance(part, str):
        return b"s" + part.encode("utf-8")
    if isinstance(part, (tuple, list)):
        return b"t" + _SEP.join(_encode_part(p) for p in part) + b"t"
    raise TypeError(f"cannot derive a seed from {type(part).__name__!r}")


def derive_seed(*parts) -> int:
    """Hash a label path into a 64-bit unsigned seed."""
    digest = hashlib.sha256(_SEP.join(_encode_part(p) for p in parts)).digest()
    return int.from_bytes(digest[:8], "big")


def spawn_rng(seed: int) -> np.random.Generator:
    """Fresh PCG64 generator for one derived seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def per_sample_seeds(seed: int, count: int) -> list[int]:
    """Pre-split one stage seed into independent per-sample seeds.

    Splitting up front keeps parallel and serial schedules identical: sample
    k always sees the same stream no matter which worker runs it.
    """
    return [derive_seed(seed, k) for k in range(count)]
