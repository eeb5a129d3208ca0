"""Named, counter-based random streams.

Each ``(seed, role, *keys)`` tuple maps to its own Philox stream, so what one
replication draws never depends on how much another replication consumed.
"""

from __future__ import annotations

import zlib

import numpy as np


def role_id(role: str) -> int:
    return zlib.crc32(role.encode("utf-8"))


def stream(seed: int, role: str, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(role_id(role),) + tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derived_seed(seed: int, role: str, *keys: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(role_id(role),) + tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
