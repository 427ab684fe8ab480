"""Deterministic seed derivation.

A derived seed is the first eight bytes, read little-endian, of
``sha256(f"{master_seed}:{role}:{index}")`` (ASCII, decimal integers).
Roles live in separate namespaces, so ``(s, "chain", 0)`` and
``(s, "replication", 0)`` never share a stream.  Generators are
``numpy.random.Generator(PCG64(seed))``.
"""

import hashlib

import numpy as np

ROLES = ("chain", "replication", "direction", "calibration")
GENERATOR_NAME = "numpy.PCG64"


def seed_derivation(master_seed: int, role: str, index: int) -> int:
    if role not in ROLES:
        raise ValueError(f"unknown seed role {role!r}; expected one of {ROLES}")
    key = f"{int(master_seed)}:{role}:{int(index)}".encode("ascii")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def make_rng(master_seed: int, role: str, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_derivation(master_seed, role, index)))
