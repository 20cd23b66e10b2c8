"""Deterministic RNG stream derivation.

Every random draw in the package comes from a generator derived from a master
seed plus a path of string/integer labels (stage name, layer name, subject
id, epoch, ...). Labels are hashed with SHA-256, never Python's ``hash``, so
streams are stable across processes and machines.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_to_int(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(master_seed: int, *labels: str | int) -> np.random.SeedSequence:
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_label_to_int(lab) for lab in labels)
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed: int, *labels: str | int) -> np.random.Generator:
    """Generator for the stream identified by ``(master_seed, *labels)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *labels)))
