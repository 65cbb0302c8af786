"""Deterministic random-stream management.

Every stochastic component draws from its own generator, derived from the
experiment seed plus a string label path. Streams are stable under code
reordering: adding a new consumer elsewhere never shifts the draws of an
existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(labels: tuple[str, ...]) -> list[int]:
    """Hash a label path into integers usable as SeedSequence entropy."""
    joined = "\x1f".join(labels).encode("utf-8")
    digest = hashlib.sha256(joined).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def child_sequence(root_seed: int, *labels: str) -> np.random.SeedSequence:
    """Derive an independent seed sequence for the stream named by ``labels``."""
    if not labels:
        raise ValueError("at least one stream label is required")
    return np.random.SeedSequence([int(root_seed), *_label_entropy(labels)])


def child_rng(root_seed: int, *labels: str) -> np.random.Generator:
    """Generator for the named stream, independent of all other streams."""
    return np.random.default_rng(child_sequence(root_seed, *labels))
