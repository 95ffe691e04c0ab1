"""Instance-level memory bank: one stored feature per (sample, view).

Updates are hard replacements (no momentum mixing), matching a bank that
is refreshed with whatever the encoders produced in the current step.
Negative sampling draws uniformly without replacement over every slot of
every other sample; a slot is addressed by the flat id sample * m + view.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, SamplingError

log = logging.getLogger(__name__)

NORM_TOL = 1e-6


@dataclass
class MemoryBank:
    store: np.ndarray  # (n, m, D)

    @property
    def n(self) -> int:
        return self.store.shape[0]

    @property
    def m(self) -> int:
        return self.store.shape[1]

    @property
    def dim(self) -> int:
        return self.store.shape[2]

    def slot_id(self, sample: int, view: int) -> int:
        return sample * self.m + view

    def feature_by_slot(self, slot_id: int) -> np.ndarray:
        return self.store[slot_id // self.m, slot_id % self.m]


def bank_init(n: int, m: int, dim: int, seed: int) -> MemoryBank:
    """Deterministic bank of random non-negative unit vectors."""
    if n < 1 or m < 1 or dim < 1:
        raise ConfigError(f"bank dimensions must be positive, got ({n}, {m}, {dim})")
    rng = np.random.default_rng(np.uint64(seed))
    store = np.abs(rng.standard_normal((n, m, dim)))
    store /= np.linalg.norm(store, axis=2, keepdims=True)
    return MemoryBank(store)


def bank_update(bank: MemoryBank, sample: int, view: int, embedding: np.ndarray) -> None:
    """Replace one slot exactly with a unit-norm, non-negative embedding."""
    if not (0 <= sample < bank.n and 0 <= view < bank.m):
        raise IndexError(f"slot ({sample}, {view}) out of range ({bank.n}, {bank.m})")
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape != (bank.dim,):
        raise DomainError(f"embedding shape {emb.shape} does not match bank dim {bank.dim}")
    if abs(float(np.linalg.norm(emb)) - 1.0) > NORM_TOL or np.any(emb < 0.0):
        raise DomainError("embedding violates unit-norm/non-negativity invariants")
    bank.store[sample, view] = emb


def sample_negatives(
    bank: MemoryBank, exclude: int, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw `count` slots uniformly without replacement, skipping `exclude`.

    Returns (slot ids, features); deterministic for a given generator state.
    """
    if not (0 <= exclude < bank.n):
        raise IndexError(f"exclude index {exclude} out of range for n={bank.n}")
    available = (bank.n - 1) * bank.m
    if count > available:
        raise SamplingError(
            f"requested {count} negatives but only {available} slots exist "
            f"outside sample {exclude}"
        )
    if count == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, bank.dim))
    draws = rng.choice(available, size=count, replace=False)
    samples = draws // bank.m
    samples = np.where(samples >= exclude, samples + 1, samples)
    views = draws % bank.m
    ids = samples * bank.m + views
    return ids.astype(np.int64), bank.store[samples, views].copy()


def clamp_pool_size(requested: int, bank: MemoryBank) -> int:
    """Clamp a configured negative-pool size to what the bank can supply."""
    available = (bank.n - 1) * bank.m
    if requested > available:
        log.warning(
            "negative pool size %d clamped to %d available slots", requested, available
        )
        return available
    return requested
