"""Set tier: contrast pools, pairwise similarity sets and the view filter.

An anchor's positive pool starts as its m current-batch embeddings plus
its m stored bank features; the negative pool is sampled from the bank.
Similarities are smoothed over epochs through a bounded ring buffer per
(anchor, negative-slot) pair, and the filter transfers the top-k smoothed
negatives into the positive pool, breaking ties toward lower slot ids.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .encoders import Embedding
from .errors import ConfigError, DomainError, IpmcError, ShapeError
from .membank import MemoryBank, clamp_pool_size, sample_negatives

PROV_BATCH = "batch"
PROV_BANK = "bank"
PROV_TRANSFERRED = "transferred"

_SIM_TOL = 1e-9


@dataclass(frozen=True)
class PoolConfig:
    pool_negatives: int = 4096
    include_bank_positives: bool = True
    k_top: int = 1
    eta: int = 10
    sap_start_epoch: int = 10

    def __post_init__(self):
        if self.pool_negatives < 0 or self.k_top < 0:
            raise ConfigError("pool sizes must be non-negative")
        if self.eta < 1:
            raise ConfigError("moving-average window must be at least 1")


@dataclass
class ContrastPools:
    anchor: int
    pos_feats: np.ndarray        # (n_pos, D)
    pos_provenance: list[str]
    neg_feats: np.ndarray        # (n_neg, D)
    neg_ids: np.ndarray          # (n_neg,) bank slot ids

    @property
    def n_pos(self) -> int:
        return self.pos_feats.shape[0]

    @property
    def n_neg(self) -> int:
        return self.neg_feats.shape[0]


@dataclass
class SimilaritySets:
    s_pos: np.ndarray  # C(n_pos, 2) values
    s_neg: np.ndarray  # n_pos * n_neg values


class SimilarityTracker:
    """Per-(anchor, negative-slot) similarity windows over the last eta epochs.

    Each anchor contributes at most one record per key per epoch, so the
    window of a key holds at most eta values: those recorded in epochs
    (e - eta, e].  Records older than that expire, which keeps memory
    proportional to eta, not to the run length.  Storage is one slot of
    (ids, values) arrays per anchor per live epoch.
    """

    def __init__(self, eta: int):
        if eta < 1:
            raise ConfigError("eta must be at least 1")
        self.eta = eta
        self._slots: dict = {}        # anchor -> deque[(epoch, ids, values)]
        self._last_epoch: dict = {}   # anchor -> most recent epoch

    def update_many(
        self, anchor, ids: np.ndarray, values: np.ndarray, epoch: int
    ) -> np.ndarray:
        """Record one epoch's raw similarities; returns the smoothed values."""
        prev = self._last_epoch.get(anchor)
        if prev is not None and epoch < prev:
            raise IpmcError(
                f"epoch went backwards for anchor {anchor!r}: {prev} -> {epoch}"
            )
        ids = np.asarray(ids, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        query_ids = ids
        slots = self._slots.setdefault(anchor, deque())
        if prev == epoch and slots and slots[-1][0] == epoch:
            # merge repeated records within one epoch (same step granularity)
            _, old_ids, old_values = slots.pop()
            ids = np.concatenate([old_ids, ids])
            values = np.concatenate([old_values, values])
        slots.append((epoch, ids, values))
        self._last_epoch[anchor] = epoch
        while slots[0][0] <= epoch - self.eta:
            slots.popleft()
        return self._query(anchor, query_ids)

    def _query(self, anchor, ids: np.ndarray) -> np.ndarray:
        slots = self._slots[anchor]
        all_ids = np.concatenate([s[1] for s in slots])
        all_values = np.concatenate([s[2] for s in slots])
        uniq, inverse = np.unique(all_ids, return_inverse=True)
        sums = np.bincount(inverse, weights=all_values)
        counts = np.bincount(inverse)
        pos = np.searchsorted(uniq, ids)
        ok = (pos < len(uniq)) & (uniq[np.minimum(pos, len(uniq) - 1)] == ids)
        if not np.all(ok):
            raise KeyError(f"no recorded history for ids {ids[~ok].tolist()}")
        return sums[pos] / counts[pos]

    def update(self, key, epoch: int, value: float) -> float:
        """Single-key record; key is (anchor, negative slot id)."""
        anchor, nid = key
        return float(
            self.update_many(anchor, np.array([nid]), np.array([value]), epoch)[0]
        )

    def smoothed(self, key) -> float:
        """Window mean of one key as of its anchor's latest recorded epoch."""
        anchor, nid = key
        if anchor not in self._slots:
            raise KeyError(f"no history for anchor {anchor!r}")
        return float(self._query(anchor, np.array([nid], dtype=np.int64))[0])

    def window(self, key) -> list[float]:
        """Chronological values currently inside the key's window."""
        anchor, nid = key
        out = []
        for _, ids, values in self._slots.get(anchor, ()):
            hits = np.flatnonzero(ids == nid)
            out.extend(values[hits].tolist())
        return out


def moving_average_update(
    tracker: SimilarityTracker, epoch: int, value: float, key=(0, 0)
) -> float:
    """Record one raw similarity and return the eta-window arithmetic mean."""
    return tracker.update(key, epoch, value)


def cosine_similarity(a, b) -> float:
    """Cosine of two embeddings; in [0, 1] for non-negative unit vectors."""
    av = a.vector if isinstance(a, Embedding) else np.asarray(a, dtype=np.float64)
    bv = b.vector if isinstance(b, Embedding) else np.asarray(b, dtype=np.float64)
    na, nb = float(np.linalg.norm(av)), float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine_similarity: zero-norm input")
    return float(av @ bv) / (na * nb)


def build_pools(
    batch_embeddings: list[np.ndarray],
    bank: MemoryBank,
    anchor: int,
    config: PoolConfig,
    rng: np.random.Generator,
) -> ContrastPools:
    """Assemble an anchor's positive and negative pools for one step."""
    if len(batch_embeddings) != bank.m:
        raise ShapeError(
            f"need all {bank.m} views of the anchor, got {len(batch_embeddings)}"
        )
    pos = [np.asarray(e, dtype=np.float64) for e in batch_embeddings]
    provenance = [PROV_BATCH] * bank.m
    if config.include_bank_positives:
        pos.extend(bank.store[anchor])
        provenance.extend([PROV_BANK] * bank.m)
    count = clamp_pool_size(config.pool_negatives, bank)
    neg_ids, neg_feats = sample_negatives(bank, anchor, count, rng)
    return ContrastPools(anchor, np.stack(pos), provenance, neg_feats, neg_ids)


def record_pool_similarities(
    pools: ContrastPools, tracker: SimilarityTracker, epoch: int
) -> dict[int, float]:
    """Feed each negative's max-over-positives cosine into the tracker.

    Returns the smoothed score per negative slot id for the current epoch.
    """
    raw = pools.pos_feats @ pools.neg_feats.T  # (n_pos, n_neg) of unit vectors
    best = raw.max(axis=0) if pools.n_pos else np.zeros(pools.n_neg)
    smoothed = tracker.update_many(pools.anchor, pools.neg_ids, best, epoch)
    return dict(zip(pools.neg_ids.tolist(), smoothed.tolist()))


def view_filter_transfer(
    pools: ContrastPools,
    tracker: SimilarityTracker,
    k: int,
    epoch: int,
    config: PoolConfig,
    scores: dict[int, float] | np.ndarray | None = None,
) -> tuple[ContrastPools, list[tuple]]:
    """Move the k highest-smoothed negatives into the positive pool.

    Requires record_pool_similarities to have run for this epoch; pass its
    return value as `scores` (dict, or an array aligned with neg_ids) to
    skip the tracker lookup.  Returns the adjusted pools and the transfer
    events (epoch, anchor, slot id, smoothed similarity).
    """
    if epoch < config.sap_start_epoch:
        raise ConfigError(
            f"view filter starts at epoch {config.sap_start_epoch}, got {epoch}"
        )
    if k == 0:
        return pools, []
    if k >= pools.n_neg:
        raise ConfigError(f"k={k} must be below the negative-pool size {pools.n_neg}")
    try:
        if scores is None:
            scores = tracker._query(pools.anchor, pools.neg_ids)
        elif isinstance(scores, dict):
            scores = np.array([scores[nid] for nid in pools.neg_ids.tolist()])
    except KeyError as exc:
        raise IpmcError(
            "view filter needs recorded similarities for every pooled negative"
        ) from exc
    # ties break toward the lower slot id
    order = np.lexsort((pools.neg_ids, -scores))
    chosen = np.sort(order[:k])
    keep = np.setdiff1d(np.arange(pools.n_neg), chosen, assume_unique=True)
    events = [
        (epoch, pools.anchor, int(pools.neg_ids[i]), float(scores[i])) for i in chosen
    ]
    moved = ContrastPools(
        pools.anchor,
        np.concatenate([pools.pos_feats, pools.neg_feats[chosen]]),
        pools.pos_provenance + [PROV_TRANSFERRED] * len(chosen),
        pools.neg_feats[keep],
        pools.neg_ids[keep],
    )
    return moved, events


_PAIR_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def pos_pair_indices(n_pos: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the C(n_pos, 2) unordered positive pairs (cached)."""
    cached = _PAIR_CACHE.get(n_pos)
    if cached is None:
        cached = _PAIR_CACHE[n_pos] = np.triu_indices(n_pos, k=1)
    return cached


def pair_similarities(pools: ContrastPools) -> SimilaritySets:
    """Enumerate S_pos over unordered positive pairs and S_neg over pos x neg."""
    if pools.n_pos < 2:
        raise ShapeError(f"need at least 2 positives, got {pools.n_pos}")
    if pools.n_neg < 1:
        raise ShapeError("need at least 1 negative")
    ii, jj = pos_pair_indices(pools.n_pos)
    s_pos = np.einsum("ij,ij->i", pools.pos_feats[ii], pools.pos_feats[jj])
    s_neg = (pools.pos_feats @ pools.neg_feats.T).ravel()
    # unit-vector dot products may exceed [0, 1] only by rounding noise
    s_pos = np.clip(s_pos, 0.0, 1.0, out=s_pos) if _within_tol(s_pos) else s_pos
    s_neg = np.clip(s_neg, 0.0, 1.0, out=s_neg) if _within_tol(s_neg) else s_neg
    return SimilaritySets(s_pos, s_neg)


def _within_tol(values: np.ndarray) -> bool:
    return bool(np.all(values >= -_SIM_TOL) and np.all(values <= 1.0 + _SIM_TOL))
