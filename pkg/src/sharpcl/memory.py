"""Short-term memory of quantized activations, long-term memory and k-NN."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import ConfigurationError

BYTES_PER_MB = 1_000_000
LEVELS = 255  # 2**8 - 1


@dataclass
class QuantizedActivation:
    shape: tuple[int, ...]
    data: np.ndarray  # uint8, flat
    min: float
    max: float

    @property
    def nbytes(self) -> int:
        return int(self.data.size)


def quantize(t: np.ndarray) -> QuantizedActivation:
    """Per-tensor min-max scaling to 0..255, rounded half up."""
    t = np.asarray(t)
    flat = t.reshape(-1).astype(np.float64)
    lo, hi = (float(flat.min()), float(flat.max())) if flat.size else (0.0, 0.0)
    if hi == lo:
        q = np.zeros(flat.size, dtype=np.uint8)
    else:
        q = np.clip(np.floor((flat - lo) / (hi - lo) * LEVELS + 0.5), 0, LEVELS).astype(np.uint8)
    return QuantizedActivation(tuple(t.shape), q, lo, hi)


def dequantize(q: QuantizedActivation) -> np.ndarray:
    if q.max == q.min:
        return np.full(q.shape, q.min, dtype=np.float32)
    v = q.min + q.data.astype(np.float64) / LEVELS * (q.max - q.min)
    return v.reshape(q.shape).astype(np.float32)


def activation_megabytes(shape) -> float:
    """Size of one stored activation: one byte per entry."""
    return int(np.prod(shape)) / BYTES_PER_MB


# ---------------------------------------------------------------------------
# short-term memory


@dataclass
class _Bucket:
    episode: int
    order: int  # arrival order, used to hand out remainder slots
    entries: list[QuantizedActivation] = field(default_factory=list)
    seen: int = 0


class ShortTermMemory:
    """Class-bucketed reservoir of quantized activations under a byte budget.

    The slot budget is split evenly over the classes that count toward it
    (slot counts differ by at most one). With ``strict_budget`` every stored
    class counts. Otherwise classes that the next purge will drop are left
    untouched while newer classes are inserted, so the retained window always
    gets the full budget; total usage can then exceed the budget until
    :meth:`purge` runs.
    """

    def __init__(self, budget_mb: float, window: int, rng: np.random.Generator,
                 strict_budget: bool = False):
        self.budget_bytes = int(round(budget_mb * BYTES_PER_MB))
        self.window = window
        self.rng = rng
        self.strict_budget = strict_budget
        self.buckets: dict[int, _Bucket] = {}
        self.entry_bytes: int | None = None
        self._arrivals = 0
        self._cache = None

    # -- budgeting ---------------------------------------------------------
    @property
    def total_slots(self) -> int:
        if not self.entry_bytes:
            return 0
        return self.budget_bytes // self.entry_bytes

    def _counted(self, episode: int) -> list[int]:
        if self.strict_budget:
            labels = list(self.buckets)
        else:
            first = episode - max(self.window, 1) + 1
            labels = [c for c, b in self.buckets.items() if b.episode >= first]
        return sorted(labels, key=lambda c: self.buckets[c].order)

    def quotas(self, episode: int) -> dict[int, int]:
        labels = self._counted(episode)
        if not labels:
            return {}
        base, extra = divmod(self.total_slots, len(labels))
        return {c: base + (i < extra) for i, c in enumerate(labels)}

    def _rebalance(self, episode: int) -> dict[int, int]:
        quotas = self.quotas(episode)
        for c, q in quotas.items():
            if q < 1:
                raise ConfigurationError(
                    f"STM budget of {self.budget_bytes} B cannot hold one {self.entry_bytes} B "
                    f"activation for each of {len(quotas)} classes")
            bucket = self.buckets[c]
            excess = len(bucket.entries) - q
            if excess > 0:
                drop = set(self.rng.choice(len(bucket.entries), size=excess, replace=False).tolist())
                bucket.entries = [e for i, e in enumerate(bucket.entries) if i not in drop]
        return quotas

    # -- operations --------------------------------------------------------
    def insert(self, label: int, episode: int, activation: np.ndarray) -> bool:
        """Offer one activation to ``label``'s reservoir; returns whether it was kept."""
        label = int(label)
        nbytes = int(np.prod(activation.shape))
        if self.entry_bytes is None:
            self.entry_bytes = nbytes
        elif nbytes != self.entry_bytes:
            raise ConfigurationError("all STM activations must share one shape")
        if self.entry_bytes > self.budget_bytes:
            raise ConfigurationError("a single activation exceeds the STM budget")

        bucket = self.buckets.get(label)
        if bucket is None or bucket.episode < episode:
            # new class, or a class seen again in a later episode: start afresh
            self.buckets[label] = bucket = _Bucket(episode, self._arrivals)
            self._arrivals += 1
            quota = self._rebalance(episode)[label]
        else:
            quota = self.quotas(episode)[label]
        self._cache = None

        bucket.seen += 1
        if len(bucket.entries) < quota:
            bucket.entries.append(quantize(activation))
            return True
        j = int(self.rng.integers(bucket.seen))
        if j < quota:
            bucket.entries[j] = quantize(activation)
            return True
        return False

    def purge(self, current_episode: int) -> list[int]:
        """Drop classes older than the temporal window; returns removed labels."""
        first = current_episode - self.window + 1
        gone = [c for c, b in self.buckets.items() if b.episode < first]
        for c in gone:
            del self.buckets[c]
        self._cache = None
        return gone

    def __len__(self) -> int:
        return sum(len(b.entries) for b in self.buckets.values())

    def is_empty(self) -> bool:
        return len(self) == 0

    def classes(self) -> list[int]:
        return sorted(self.buckets)

    def usage_bytes(self) -> int:
        return sum(e.nbytes for b in self.buckets.values() for e in b.entries)

    def usage_mb(self) -> float:
        return self.usage_bytes() / BYTES_PER_MB

    def slot_counts(self) -> dict[int, int]:
        return {c: len(b.entries) for c, b in self.buckets.items()}

    def _flat(self):
        if self._cache is None:
            entries = [(c, e) for c, b in sorted(self.buckets.items()) for e in b.entries]
            if not entries:
                self._cache = (np.zeros((0, 0), np.uint8), np.zeros(0), np.zeros(0), np.zeros(0, np.int64))
            else:
                codes = np.stack([e.data for _, e in entries])
                lo = np.array([e.min for _, e in entries])
                span = np.array([e.max - e.min for _, e in entries])
                labels = np.array([c for c, _ in entries], dtype=np.int64)
                self._cache = (codes, lo, span, labels)
        return self._cache

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` dequantized activations uniformly with replacement.

        Returns empty arrays when ``n == 0`` or the memory is empty.
        """
        codes, lo, span, labels = self._flat()
        if n == 0 or len(labels) == 0:
            shape = (0,) if self.entry_bytes is None else (0,) + self._entry_shape()
            return np.zeros(shape, np.float32), np.zeros(0, np.int64)
        idx = rng.integers(len(labels), size=n)
        x = lo[idx, None] + codes[idx].astype(np.float64) / LEVELS * span[idx, None]
        return x.reshape((n,) + self._entry_shape()).astype(np.float32), labels[idx]

    def _entry_shape(self) -> tuple[int, ...]:
        for b in self.buckets.values():
            if b.entries:
                return b.entries[0].shape
        return (self.entry_bytes or 0,)

    def entries_of(self, label: int) -> list[QuantizedActivation]:
        return list(self.buckets[label].entries)

    def episode_of(self, label: int) -> int:
        return self.buckets[label].episode


# ---------------------------------------------------------------------------
# long-term memory


@dataclass
class LTMRecord:
    label: int
    episode: int
    representation: np.ndarray
    dim_mask: np.ndarray


class LongTermMemory:
    def __init__(self):
        self.records: list[LTMRecord] = []
        self._cache = None

    def __len__(self):
        return len(self.records)

    def replace_class(self, label: int, records: list[LTMRecord]) -> None:
        self.records = [r for r in self.records if r.label != label] + records
        self._cache = None

    def classes(self) -> list[int]:
        return sorted({r.label for r in self.records})

    def count(self, label: int) -> int:
        return sum(r.label == label for r in self.records)

    def arrays(self):
        if self._cache is None:
            reps = np.stack([r.representation for r in self.records]).astype(np.float64)
            masks = np.stack([r.dim_mask for r in self.records])
            labels = np.array([r.label for r in self.records], dtype=np.int64)
            masked = reps * masks
            norms = np.sqrt((masked * masked).sum(axis=1))
            unit = masked / np.where(norms > 0, norms, 1.0)[:, None]
            self._cache = (unit, masks.astype(np.float64), labels, norms > 0)
        return self._cache


def ltm_mask(final_ranks: np.ndarray, age: int) -> np.ndarray:
    """Dimensions kept for a class first stored ``age`` episodes ago.

    ``final_ranks`` are post-promotion ranks: keep units with rank >= age + 2,
    i.e. units that were already training when that class was learned.
    """
    return final_ranks >= age + 2


def ltm_commit(f_forward: Callable[[np.ndarray], np.ndarray], stm: ShortTermMemory,
               ltm: LongTermMemory, final_ranks: np.ndarray, per_class: int, current_episode: int,
               rng: np.random.Generator) -> dict[int, int]:
    """Refresh LTM records for every class in the STM; returns records per class."""
    added = {}
    for label in stm.classes():
        entries = stm.entries_of(label)
        if not entries:
            continue
        k = min(per_class, len(entries))
        pick = rng.choice(len(entries), size=k, replace=False)
        h = np.stack([dequantize(entries[i]) for i in sorted(pick)])
        z = f_forward(h)
        ep = stm.episode_of(label)
        mask = ltm_mask(final_ranks, current_episode - ep)
        ltm.replace_class(label, [LTMRecord(label, ep, z[i].copy(), mask.copy()) for i in range(k)])
        added[label] = k
    return added


def masked_distances(z: np.ndarray, ltm: LongTermMemory) -> np.ndarray:
    """Squared L2 between normalised masked vectors, shape [queries, records].

    Each record's mask is applied to both the record and the query. A zero
    vector after masking gets distance 2.0.
    """
    unit, masks, _, rec_ok = ltm.arrays()
    z = np.asarray(z, dtype=np.float64)
    dots = z @ unit.T
    qnorm2 = (z * z) @ masks.T
    qnorm = np.sqrt(qnorm2)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = dots / qnorm
    d = 2.0 - 2.0 * cos
    d = np.where((qnorm > 0) & rec_ok[None, :], d, 2.0)
    return np.maximum(d, 0.0)


def knn_predict(z: np.ndarray, ltm: LongTermMemory, k: int) -> np.ndarray:
    """Majority vote over the ``k`` nearest LTM records for each query row.

    Ties go to the class with the smallest mean distance among its voters,
    then to the lowest class id.
    """
    if len(ltm) == 0:
        raise ValueError("LTM is empty")
    z = np.atleast_2d(z)
    d = masked_distances(z, ltm)
    labels = ltm.arrays()[2]
    k = min(k, d.shape[1])
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(z), dtype=np.int64)
    for q in range(len(z)):
        lab = labels[nearest[q]]
        dist = d[q, nearest[q]]
        classes, counts = np.unique(lab, return_counts=True)
        means = np.array([dist[lab == c].mean() for c in classes])
        # lexsort: last key is primary
        best = np.lexsort((classes, means, -counts))[0]
        preds[q] = classes[best]
    return preds
