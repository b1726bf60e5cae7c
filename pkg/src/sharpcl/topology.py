"""Unit ranks, rank-1 selection and connection rewiring.

Unit layers are indexed from 0 (the network input) to ``len(layers)``; the
masked layer ``layers[b]`` connects unit layer ``b`` to unit layer ``b + 1``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .engine import (
    ConfigurationError,
    MaskedConv2d,
    MaskedLinear,
    Network,
    Tensor,
)

log = logging.getLogger(__name__)


class UnitState(Enum):
    IDLE = "idle"
    TRAINING = "training"
    FINE_TUNING = "fine_tuning"
    FROZEN = "frozen"


@dataclass
class RankTable:
    ranks: list[np.ndarray]  # one int array per unit layer, [0] is the input
    in_g: list[bool]  # per unit layer; the input counts as part of G
    cap: int  # E
    window: int  # m

    @classmethod
    def fresh(cls, unit_counts: list[int], split: int, cap: int, window: int) -> "RankTable":
        ranks = [np.full(unit_counts[0], cap, dtype=np.int64)]
        ranks += [np.zeros(n, dtype=np.int64) for n in unit_counts[1:]]
        in_g = [True] + [b < split for b in range(len(unit_counts) - 1)]
        return cls(ranks, in_g, cap, window)

    def copy(self) -> "RankTable":
        return RankTable([r.copy() for r in self.ranks], list(self.in_g), self.cap, self.window)

    def states(self, layer: int) -> list[UnitState]:
        return [unit_state(int(r), self.in_g[layer], self.window) for r in self.ranks[layer]]

    def rank0_fraction(self, layer: int | None = None) -> float:
        if layer is not None:
            return float((self.ranks[layer] == 0).mean())
        hidden = np.concatenate(self.ranks[1:])
        return float((hidden == 0).mean())


def unit_state(rank: int, in_g: bool, window: int) -> UnitState:
    if rank == 0:
        return UnitState.IDLE
    if rank == 1:
        return UnitState.TRAINING
    if in_g:
        return UnitState.FROZEN
    return UnitState.FINE_TUNING if rank <= window + 1 else UnitState.FROZEN


# ---------------------------------------------------------------------------
# construction


def build_network(arch: list[dict], input_shape, split: int, rng: np.random.Generator,
                  sharp_head: bool = True, num_classes: int | None = None) -> Network:
    """Instantiate dense layers for ``arch``.

    With ``sharp_head`` the final layer keeps the hidden width and a ReLU;
    otherwise its width is ``num_classes`` with no nonlinearity (logits).
    """
    c, h, w = input_shape
    layers = []
    prev_units, spatial, flat = c, (h, w), None
    for i, spec in enumerate(arch):
        last = i == len(arch) - 1
        if spec["kind"] == "conv":
            pad, k, s = spec.get("padding", 0), spec["kernel"], spec.get("stride", 1)
            layer = MaskedConv2d.create(prev_units, spec["out"], k, rng, stride=s, padding=pad,
                                        pool=spec.get("pool"))
            spatial = tuple((d + 2 * pad - k) // s + 1 for d in spatial)
            if layer.pool:
                if layer.pool > min(spatial):
                    raise ConfigurationError("pool window larger than feature map")
                spatial = tuple(d // layer.pool for d in spatial)
            prev_units = spec["out"]
        else:
            out = spec["out"] if (sharp_head or not last) else num_classes
            if flat is None:
                per_unit = spatial[0] * spatial[1]
                in_unit_of = np.repeat(np.arange(prev_units), per_unit)
            else:
                in_unit_of = np.arange(prev_units)
            layer = MaskedLinear.create(len(in_unit_of), out, rng, in_unit_of=in_unit_of,
                                        relu=sharp_head or not last)
            flat = out
            prev_units = out
        layers.append(layer)
    return Network(layers, split, tuple(input_shape))


def init_topology(arch: list[dict], input_shape, density: float, split: int, cap: int, window: int,
                  seed: int, sharp_head: bool = True, num_classes: int | None = None,
                  prune_g: bool = True) -> tuple[Network, RankTable]:
    """Build a randomly pruned network and an all-zero rank table.

    Every layer except the first convolution keeps exactly
    ``round(density * n_connections)`` connections, chosen uniformly.
    """
    if not 0 < density <= 1:
        raise ConfigurationError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    net = build_network(arch, input_shape, split, rng, sharp_head, num_classes)
    for b, layer in enumerate(net.layers):
        first_conv = b == 0 and isinstance(layer, MaskedConv2d)
        if first_conv or (b < split and not prune_g):
            layer.prunable = False
            continue
        total = layer.conn_mask.size
        keep = int(round(density * total))
        if keep == 0:
            raise ConfigurationError(f"density {density} leaves layer {b} without connections")
        mask = np.zeros(total, dtype=bool)
        mask[rng.choice(total, size=keep, replace=False)] = True
        layer.conn_mask = mask.reshape(layer.conn_mask.shape)
        layer.weight.data[~layer.expand_mask(layer.conn_mask)] = 0.0
    ranks = RankTable.fresh(net.unit_counts, split, cap, window)
    return net, ranks


# ---------------------------------------------------------------------------
# activation statistics and selection


def compute_activation_stats(net: Network, probe: np.ndarray, batch: int = 256) -> list[np.ndarray]:
    """Per-unit sum of post-ReLU activations over ``probe``.

    Returns one float64 array per unit layer (index 0, the input, is empty).
    A conv unit's activation is the sum over its whole feature map.
    """
    if len(probe) == 0:
        raise ValueError("empty probe set")
    stats = [np.zeros(0)] + [np.zeros(n, dtype=np.float64) for n in net.unit_counts[1:]]
    for i in range(0, len(probe), batch):
        acts, _ = net.forward(Tensor(probe[i : i + batch]))
        for b, a in enumerate(acts):
            axes = (0, 2, 3) if a.data.ndim == 4 else (0,)
            stats[b + 1] += a.data.sum(axis=axes, dtype=np.float64)
    return stats


def tau_for_phase(p: int, tau_min: float, shape: int = 30) -> float:
    return max(tau_min, 0.5 * (1.0 + math.cos((p + 1) / shape * math.pi)))


def greedy_select(values: np.ndarray, target: float) -> np.ndarray:
    """Indices of the fewest entries whose sum reaches ``target`` (largest first).

    Ties keep index order. If the target is unreachable every index is returned.
    """
    if target <= 0 or len(values) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-values, kind="stable")
    csum = np.cumsum(values[order])
    hit = np.nonzero(csum >= target)[0]
    k = hit[0] + 1 if len(hit) else len(order)
    return order[:k]


def select_rank1(stats: list[np.ndarray], ranks: RankTable, tau: float) -> list[np.ndarray]:
    """Solve the rank-1 selection per layer and update ``ranks`` in place.

    Candidates are units with rank < 2; selected ones become rank 1 and the
    remaining candidates are demoted to rank 0.
    """
    selected = [np.zeros(0, dtype=np.int64)]
    for layer in range(1, len(ranks.ranks)):
        r, a = ranks.ranks[layer], stats[layer]
        cand = np.nonzero(r < 2)[0]
        target = tau * a.sum() - a[r >= 2].sum()
        chosen = cand[greedy_select(a[cand], target)]
        r[cand] = 0
        r[chosen] = 1
        selected.append(chosen)
    return selected


# ---------------------------------------------------------------------------
# rewiring


def _source_ranks(layer, src_ranks: np.ndarray) -> np.ndarray:
    return src_ranks[layer.in_unit_of]


def drop_connections(net: Network, ranks: RankTable, optimizer=None) -> list[int]:
    """Remove every connection from a rank-0 unit into a rank-1 unit."""
    counts = []
    for b, layer in enumerate(net.layers):
        src = _source_ranks(layer, ranks.ranks[b])
        dst = ranks.ranks[b + 1]
        drop = layer.conn_mask & (dst == 1)[:, None] & (src == 0)[None, :]
        n = int(drop.sum())
        if n:
            layer.conn_mask = layer.conn_mask & ~drop
            full = layer.expand_mask(drop)
            layer.weight.data[full] = 0.0
            if optimizer is not None:
                optimizer.reset_entries(layer.weight, full)
        counts.append(n)
    return counts


def grow_connections(net: Network, ranks: RankTable, quotas: list[int], rng: np.random.Generator,
                     optimizer=None) -> list[int]:
    """Add ``quotas[b]`` zero-weight connections into rank-0 units of layer ``b``.

    Sources are unrestricted. Returns the per-layer shortfall (0 when every
    quota was met).
    """
    shortfalls = []
    for b, (layer, quota) in enumerate(zip(net.layers, quotas)):
        if quota == 0:
            shortfalls.append(0)
            continue
        dst = ranks.ranks[b + 1]
        free = ~layer.conn_mask & (dst == 0)[:, None]
        slots = np.flatnonzero(free)
        take = min(quota, len(slots))
        if take < quota:
            log.warning("layer %d: only %d of %d connections could be regrown", b, take, quota)
        chosen = rng.choice(slots, size=take, replace=False) if take else slots[:0]
        grown = np.zeros(layer.conn_mask.size, dtype=bool)
        grown[chosen] = True
        grown = grown.reshape(layer.conn_mask.shape)
        layer.conn_mask = layer.conn_mask | grown
        full = layer.expand_mask(grown)
        layer.weight.data[full] = 0.0
        if optimizer is not None:
            optimizer.reset_entries(layer.weight, full)
        shortfalls.append(quota - take)
    return shortfalls


def promote_ranks(ranks: RankTable) -> None:
    for layer in range(1, len(ranks.ranks)):
        r = ranks.ranks[layer]
        r[r > 0] = np.minimum(r[r > 0] + 1, ranks.cap)


def apply_freezing(net: Network, ranks: RankTable) -> list[np.ndarray]:
    """Freeze incoming connections (and bias) of units past their window.

    A unit in G freezes at rank > 1; in F at rank > m + 1. Freezing is
    monotone. Returns the per-layer boolean array of frozen units.
    """
    frozen_units = []
    for b, layer in enumerate(net.layers):
        r = ranks.ranks[b + 1]
        limit = 1 if ranks.in_g[b + 1] else ranks.window + 1
        units = (r > limit) | layer.bias_freeze
        layer.freeze_mask = layer.freeze_mask | units[:, None]
        layer.bias_freeze = units.copy()
        frozen_units.append(units)
    return frozen_units


def reinit_rank0(net: Network, ranks: RankTable, rng: np.random.Generator) -> int:
    """Redraw incoming weights and bias of every rank-0 unit; masks untouched."""
    total = 0
    for b, layer in enumerate(net.layers):
        rows = ranks.ranks[b + 1] == 0
        rows &= ~layer.bias_freeze
        layer.reinit_rows(rows, rng)
        total += int(rows.sum())
    return total


# ---------------------------------------------------------------------------
# invariants


@dataclass
class PathCheck:
    ok: bool
    path: list[tuple[int, int, int]] = field(default_factory=list)  # (unit layer, unit, rank)

    def __bool__(self):
        return self.ok


def check_path_property(net: Network, ranks: RankTable) -> PathCheck:
    """True iff no directed path runs from a lower-rank unit to a higher-rank one.

    Propagates, for every unit, the smallest rank among its ancestors. A unit
    whose smallest ancestor rank is below its own rank closes a violating
    path, which is reconstructed via back-pointers.
    """
    inf = np.iinfo(np.int64).max
    min_anc = [np.full(len(ranks.ranks[0]), inf, dtype=np.int64)]
    back: list[np.ndarray] = [np.full(len(ranks.ranks[0]), -1)]
    for b, layer in enumerate(net.layers):
        adj = layer.unit_adjacency()  # [dst, src]
        src_rank = ranks.ranks[b]
        through = np.minimum(src_rank, min_anc[b])  # min rank on any path ending at src
        cand = np.where(adj, through[None, :], inf)
        best = cand.argmin(axis=1) if cand.shape[1] else np.zeros(len(cand), dtype=int)
        val = cand[np.arange(len(cand)), best] if cand.shape[1] else np.full(len(cand), inf)
        min_anc.append(val)
        back.append(np.where(val < inf, best, -1))
        bad = np.nonzero(val < ranks.ranks[b + 1])[0]
        if len(bad):
            return PathCheck(False, _trace(ranks, min_anc, back, b + 1, int(bad[0])))
    return PathCheck(True)


def _trace(ranks, min_anc, back, layer, unit):
    path = [(layer, unit, int(ranks.ranks[layer][unit]))]
    target = min_anc[layer][unit]
    while layer > 0:
        src = int(back[layer][unit])
        layer -= 1
        unit = src
        path.append((layer, unit, int(ranks.ranks[layer][unit])))
        if ranks.ranks[layer][unit] == target:
            break
    return path[::-1]


def densities(net: Network) -> list[float]:
    return [float(layer.conn_mask.mean()) for layer in net.layers]


def connection_counts(net: Network) -> list[int]:
    return [int(layer.conn_mask.sum()) for layer in net.layers]


def edge_direction_ok(net: Network, ranks: RankTable) -> bool:
    """No live connection from a rank-0 source into a unit of rank >= 1."""
    for b, layer in enumerate(net.layers):
        src = _source_ranks(layer, ranks.ranks[b])
        dst = ranks.ranks[b + 1]
        if (layer.conn_mask & (dst >= 1)[:, None] & (src == 0)[None, :]).any():
            return False
    return True
