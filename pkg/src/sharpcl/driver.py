"""Episode loop, batch composition, evaluation and reference baselines."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import topology as topo
from .config import ARCHITECTURES, RunConfig
from .data import LabeledDataset
from .engine import (
    GradientTape,
    Network,
    Optimizer,
    Tensor,
    concat,
    predict_batches,
)
from .memory import (
    LongTermMemory,
    LTMRecord,
    QuantizedActivation,
    ShortTermMemory,
    activation_megabytes,
    knn_predict,
    ltm_commit,
)
from .objective import cross_entropy, supcon_loss

log = logging.getLogger(__name__)


class InvariantError(AssertionError):
    pass


# ---------------------------------------------------------------------------
# episode streams


def build_stream(num_classes: int, mode: str = "strict", classes_per_episode: int = 2,
                 eta: float = 1.0, seed: int = 0, max_episodes: int = 50) -> list[list[int]]:
    """Class schedule for a strict or blurry class-incremental stream.

    Strict mode cuts ``range(num_classes)`` into consecutive groups. Blurry
    mode keeps a novel set N and a seen set S: the first episode draws its
    classes from N; afterwards each slot of the previous episode is replaced
    by the lowest-numbered class in N with probability ``eta`` and otherwise
    by a random class from S. The stream stops once N is empty, or after
    ``max_episodes``.
    """
    c = classes_per_episode
    if c < 1 or c > num_classes:
        raise ValueError(f"classes per episode must be in [1, {num_classes}]")
    if not 0 <= eta <= 1:
        raise ValueError("eta must be in [0, 1]")
    if mode == "strict":
        return [list(range(i, min(i + c, num_classes))) for i in range(0, num_classes, c)]
    if mode != "blurry":
        raise ValueError(f"unknown stream mode {mode!r}")

    rng = np.random.default_rng(seed)
    novel = list(range(num_classes))
    seen: list[int] = []
    first = novel[:c]
    del novel[:c]
    seen.extend(first)
    episodes = [first]
    while novel and len(episodes) < max_episodes:
        prev, cur = episodes[-1], []
        for _ in prev:
            if novel and rng.random() < eta:
                cls = novel.pop(0)
                seen.append(cls)
            else:
                pool = [s for s in seen if s not in cur]
                cls = pool[int(rng.integers(len(pool)))] if pool else novel.pop(0)
                if cls not in seen:
                    seen.append(cls)
            cur.append(cls)
        episodes.append(sorted(cur))
    return episodes


@dataclass
class Episode:
    index: int
    classes: list[int]
    train: LabeledDataset
    test: LabeledDataset  # every class seen so far


def make_episodes(schedule: list[list[int]], train: LabeledDataset, test: LabeledDataset,
                  exclude_from_eval: list[int] = ()) -> list[Episode]:
    out, seen = [], set()
    for e, classes in enumerate(schedule):
        seen |= set(classes)
        eval_classes = sorted(seen - set(exclude_from_eval))
        out.append(Episode(e, list(classes), train.of_classes(classes), test.of_classes(eval_classes)))
    return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsLog:
    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, episode: int, metric: str, value: float) -> None:
        self.rows.append((episode, metric, float(value)))

    def series(self, metric: str) -> list[float]:
        return [v for _, m, v in self.rows if m == metric]

    def final(self, metric: str) -> float:
        vals = self.series(metric)
        return vals[-1] if vals else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["episode", "metric", "value"])
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        with open(path) as f:
            r = csv.DictReader(f)
            return cls([(int(row["episode"]), row["metric"], float(row["value"])) for row in r])

    def summary(self) -> dict:
        metrics = sorted({m for _, m, _ in self.rows})
        return {m: self.final(m) for m in metrics} | {
            "accuracy_per_episode": self.series("accuracy")}


# ---------------------------------------------------------------------------
# SHARP learner


class SharpLearner:
    """State machine for one SHARP run: network, ranks, STM, LTM and RNG streams."""

    def __init__(self, cfg: RunConfig, n_episodes: int):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(8)
        self.rng_shuffle, self.rng_probe, self.rng_grow, self.rng_stm, self.rng_replay, \
            self.rng_ltm, self.rng_reinit, self.rng_misc = (np.random.default_rng(s) for s in seeds)
        cap = cfg.rank_cap or max(n_episodes, 2)
        self.net, self.ranks = topo.init_topology(
            ARCHITECTURES[cfg.architecture], cfg.input_shape, cfg.density, cfg.split, cap,
            cfg.stm_window, seed=int(seeds[0].generate_state(1)[0]),
            prune_g=not cfg.frozen_pretrained_g)
        self.net.requires_grad_(True)
        if cfg.frozen_pretrained_g:
            self._load_pretrained_g()
        self.targets = topo.connection_counts(self.net)
        self.stm = ShortTermMemory(cfg.stm_budget_mb, cfg.stm_window, self.rng_stm,
                                   strict_budget=cfg.stm_strict_budget)
        self.ltm = LongTermMemory()
        self.optimizer: Optimizer | None = None
        self.episode = -1
        self.events: list[tuple[int, int | None, str]] = []
        self.invariants: list[dict] = []
        self.shortfall_log: list[tuple[int, int, int]] = []

    # -- setup ---------------------------------------------------------------
    def _load_pretrained_g(self) -> None:
        if self.cfg.pretrained_g_path:
            weights = np.load(self.cfg.pretrained_g_path)
            for b in range(self.cfg.split):
                layer = self.net.layers[b]
                layer.weight.data[...] = weights[f"layer{b}_weight"]
                layer.bias.data[...] = weights[f"layer{b}_bias"]
        for b in range(self.cfg.split):
            self.ranks.ranks[b + 1][:] = self.ranks.cap
        topo.apply_freezing(self.net, self.ranks)

    def _new_optimizer(self) -> Optimizer:
        o = self.cfg.optimizer
        return Optimizer(self.net.parameters(), o.kind, o.lr, o.momentum, o.rho, o.eps)

    def _log(self, phase: int | None, step: str) -> None:
        self.events.append((self.episode, phase, step))

    @property
    def final_rank0(self) -> np.ndarray:
        return self.ranks.ranks[-1] == 0

    # -- representations -----------------------------------------------------
    def embed(self, x: np.ndarray) -> np.ndarray:
        return predict_batches(lambda t: self.net.forward(t)[1], x)

    def g_features(self, x: np.ndarray) -> np.ndarray:
        return predict_batches(self.net.g, x)

    def f_features(self, h: np.ndarray) -> np.ndarray:
        return predict_batches(self.net.f, h)

    def predict(self, x: np.ndarray) -> np.ndarray:
        z = self.embed(x)
        return np.concatenate([knn_predict(z[i : i + 1024], self.ltm, self.cfg.knn_neighbors)
                               for i in range(0, len(z), 1024)])

    def evaluate(self, test: LabeledDataset) -> float:
        if len(test) == 0:
            return float("nan")
        return float((self.predict(test.images) == test.labels).mean())

    # -- algorithm -----------------------------------------------------------
    def check_invariants(self, where: str) -> None:
        path = topo.check_path_property(self.net, self.ranks)
        counts = topo.connection_counts(self.net)
        short = {b for (_, b, _) in self.shortfall_log}
        density_ok = all(c == t or b in short for b, (c, t) in enumerate(zip(counts, self.targets)))
        edge_ok = topo.edge_direction_ok(self.net, self.ranks)
        rec = dict(episode=self.episode, where=where, path=bool(path), density=density_ok, edges=edge_ok)
        self.invariants.append(rec)
        if not (path and density_ok and edge_ok):
            raise InvariantError(f"invariant violated at {where}: {rec}, path={path.path}")

    def run_phase(self, train: LabeledDataset, p: int) -> dict:
        cfg = self.cfg
        tau = topo.tau_for_phase(p, cfg.tau_min, cfg.tau_shape)
        self._log(p, "tau")
        n = len(train)
        replace = n < cfg.probe_size
        probe = self.rng_probe.choice(n, size=cfg.probe_size, replace=replace)
        stats = topo.compute_activation_stats(self.net, train.images[np.sort(probe)])
        selected = topo.select_rank1(stats, self.ranks, tau)
        self._log(p, "select")
        drops = topo.drop_connections(self.net, self.ranks, self.optimizer)
        self._log(p, "drop")
        short = topo.grow_connections(self.net, self.ranks, drops, self.rng_grow, self.optimizer)
        for b, s in enumerate(short):
            if s:
                self.shortfall_log.append((self.episode, b, s))
        self._log(p, "grow")
        if cfg.check_invariants:
            self.check_invariants(f"phase {p}")
        losses = [self.train_epoch(train) for _ in range(cfg.epochs_per_phase)]
        self._log(p, "train")
        return dict(tau=tau, selected=[len(s) for s in selected[1:]], drops=drops, loss=losses[-1])

    def train_epoch(self, train: LabeledDataset) -> float:
        cfg = self.cfg
        order = self.rng_shuffle.permutation(len(train))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            total += self.train_step(train.images[idx], train.labels[idx])
        return total

    def train_step(self, x: np.ndarray, y: np.ndarray) -> float:
        h_rep, y_rep = self.stm.sample(len(y), self.rng_replay)
        labels = np.concatenate([y, y_rep]) if len(y_rep) else y
        if len(labels) < 2:
            return 0.0
        params = self.net.parameters()
        with GradientTape() as tape:
            h = self.net.g(Tensor(x))
            if len(y_rep):
                h = concat([h, Tensor(h_rep)])
            z = self.net.f(h)
            loss = supcon_loss(z, labels, self.final_rank0, self.cfg.temperature)
        grads = tape.gradient(loss, params)
        self.optimizer.step(grads, self.net.freeze_masks())
        return float(loss.data)

    def update_stm(self, train: LabeledDataset) -> None:
        order = self.rng_stm.permutation(len(train))
        for i in range(0, len(order), 1024):
            idx = order[i : i + 1024]
            h = self.g_features(train.images[idx])
            for label, act in zip(train.labels[idx], h):
                self.stm.insert(int(label), self.episode, act)

    def end_episode(self, train: LabeledDataset) -> None:
        topo.promote_ranks(self.ranks)
        self._log(None, "promote")
        topo.apply_freezing(self.net, self.ranks)
        self._log(None, "freeze")
        self.update_stm(train)
        self._log(None, "update_stm")
        ltm_commit(self.f_features, self.stm, self.ltm, self.ranks.ranks[-1], self.cfg.ltm_per_class,
                   self.episode, self.rng_ltm)
        self._log(None, "update_ltm")
        self.stm.purge(self.episode)
        self._log(None, "purge_stm")
        if not self.cfg.blurry_mode:
            topo.reinit_rank0(self.net, self.ranks, self.rng_reinit)
            self._log(None, "reinit_rank0")
        if self.cfg.check_invariants:
            self.check_invariants("end of episode")

    def learn_episode(self, ep: Episode) -> list[dict]:
        self.episode = ep.index
        self.optimizer = self._new_optimizer()
        phases = [self.run_phase(ep.train, p) for p in range(self.cfg.phases)]
        self.end_episode(ep.train)
        return phases


PHASE_STEPS = ("tau", "select", "drop", "grow", "train")
EPISODE_STEPS = ("promote", "freeze", "update_stm", "update_ltm", "purge_stm", "reinit_rank0")


def expected_events(episode: int, phases: int, blurry: bool) -> list[tuple[int, int | None, str]]:
    out = [(episode, p, s) for p in range(phases) for s in PHASE_STEPS]
    steps = EPISODE_STEPS[:-1] if blurry else EPISODE_STEPS
    return out + [(episode, None, s) for s in steps]


def event_order_ok(events, n_episodes: int, phases: int, blurry: bool) -> bool:
    want = [e for k in range(n_episodes) for e in expected_events(k, phases, blurry)]
    return list(events) == want


def record_episode(metrics: MetricsLog, learner: SharpLearner, ep: Episode, acc: float,
                   started: float, phases: list[dict]) -> None:
    e = ep.index
    metrics.add(e, "accuracy", acc)
    metrics.add(e, "rank0_fraction", learner.ranks.rank0_fraction())
    for layer in range(1, len(learner.ranks.ranks)):
        metrics.add(e, f"rank0_fraction_layer{layer}", learner.ranks.rank0_fraction(layer))
    metrics.add(e, "stm_mb", learner.stm.usage_mb())
    metrics.add(e, "ltm_records", len(learner.ltm))
    metrics.add(e, "n_classes_seen", len(np.unique(ep.test.labels)))
    metrics.add(e, "final_loss", phases[-1]["loss"] if phases else float("nan"))
    metrics.add(e, "wall_clock_s", time.perf_counter() - started)


def prepare_episodes(cfg: RunConfig, train: LabeledDataset, test: LabeledDataset) -> list[Episode]:
    if cfg.blurry_mode:
        schedule = build_stream(cfg.num_classes, "blurry", cfg.blurry_classes, cfg.blurry_eta,
                                cfg.seed, cfg.blurry_max_episodes)
    else:
        schedule = cfg.episodes
    return make_episodes(schedule, train, test, cfg.pretrain_classes)


def run_sharp(cfg: RunConfig, train: LabeledDataset, test: LabeledDataset,
              on_episode=None) -> tuple[SharpLearner, MetricsLog]:
    episodes = prepare_episodes(cfg, train, test)
    learner = SharpLearner(cfg, len(episodes))
    metrics = MetricsLog()
    started = time.perf_counter()
    for ep in episodes:
        phases = learner.learn_episode(ep)
        acc = learner.evaluate(ep.test)
        record_episode(metrics, learner, ep, acc, started, phases)
        log.info("episode %d classes %s acc %.4f rank0 %.3f", ep.index, ep.classes, acc,
                 learner.ranks.rank0_fraction())
        if on_episode:
            on_episode(learner, ep)
    return learner, metrics


# ---------------------------------------------------------------------------
# reference modes


def run_reference(cfg: RunConfig, mode: str, train: LabeledDataset, test: LabeledDataset) -> MetricsLog:
    """Dense network with a cross-entropy head: ``joint`` or ``sgd_sequential``."""
    if mode not in ("joint", "sgd_sequential"):
        raise ValueError(f"unknown reference mode {mode!r}")
    episodes = prepare_episodes(cfg, train, test)
    rng = np.random.default_rng(cfg.seed)
    net, _ = topo.init_topology(ARCHITECTURES[cfg.architecture], cfg.input_shape, 1.0, cfg.split,
                                cap=1, window=0, seed=cfg.seed, sharp_head=False,
                                num_classes=cfg.num_classes)
    net.requires_grad_(True)
    o = cfg.optimizer
    metrics = MetricsLog()
    started = time.perf_counter()

    def fit(ds: LabeledDataset):
        opt = Optimizer(net.parameters(), o.kind, o.lr, o.momentum, o.rho, o.eps)
        for _ in range(cfg.reference_epochs):
            order = rng.permutation(len(ds))
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                with GradientTape() as tape:
                    loss = cross_entropy(net.forward(Tensor(ds.images[idx]))[1], ds.labels[idx])
                opt.step(tape.gradient(loss, net.parameters()))

    def accuracy(ds: LabeledDataset) -> float:
        logits = predict_batches(lambda t: net.forward(t)[1], ds.images)
        return float((logits.argmax(axis=1) == ds.labels).mean())

    if mode == "joint":
        union = np.concatenate([np.flatnonzero(np.isin(train.labels, ep.classes)) for ep in episodes])
        fit(train.select(np.unique(union)))
        last = episodes[-1]
        metrics.add(last.index, "accuracy", accuracy(last.test))
        metrics.add(last.index, "wall_clock_s", time.perf_counter() - started)
        return metrics
    for ep in episodes:
        fit(ep.train)
        metrics.add(ep.index, "accuracy", accuracy(ep.test))
        preds = predict_batches(lambda t: net.forward(t)[1], ep.test.images).argmax(axis=1)
        metrics.add(ep.index, "share_predicted_current", float(np.isin(preds, ep.classes).mean()))
        metrics.add(ep.index, "wall_clock_s", time.perf_counter() - started)
    return metrics


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(learner: SharpLearner, path) -> None:
    """Write network, ranks, STM and LTM to one ``.npz`` (format in README)."""
    arrays: dict[str, np.ndarray] = {}
    for b, layer in enumerate(learner.net.layers):
        arrays[f"layer{b}_weight"] = layer.weight.data
        arrays[f"layer{b}_bias"] = layer.bias.data
        arrays[f"layer{b}_conn_mask"] = layer.conn_mask
        arrays[f"layer{b}_freeze_mask"] = layer.freeze_mask
        arrays[f"layer{b}_bias_freeze"] = layer.bias_freeze
    for l, r in enumerate(learner.ranks.ranks):
        arrays[f"ranks{l}"] = r
    entries = [(c, b.episode, e) for c, b in sorted(learner.stm.buckets.items()) for e in b.entries]
    arrays["stm_labels"] = np.array([c for c, _, _ in entries], dtype=np.int64)
    arrays["stm_episodes"] = np.array([ep for _, ep, _ in entries], dtype=np.int64)
    arrays["stm_codes"] = (np.stack([e.data for _, _, e in entries]) if entries
                           else np.zeros((0, 0), np.uint8))
    arrays["stm_min"] = np.array([e.min for _, _, e in entries])
    arrays["stm_max"] = np.array([e.max for _, _, e in entries])
    recs = learner.ltm.records
    arrays["ltm_labels"] = np.array([r.label for r in recs], dtype=np.int64)
    arrays["ltm_episodes"] = np.array([r.episode for r in recs], dtype=np.int64)
    arrays["ltm_reps"] = np.stack([r.representation for r in recs]) if recs else np.zeros((0, 0))
    arrays["ltm_masks"] = np.stack([r.dim_mask for r in recs]) if recs else np.zeros((0, 0), bool)
    meta = dict(config=learner.cfg.to_dict(), episode=learner.episode, cap=learner.ranks.cap,
                window=learner.ranks.window, in_g=learner.ranks.in_g, targets=learner.targets,
                prunable=[layer.prunable for layer in learner.net.layers],
                stm_entry_shape=list(learner.stm._entry_shape()) if entries else [],
                shortfalls=learner.shortfall_log)
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path) -> SharpLearner:
    z = np.load(path)
    meta = json.loads(bytes(z["meta"]).decode())
    cfg = RunConfig(**meta["config"])
    learner = SharpLearner(cfg, meta["cap"])
    learner.episode = meta["episode"]
    for b, layer in enumerate(learner.net.layers):
        layer.weight.data[...] = z[f"layer{b}_weight"]
        layer.bias.data[...] = z[f"layer{b}_bias"]
        layer.conn_mask = z[f"layer{b}_conn_mask"].astype(bool)
        layer.freeze_mask = z[f"layer{b}_freeze_mask"].astype(bool)
        layer.bias_freeze = z[f"layer{b}_bias_freeze"].astype(bool)
        layer.prunable = meta["prunable"][b]
    learner.ranks = topo.RankTable([z[f"ranks{l}"].copy() for l in range(len(learner.ranks.ranks))],
                                   meta["in_g"], meta["cap"], meta["window"])
    learner.targets = meta["targets"]
    learner.shortfall_log = [tuple(s) for s in meta["shortfalls"]]
    shape = tuple(meta["stm_entry_shape"])
    for c, ep, codes, lo, hi in zip(z["stm_labels"], z["stm_episodes"], z["stm_codes"], z["stm_min"],
                                    z["stm_max"]):
        bucket = learner.stm.buckets.get(int(c))
        if bucket is None:
            learner.stm.entry_bytes = codes.size
            from .memory import _Bucket
            bucket = learner.stm.buckets[int(c)] = _Bucket(int(ep), learner.stm._arrivals)
            learner.stm._arrivals += 1
        bucket.entries.append(QuantizedActivation(shape, codes.copy(), float(lo), float(hi)))
        bucket.seen += 1
    for c, ep, rep, mask in zip(z["ltm_labels"], z["ltm_episodes"], z["ltm_reps"], z["ltm_masks"]):
        learner.ltm.records.append(LTMRecord(int(c), int(ep), rep.copy(), mask.astype(bool)))
    return learner


def checkpoint_report(learner: SharpLearner) -> dict[str, bool]:
    """Structural invariants that can be verified on a saved state."""
    net, ranks, cfg = learner.net, learner.ranks, learner.cfg
    short = {b for (_, b, _) in learner.shortfall_log}
    counts = topo.connection_counts(net)
    frozen_ok = True
    for b, layer in enumerate(net.layers):
        limit = 1 if ranks.in_g[b + 1] else ranks.window + 1
        frozen_units = layer.bias_freeze
        over = ranks.ranks[b + 1] > limit
        frozen_ok &= bool(np.all(frozen_units[over]) and np.all(layer.freeze_mask[frozen_units]))
    first = learner.episode - cfg.stm_window + 1
    ltm_ok = all(r.dim_mask.shape == r.representation.shape for r in learner.ltm.records)
    return {
        "path_property": bool(topo.check_path_property(net, ranks)),
        "edge_direction": topo.edge_direction_ok(net, ranks),
        "density": all(c == t or b in short for b, (c, t) in enumerate(zip(counts, learner.targets))),
        "freeze_consistent": frozen_ok,
        "stm_within_budget": learner.stm.usage_bytes() <= learner.stm.budget_bytes,
        "stm_window": all(b.episode >= first for b in learner.stm.buckets.values()),
        "ltm_masks": ltm_ok,
        "input_rank_is_cap": bool(np.all(ranks.ranks[0] == ranks.cap)),
    }


def stm_entry_megabytes(cfg: RunConfig) -> float:
    """Bytes of one replayed activation for ``cfg``'s architecture and split, in MB."""
    rng = np.random.default_rng(0)
    net = topo.build_network(ARCHITECTURES[cfg.architecture], cfg.input_shape, cfg.split, rng)
    h = net.g(Tensor(np.zeros((1,) + tuple(cfg.input_shape), np.float32)))
    return activation_megabytes(h.shape[1:])


def write_outputs(out_dir, cfg: RunConfig, metrics: MetricsLog, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(out / "metrics.csv")
    summary = {"config_digest": cfg.digest(), **metrics.summary(), **(extra or {})}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
