"""Named experiment runs with on-disk result caching.

Every result, metrics rows included, is stored as
``<results>/<name>-<config digest>.json`` so the acceptance suite and the
scripts share runs. A changed config gets a new digest and is recomputed.
"""
from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, preset
from .data import load_dataset, subset_per_class
from .driver import (
    SharpLearner,
    event_order_ok,
    prepare_episodes,
    run_reference,
    run_sharp,
)
from .engine import Tensor

log = logging.getLogger(__name__)

RESULTS_ENV = "SHARP_RESULTS"
PROBE_SIZE = 64


def results_dir(path=None) -> Path:
    if path:
        return Path(path)
    env = os.environ.get(RESULTS_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "results"


def load_data(cfg: RunConfig, root=None):
    train = load_dataset(cfg.dataset, "train", root)
    test = load_dataset(cfg.dataset, "test", root)
    if cfg.subset:
        train = subset_per_class(train, cfg.subset, np.random.default_rng(cfg.seed))
    return train, test


class FrozenProbe:
    """Records per-unit activations on a fixed probe after each episode."""

    def __init__(self, probe: np.ndarray):
        self.probe = probe
        self.acts: list[list[np.ndarray]] = []
        self.frozen: list[list[np.ndarray]] = []

    def __call__(self, learner: SharpLearner, ep) -> None:
        acts, _ = learner.net.forward(Tensor(self.probe))
        self.acts.append([a.data.copy() for a in acts])
        self.frozen.append([layer.bias_freeze.copy() for layer in learner.net.layers])

    def violations(self) -> tuple[int, int]:
        """(units checked, units whose activations changed after freezing)."""
        checked = changed = 0
        for e, frozen in enumerate(self.frozen):
            for later in range(e + 1, len(self.acts)):
                for b, units in enumerate(frozen):
                    idx = np.flatnonzero(units)
                    if len(idx) == 0:
                        continue
                    checked += len(idx)
                    before = self.acts[e][b][:, idx]
                    after = self.acts[later][b][:, idx]
                    per_unit = before.reshape(len(before), len(idx), -1) != after.reshape(len(after), len(idx), -1)
                    changed += int(per_unit.any(axis=(0, 2)).sum())
        return checked, changed


def _sharp(cfg: RunConfig, train, test) -> dict:
    probe = FrozenProbe(test.images[:PROBE_SIZE])
    started = time.perf_counter()
    learner, metrics = run_sharp(cfg, train, test, on_episode=probe)
    wall = time.perf_counter() - started
    n_eps = len(prepare_episodes(cfg, train, test))
    checked, changed = probe.violations()
    inv = learner.invariants
    return {
        **metrics.summary(),
        "rank0_per_episode": metrics.series("rank0_fraction"),
        "rank0_per_layer_per_episode": {
            k: metrics.series(f"rank0_fraction_layer{k}") for k in range(1, len(learner.ranks.ranks))},
        "n_episodes": n_eps,
        "invariant_checks": len(inv),
        "invariant_failures": sum(not (r["path"] and r["density"] and r["edges"]) for r in inv),
        "shortfalls": learner.shortfall_log,
        "event_order_ok": event_order_ok(learner.events, n_eps, cfg.phases, cfg.blurry_mode),
        "frozen_units_checked": checked,
        "frozen_units_changed": changed,
        "stm_max_mb": max(metrics.series("stm_mb")),
        "total_wall_clock_s": wall,
        "_metrics": metrics.rows,
    }


def _reference(cfg: RunConfig, mode: str, train, test) -> dict:
    started = time.perf_counter()
    metrics = run_reference(cfg, mode, train, test)
    return {**metrics.summary(), "total_wall_clock_s": time.perf_counter() - started,
            "_metrics": metrics.rows}


def run_experiment(name: str, kind: str, cfg: RunConfig, data_root=None, out=None,
                   force: bool = False) -> dict:
    """Run (or fetch from cache) one experiment; ``kind`` is sharp, joint or sgd_sequential."""
    out = results_dir(out)
    path = out / f"{name}-{cfg.digest()}.json"
    if path.exists() and not force:
        return json.loads(path.read_text())
    train, test = load_data(cfg, data_root)
    log.info("running %s (%s, digest %s)", name, kind, cfg.digest())
    result = _sharp(cfg, train, test) if kind == "sharp" else _reference(cfg, kind, train, test)
    result.update(name=name, kind=kind, config=cfg.to_dict(), digest=cfg.digest())
    out.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=1, default=float))
    return result


def cached(name: str, cfg: RunConfig, out=None) -> dict | None:
    path = results_dir(out) / f"{name}-{cfg.digest()}.json"
    return json.loads(path.read_text()) if path.exists() else None


SEEDS = (0, 1, 2)
BLURRY_ETAS = (0.5, 1.0)


def acceptance_runs() -> dict[str, tuple[str, RunConfig]]:
    """Every run the acceptance suite reads, by name: (kind, config)."""
    runs: dict[str, tuple[str, RunConfig]] = {}
    for s in SEEDS:
        runs[f"mnist_sharp_s{s}"] = ("sharp", preset("mnist", seed=s))
    runs["mnist_joint"] = ("joint", preset("mnist"))
    runs["mnist_sgd"] = ("sgd_sequential", preset("mnist"))
    runs["mnist_smoke_subset10000"] = ("sharp", preset("mnist", subset=10000))
    runs["mnist_m0"] = ("sharp", preset("mnist", stm_window=0))
    for s in SEEDS:
        runs[f"fmnist_sharp_s{s}"] = ("sharp", preset("fmnist", seed=s))
    for eta in BLURRY_ETAS:
        for s in SEEDS:
            runs[f"blurry_eta{eta}_s{s}"] = ("sharp", preset(
                "mnist", blurry_mode=True, blurry_classes=2, blurry_eta=eta, seed=s, subset=10000))
    return runs
