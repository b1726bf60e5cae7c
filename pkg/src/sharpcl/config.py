"""Run configuration, architectures and per-dataset presets."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .engine import ConfigurationError

# (kind, out, extra) blocks. Convs use padding 1 so 28x28 inputs reach 16x7x7
# after two 2x2 pools; the last linear width equals the hidden width for SHARP.
ARCHITECTURES: dict[str, list[dict]] = {
    "mnist_cnn": [
        {"kind": "conv", "out": 16, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
        {"kind": "conv", "out": 16, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
        {"kind": "linear", "out": 500},
        {"kind": "linear", "out": 500},
    ],
    "cifar_cnn": [
        {"kind": "conv", "out": 64, "kernel": 3, "stride": 1, "padding": 1},
        {"kind": "conv", "out": 64, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
        {"kind": "conv", "out": 64, "kernel": 3, "stride": 1, "padding": 1},
        {"kind": "conv", "out": 64, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
        {"kind": "conv", "out": 128, "kernel": 3, "stride": 1, "padding": 1},
        {"kind": "conv", "out": 128, "kernel": 3, "stride": 1, "padding": 1},
        {"kind": "conv", "out": 128, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
        {"kind": "linear", "out": 1024},
        {"kind": "linear", "out": 1024},
    ],
}

DEFAULT_SPLIT = {"mnist_cnn": 2, "cifar_cnn": 4}


@dataclass
class OptimizerConfig:
    kind: str = "adadelta"
    lr: float = 1.0
    momentum: float = 0.9
    rho: float = 0.9
    eps: float = 1e-6


@dataclass
class RunConfig:
    dataset: str = "mnist"
    architecture: str = "mnist_cnn"
    input_shape: tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 10
    # strict class-incremental partition; ignored when blurry_mode is set
    episodes: list[list[int]] = field(default_factory=lambda: [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]])
    blurry_mode: bool = False
    blurry_classes: int = 2  # c
    blurry_eta: float = 1.0  # novel-class substitution probability
    blurry_max_episodes: int = 50
    density: float = 0.4
    split: int = 2  # K, number of layers in G
    stm_window: int = 1  # m
    stm_budget_mb: float = 0.0392
    stm_strict_budget: bool = False
    epochs_per_phase: int = 3
    phases: int = 10
    tau_min: float = 0.9
    tau_shape: int = 30
    temperature: float = 0.1
    knn_neighbors: int = 5
    ltm_per_class: int = 25
    probe_size: int = 1024
    batch_size: int = 256
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    rank_cap: int | None = None  # defaults to the episode count
    seed: int = 0
    subset: int | None = None  # total training samples kept (evenly per class)
    frozen_pretrained_g: bool = False
    pretrained_g_path: str | None = None
    pretrain_classes: list[int] = field(default_factory=list)
    check_invariants: bool = True
    reference_epochs: int = 5

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.input_shape = tuple(self.input_shape)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.density <= 1:
            raise ConfigurationError("density must be in (0, 1]")
        if not 0 < self.temperature <= 1:
            raise ConfigurationError("temperature must be in (0, 1]")
        if not 0 < self.tau_min <= 1:
            raise ConfigurationError("tau_min must be in (0, 1]")
        if self.stm_window < 0:
            raise ConfigurationError("stm_window must be >= 0")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if not 0 < self.split < len(ARCHITECTURES[self.architecture]):
            raise ConfigurationError("split must leave at least one layer in G and in F")
        if not 0 <= self.blurry_eta <= 1:
            raise ConfigurationError("blurry_eta must be in [0, 1]")
        if self.blurry_mode and not 1 <= self.blurry_classes <= self.num_classes:
            raise ConfigurationError("blurry_classes must be in [1, num_classes]")

    @property
    def total_epochs_per_episode(self) -> int:
        return self.epochs_per_phase * self.phases

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        if "optimizer" in changes and isinstance(changes["optimizer"], dict):
            changes["optimizer"] = OptimizerConfig(**changes["optimizer"])
        return dataclasses.replace(self, **changes)


def _consecutive(num_classes: int, per_episode: int) -> list[list[int]]:
    return [list(range(i, min(i + per_episode, num_classes))) for i in range(0, num_classes, per_episode)]


# Per-dataset hyperparameters. The STM budget of the MNIST family holds 50
# activations of 16x7x7 bytes; the CIFAR budgets hold 400 and 1000 of 64x8x8.
PRESETS: dict[str, dict] = {
    "mnist": dict(dataset="mnist", epochs_per_phase=3, tau_min=0.90, phases=10, knn_neighbors=5,
                  ltm_per_class=25, temperature=0.1, batch_size=256),
    "fmnist": dict(dataset="fmnist", epochs_per_phase=3, tau_min=0.75, phases=12, knn_neighbors=25,
                   ltm_per_class=25, temperature=0.2, batch_size=1024),
    "emnist": dict(dataset="emnist", num_classes=26, episodes=_consecutive(26, 2), epochs_per_phase=3,
                   tau_min=0.60, phases=15, knn_neighbors=5, ltm_per_class=25, temperature=0.1,
                   batch_size=256),
    "cifar10": dict(dataset="cifar10", architecture="cifar_cnn", input_shape=(3, 32, 32), split=4,
                    stm_budget_mb=1.6384, epochs_per_phase=5, tau_min=0.70, phases=15, knn_neighbors=5,
                    ltm_per_class=50, temperature=0.2, batch_size=256),
    "cifar100": dict(dataset="cifar100", architecture="cifar_cnn", input_shape=(3, 32, 32), split=4,
                     num_classes=100, episodes=_consecutive(100, 10), stm_budget_mb=4.096,
                     epochs_per_phase=5, tau_min=0.70, phases=15, knn_neighbors=5, ltm_per_class=50,
                     temperature=0.05, batch_size=64),
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"no preset for dataset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(**{**PRESETS[name], **overrides})


def load_config(path: str | Path) -> RunConfig:
    """Read a YAML (or JSON) config; a ``preset`` key seeds the defaults."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    base = raw.pop("preset", None)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    if base:
        return preset(base, **raw)
    return RunConfig(**raw)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
