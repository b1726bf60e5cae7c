import json

import numpy as np
import pytest

from sharpcl import cli
from sharpcl.config import RunConfig, dump_config, load_config, preset
from sharpcl.driver import (
    EPISODE_STEPS,
    MetricsLog,
    SharpLearner,
    build_stream,
    checkpoint_report,
    event_order_ok,
    load_checkpoint,
    make_episodes,
    run_reference,
    run_sharp,
    save_checkpoint,
    stm_entry_megabytes,
)
from sharpcl.engine import ConfigurationError
from sharpcl.experiments import FrozenProbe
from sharpcl.memory import LongTermMemory, LTMRecord

# -- streams ------------------------------------------------------------------------


def test_strict_stream():
    assert build_stream(10) == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    assert build_stream(26, classes_per_episode=2)[-1] == [24, 25]


def test_blurry_eta_one_is_standard_cil():
    assert build_stream(10, "blurry", 2, 1.0, seed=5) == build_stream(10)


def test_blurry_eta_zero_all_classes_single_episode():
    assert build_stream(10, "blurry", 10, 0.0) == [list(range(10))]


@pytest.mark.parametrize("seed", range(5))
def test_blurry_stream_properties(seed):
    s = build_stream(10, "blurry", 2, 0.5, seed=seed)
    assert s == build_stream(10, "blurry", 2, 0.5, seed=seed)
    assert all(len(set(e)) == 2 for e in s)
    assert sorted({c for e in s for c in e}) == list(range(10))
    # every class enters through the novel pool in ascending order
    first_seen = []
    for e in s:
        first_seen += [c for c in e if c not in first_seen]
    assert first_seen == sorted(first_seen)


def test_stream_errors():
    with pytest.raises(ValueError):
        build_stream(4, classes_per_episode=5)
    with pytest.raises(ValueError):
        build_stream(4, "blurry", 2, 1.5)


def test_episodes_accumulate_test_classes(tiny_data):
    train, test = tiny_data
    eps = make_episodes([[0, 1], [2, 3]], train, test, exclude_from_eval=[0])
    assert set(eps[0].train.labels) == {0, 1}
    assert set(eps[1].test.labels) == {1, 2, 3}


# -- SHARP runs ---------------------------------------------------------------------------


@pytest.fixture
def tiny_run(tiny_cfg, tiny_data):
    train, test = tiny_data
    probe = FrozenProbe(test.images[:64])
    snapshots = []

    def hook(learner, ep):
        probe(learner, ep)
        snapshots.append(dict(stm=learner.stm.classes(), ltm={c: learner.ltm.count(c) for c in learner.ltm.classes()}))

    learner, metrics = run_sharp(tiny_cfg, train, test, on_episode=hook)
    return learner, metrics, probe, snapshots


def test_run_order_invariants_and_memory(tiny_cfg, tiny_run):
    learner, metrics, probe, snaps = tiny_run
    assert event_order_ok(learner.events, 3, tiny_cfg.phases, blurry=False)
    assert all(r["path"] and r["density"] and r["edges"] for r in learner.invariants)
    assert len(learner.invariants) == 3 * (tiny_cfg.phases + 1)
    # m = 1: the STM only holds the episode just learned
    assert [s["stm"] for s in snaps] == [[0, 1], [2, 3], [4, 5]]
    assert snaps[-1]["ltm"] == {c: 5 for c in range(6)}
    assert metrics.final("accuracy") > 1 / 6


def test_rank0_fraction_non_increasing(tiny_run):
    learner, metrics, _, _ = tiny_run
    for layer in range(1, len(learner.ranks.ranks)):
        s = metrics.series(f"rank0_fraction_layer{layer}")
        assert all(b <= a for a, b in zip(s, s[1:]))


def test_frozen_units_are_bitwise_stable(tiny_run):
    _, _, probe, _ = tiny_run
    checked, changed = probe.violations()
    assert checked > 0 and changed == 0


def test_determinism(tiny_cfg, tiny_data):
    def rows():
        _, m = run_sharp(tiny_cfg, *tiny_data)
        return [r for r in m.rows if r[1] != "wall_clock_s"]

    assert rows() == rows()


def test_no_replay_when_window_is_zero(tiny_cfg, tiny_data):
    cfg = tiny_cfg.replace(stm_window=0)
    sizes = []

    class Spy(SharpLearner):
        def train_step(self, x, y):
            sizes.append((len(y), len(self.stm)))
            return super().train_step(x, y)

    import sharpcl.driver as drv

    learner = Spy(cfg, 3)
    for ep in drv.make_episodes(cfg.episodes, *tiny_data):
        learner.learn_episode(ep)
        assert learner.stm.is_empty()
    assert all(n_stm == 0 for _, n_stm in sizes)


def test_blurry_mode_skips_reinit(tiny_cfg, tiny_data):
    cfg = tiny_cfg.replace(blurry_mode=True, blurry_classes=2, blurry_eta=0.5, num_classes=6)
    learner, metrics = run_sharp(cfg, *tiny_data)
    steps = [s for _, p, s in learner.events if p is None]
    assert "reinit_rank0" not in steps and steps[: len(EPISODE_STEPS) - 1] == list(EPISODE_STEPS[:-1])
    assert learner.ranks.cap == len(metrics.series("accuracy"))


def test_single_class_ltm_accuracy_is_one(tiny_cfg, tiny_data):
    learner = SharpLearner(tiny_cfg, 3)
    _, test = tiny_data
    learner.ltm.replace_class(2, [LTMRecord(2, 0, np.ones(24), np.ones(24, bool))])
    assert learner.evaluate(test.of_classes([2])) == 1.0


def test_frozen_pretrained_g(tiny_cfg, tmp_path):
    weights = {}
    base = SharpLearner(tiny_cfg, 3)
    for b in range(2):
        weights[f"layer{b}_weight"] = np.full(base.net.layers[b].weight.shape, 0.01, np.float32)
        weights[f"layer{b}_bias"] = np.zeros(base.net.layers[b].bias.shape, np.float32)
    np.savez(tmp_path / "g.npz", **weights)
    cfg = tiny_cfg.replace(frozen_pretrained_g=True, pretrained_g_path=str(tmp_path / "g.npz"))
    learner = SharpLearner(cfg, 3)
    for b in range(2):
        layer = learner.net.layers[b]
        assert layer.conn_mask.all() and layer.freeze_mask.all()
        assert np.all(learner.ranks.ranks[b + 1] == learner.ranks.cap)
        assert np.all(layer.weight.data == np.float32(0.01))


# -- reference modes -------------------------------------------------------------------------


def test_reference_modes(tiny_cfg, tiny_data):
    joint = run_reference(tiny_cfg, "joint", *tiny_data)
    assert len(joint.series("accuracy")) == 1 and joint.final("accuracy") > 0.5
    sgd = run_reference(tiny_cfg, "sgd_sequential", *tiny_data)
    assert len(sgd.series("accuracy")) == 3
    with pytest.raises(ValueError):
        run_reference(tiny_cfg, "ewc", *tiny_data)


# -- persistence --------------------------------------------------------------------------------


def test_checkpoint_roundtrip(tiny_run, tiny_data, tmp_path):
    learner = tiny_run[0]
    path = tmp_path / "ck.npz"
    save_checkpoint(learner, path)
    loaded = load_checkpoint(path)
    _, test = tiny_data
    np.testing.assert_array_equal(loaded.predict(test.images), learner.predict(test.images))
    assert loaded.stm.slot_counts() == learner.stm.slot_counts()
    assert all(np.array_equal(a, b) for a, b in zip(loaded.ranks.ranks, learner.ranks.ranks))
    assert all(checkpoint_report(loaded).values())
    assert cli.main(["check", str(path)]) == 0


def test_check_detects_broken_checkpoint(tiny_run, tmp_path):
    learner = tiny_run[0]
    layer = learner.net.layers[2]
    r = learner.ranks.ranks
    # connect a rank-0 source to a ranked destination
    src = int(np.flatnonzero(r[2] == 0)[0]) if (r[2] == 0).any() else 0
    r[2][src] = 0
    dst = int(np.flatnonzero(r[3] >= 1)[0])
    layer.conn_mask[dst, layer.in_unit_of == src] = True
    path = tmp_path / "bad.npz"
    save_checkpoint(learner, path)
    assert cli.main(["check", str(path)]) == 1


def test_metrics_csv_roundtrip(tmp_path):
    m = MetricsLog()
    m.add(0, "accuracy", 0.5)
    m.add(1, "accuracy", 0.25)
    m.to_csv(tmp_path / "m.csv")
    back = MetricsLog.from_csv(tmp_path / "m.csv")
    assert back.rows == m.rows and back.summary()["accuracy_per_episode"] == [0.5, 0.25]


# -- configuration and CLI ---------------------------------------------------------------------------


def test_presets_and_epochs():
    cfg = preset("fmnist")
    assert (cfg.tau_min, cfg.phases, cfg.knn_neighbors, cfg.temperature) == (0.75, 12, 25, 0.2)
    assert cfg.total_epochs_per_episode == 36
    assert stm_entry_megabytes(preset("mnist")) == 0.000784


def test_config_file_roundtrip(tmp_path):
    cfg = preset("mnist", seed=3, stm_window=2)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "p.yaml").write_text("preset: fmnist\nseed: 4\n")
    assert load_config(tmp_path / "p.yaml").tau_min == 0.75
    (tmp_path / "bad.yaml").write_text("sed: 4\n")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigurationError):
        RunConfig(density=0)


def test_cli_flags_override_preset():
    args = cli.build_parser().parse_args(
        ["run", "--preset", "fmnist", "--stm-window", "0", "--blurry-mode", "--lr", "0.5", "--out", "x"])
    cfg = cli.config_from_args(args)
    assert cfg.stm_window == 0 and cfg.blurry_mode and cfg.optimizer.lr == 0.5 and cfg.tau_min == 0.75


def test_cli_stream(capsys):
    assert cli.main(["stream", "--num-classes", "4"]) == 0
    assert capsys.readouterr().out.splitlines() == ["0\t0 1", "1\t2 3"]


def test_cli_run_writes_outputs(tiny_cfg, tiny_data, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "_load_data", lambda cfg, root: tiny_data)
    cfg_path = tmp_path / "cfg.yaml"
    dump_config(tiny_cfg.replace(phases=1), cfg_path)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["accuracy_per_episode"]) == 3
    rows = MetricsLog.from_csv(out / "metrics.csv").rows
    assert len({(e, m) for e, m, _ in rows}) == len(rows)
    assert cli.main(["check", str(out / "checkpoint.npz")]) == 0
