from __future__ import annotations

import json

import numpy as np
import pytest

from homerun.gridworld import OBS_SHAPE, Pose, generate_world, render_grid, step, view_grid
from homerun.harness.cli import main
from homerun.harness.config import ConfigError, build_config, load_config, parse_pairs
from homerun.harness.dataset import Dataset, collect
from homerun.harness.experiments import read_table, run_table1, select
from homerun.harness.scenarios import (
    LAYOUTS,
    TEST_WORLD_SPECS,
    VALIDATION_WORLD_SPECS,
    make_scenarios,
)
from homerun.worldmodel.checkpoint import save_checkpoint


# ---------------------------------------------------------------- dataset


def test_collect_defaults_signature():
    import inspect

    sig = inspect.signature(collect)
    assert sig.parameters["n_steps"].default == 12_000
    assert sig.parameters["n_worlds"].default == 39


def test_collect_empty_is_valid_file(tmp_path):
    ds = collect(0, 39)
    assert ds.n_steps == 0
    ds.save(tmp_path / "empty.npz")
    assert Dataset.load(tmp_path / "empty.npz").n_steps == 0


def test_collect_split_and_shapes(tmp_path):
    ds = collect(600, 9, seed=3)
    assert ds.n_steps == 600
    assert len(ds.split("train")) == 6 and len(ds.split("val")) == 3
    ep = ds.episodes[0]
    assert render_grid(ep.grids[0]).shape == OBS_SHAPE
    np.testing.assert_array_equal(ep.grids[0], view_grid(ep.world, ep.start))
    # recorded poses agree with replaying the actions
    p = ep.start
    for a, pose in zip(ep.actions[1:], ep.poses[1:]):
        p, _ = step(ep.world, p, int(a))
        assert (p.x, p.y, p.heading) == tuple(int(v) for v in pose)
    ds.save(tmp_path / "d.npz")
    back = Dataset.load(tmp_path / "d.npz")
    assert back.metadata == ds.metadata
    for a, b in zip(ds.episodes, back.episodes):
        assert a.world == b.world and a.split == b.split
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.grids, b.grids)


def test_forage_visits_several_rooms():
    ds = collect(1200, 4, seed=0)
    for ep in ds.episodes:
        rooms = {ep.world.room_at(int(x), int(y)) for x, y, _ in ep.poses}
        rooms = {r for r in rooms if r >= 0}
        assert len(rooms) >= 2


def test_test_worlds_never_in_collection():
    tests = [generate_world(s) for s in TEST_WORLD_SPECS + VALIDATION_WORLD_SPECS]
    ds = collect(390, 39, seed=0, exclude=tuple(tests))
    assert len(ds.episodes) == 39


def test_unknown_policy():
    with pytest.raises(ValueError):
        collect(10, 1, policy="human")


# ---------------------------------------------------------------- config


def test_config_defaults(monkeypatch, tmp_path):
    monkeypatch.setenv("HOMERUN_DATA", str(tmp_path))
    cfg = load_config()
    assert cfg.runs >= 10 and cfg.runs_d9 >= 10
    assert cfg.d_values == (5, 6, 7, 9)
    assert cfg.checkpoint == str(tmp_path / "model.ckpt")
    assert np.isnan(cfg.planner.tau_same) and cfg.planner.threshold is None


def test_config_file_and_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nefe.horizon = 4\nefe.threshold = 12.5\nexperiment.d_values = 5, 6\nexperiment.replan = false\n")
    cfg = load_config(f, {"efe.horizon": "3", "efe.tau_same": "0.002"})
    assert cfg.planner.horizon == 3
    assert cfg.planner.threshold == 12.5 and cfg.planner.tau_same == 0.002
    assert cfg.d_values == (5, 6) and cfg.replan is False


@pytest.mark.parametrize(
    "pairs",
    [
        {"efe.nope": "1"},
        {"efe.samples": "many"},
        {"efe.goal_term": "average"},
        {"experiment.replan": "maybe"},
        {"experiment.d_values": "12"},
        {"experiment.runs": "0"},
    ],
)
def test_config_errors(pairs):
    with pytest.raises(ConfigError):
        build_config(pairs)


def test_config_parse_error():
    with pytest.raises(ConfigError):
        parse_pairs("no equals sign here")


def test_config_digest_stable():
    a = build_config({"efe.horizon": "4"})
    b = build_config({"efe.horizon": "4"})
    assert a.digest() == b.digest()
    assert a.digest() != build_config({"efe.horizon": "3"}).digest()


# ---------------------------------------------------------------- scenarios


@pytest.mark.parametrize("d", sorted(LAYOUTS))
def test_scenarios_valid(d):
    for door_open in (True, False):
        scs = make_scenarios(d, open=door_open)
        assert len(scs) >= 10
        for sc in scs:
            p = sc.end
            for a in sc.shortcut:
                p, _ = step(sc.world, p, a)
            assert (p == sc.home) is door_open
            p = sc.home
            for a in sc.outbound:
                p, _ = step(sc.world, p, a)
            assert p == sc.end
            assert len(sc.shortcut) == d
            assert len(sc.outbound) > d


def test_select_even_spread():
    scs = make_scenarios(5)
    picked = select(scs, 3)
    assert len(picked) == 3 and picked[0] is scs[0] and picked[-1] is scs[-1]
    assert select(scs, 1000) == scs


# ---------------------------------------------------------------- CLI and table


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory, tiny_model):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_checkpoint(tiny_model, path, {"epoch": 0})
    return path


def small_overrides(ckpt):
    return {
        "model.checkpoint": str(ckpt),
        "efe.threshold": "1e6",
        "efe.tau_same": "1e-4",
        "experiment.d_values": "5",
        "experiment.runs": "2",
    }


def test_cli_exit_codes(tmp_path, monkeypatch, tiny_ckpt):
    monkeypatch.setenv("HOMERUN_DATA", str(tmp_path))
    assert main(["table1", "--set", "efe.bogus=1"]) == 2
    assert main(["table1", "--set", "nonsense"]) == 2
    assert main(["table1"]) == 2  # no checkpoint under the data root
    assert main(["train", "--data", str(tmp_path / "missing.npz")]) == 2
    assert main(["homerun", "--d", "8", "--set", f"model.checkpoint={tiny_ckpt}"]) == 2
    args = ["homerun", "--closed", "--set", f"model.checkpoint={tiny_ckpt}", "--set", "efe.threshold=1e6",
            "--set", "efe.tau_same=-1", "--set", "experiment.replan=false", "--set", "experiment.budget=3"]
    assert main(args) == 3


def test_cli_collect_and_explore(tmp_path, tiny_ckpt, capsys):
    assert main(["collect", "--steps", "50", "--worlds", "2", "--out", str(tmp_path / "d.npz")]) == 0
    assert Dataset.load(tmp_path / "d.npz").n_steps == 50
    out = tmp_path / "map.json"
    assert main(["explore", "--set", f"model.checkpoint={tiny_ckpt}", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["format"] == "homerun.map"


def test_table1_deterministic_and_well_formed(tmp_path, tiny_ckpt):
    cfg = build_config(small_overrides(tiny_ckpt))
    a = run_table1(cfg, tmp_path / "a")
    run_table1(cfg, tmp_path / "b")
    for name in ("table1.csv", "episodes.csv", "gamble.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    table = read_table(tmp_path / "a" / "table1.csv")
    assert table == a["table"]
    assert {(r["agent"], r["door"]) for r in table} == {(g, d) for g in ("traceback", "greedy", "ours") for d in ("open", "closed")}
    greedy_open = [r for r in table if r["agent"] == "greedy" and r["door"] == "open"]
    assert greedy_open[0]["mean_steps"] == 5
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config_sha256"] == cfg.digest()
    assert len(list((tmp_path / "a" / "episodes").glob("*.jsonl"))) == 12


def test_read_table_rejects_other_csv(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_table(tmp_path / "x.csv")
