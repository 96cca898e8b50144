from __future__ import annotations

import pytest

from homerun.agents import (
    Episode,
    OursConfig,
    explore,
    merge_turns,
    run_greedy,
    run_ours,
    run_traceback,
    traceback_actions,
)
from homerun.gridworld import Action, Pose, WorldSpec, generate_world, step
from homerun.harness.scenarios import make_scenarios
from homerun.planner import PlannerConfig

F, L, R = Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT


def outbound_poses(sc):
    poses, p = [sc.home], sc.home
    for a in sc.outbound:
        p, _ = step(sc.world, p, a)
        poses.append(p)
    return poses


def test_traceback_empty():
    w = generate_world(WorldSpec(2, 2, 5, rng_seed=0))
    ep = run_traceback(w, Pose(2, 2, 0), [], Pose(2, 2, 0))
    assert ep.step_count == 0 and ep.outcome == "reached"


def test_traceback_reverses_short_path(world):
    home = Pose(2, 2, 0)
    p = home
    for a in (F, L, F):
        p, _ = step(world, p, a)
    ep = run_traceback(world, p, [F, L, F], home)
    assert ep.actions == [L, L, F, R, F, L, L]
    assert ep.final_pose == (2, 2, 0) and ep.outcome == "reached"


@pytest.mark.parametrize("d", [5, 6, 7, 9])
def test_traceback_length_is_outbound_plus_alignment(d):
    for sc in make_scenarios(d)[:4]:
        ep = run_traceback(sc.world, sc.end, sc.outbound, sc.home)
        assert ep.step_count == len(sc.outbound) + 4
        assert ep.outcome == "reached"


def test_greedy_goal_equals_start(world):
    ep = run_greedy(world, Pose(2, 2, 0), Pose(2, 2, 0))
    assert ep.step_count == 0 and ep.outcome == "reached"


@pytest.mark.parametrize("d", [5, 6, 7, 9])
def test_greedy_open_straight_line(d):
    for sc in make_scenarios(d, open=True)[::7]:
        ep = run_greedy(sc.world, sc.end, sc.home, outbound_poses(sc))
        assert ep.step_count == d


def test_greedy_closed_door_detours():
    for sc in make_scenarios(5, open=False)[:6]:
        ep = run_greedy(sc.world, sc.end, sc.home, outbound_poses(sc))
        assert ep.outcome == "reached"
        assert ep.step_count > 5


def test_greedy_budget():
    sc = make_scenarios(5, open=False)[0]
    ep = run_greedy(sc.world, sc.end, sc.home, outbound_poses(sc), budget=6)
    assert ep.outcome == "budget_exceeded" and ep.step_count == 6


def test_merge_turns():
    assert merge_turns([F, L, L], [L, L, F]) == [F, F]
    assert merge_turns([F, L], [L, L, F]) == [F, R, F]
    assert merge_turns([F], [F]) == [F, F]
    assert merge_turns([L, L], [R]) == [L]


def test_traceback_actions_rule():
    assert traceback_actions([]) == []
    assert traceback_actions([F, R]) == [L, L, L, F, L, L]


def test_explore_builds_chain_map(tiny_model):
    sc = make_scenarios(5, open=False)[0]
    nav = explore(sc.world, sc.home, sc.outbound, tiny_model)
    assert nav.pose == sc.end
    assert (nav.belief_pose.x, nav.belief_pose.y, nav.belief_pose.heading) == (sc.end.x, sc.end.y, sc.end.heading)
    path = nav.map.plan_known(nav.map.current_node, 0)
    assert nav.map.path_actions(path) == traceback_actions(sc.outbound)


def test_ours_fallback_equals_traceback(tiny_model):
    sc = make_scenarios(5, open=False)[1]
    nav = explore(sc.world, sc.home, sc.outbound, tiny_model)
    cfg = OursConfig(PlannerConfig(tau_same=1e-4), threshold=-1e12)
    ep = run_ours(nav, 0, sc.d, cfg, sc.home, sc.name, False)
    tb = run_traceback(sc.world, sc.end, sc.outbound, sc.home)
    assert ep.decisions[0]["decision"] == "Fallback"
    assert ep.actions == tb.actions and ep.outcome == "reached"


def test_ours_gamble_costs_twice_its_depth(tiny_model):
    """Forcing a shortcut into a closed door: the agent walks until blocked,
    walks back and falls back; cost = TraceBack + 2 x executed gamble steps
    + the bump."""
    sc = make_scenarios(5, open=False)[2]
    nav = explore(sc.world, sc.home, sc.outbound, tiny_model)
    cfg = OursConfig(PlannerConfig(tau_same=-1.0), threshold=1e12, replan=False)
    ep = run_ours(nav, 0, sc.d, cfg, sc.home, sc.name, False)
    tb = len(sc.outbound) + 4
    gamble = [r for r in ep.records if r.note.get("phase") == "shortcut"]
    executed = sum(r.executed for r in gamble)
    bumps = sum(not r.executed for r in gamble)
    assert ep.step_count == tb + 2 * executed + bumps
    assert ep.outcome == "reached"


def test_ours_open_shortcut_when_forced(tiny_model):
    sc = make_scenarios(5, open=True)[0]
    nav = explore(sc.world, sc.home, sc.outbound, tiny_model)
    # a model-free check of the execution path: with the direct plan forced
    # through a huge threshold, the episode either reaches home directly or
    # falls back; it always ends at home
    cfg = OursConfig(PlannerConfig(tau_same=-1.0), threshold=1e12, replan=False)
    ep = run_ours(nav, 0, sc.d, cfg, sc.home, sc.name, True)
    assert ep.outcome == "reached"


def test_episode_jsonl_roundtrip(tmp_path, world):
    home = Pose(2, 2, 0)
    p = home
    for a in (F, F, L):
        p, _ = step(world, p, a)
    ep = run_traceback(world, p, [F, F, L], home, "demo", True)
    ep.write_jsonl(tmp_path / "ep.jsonl")
    back = Episode.read_jsonl(tmp_path / "ep.jsonl")
    assert back == ep
