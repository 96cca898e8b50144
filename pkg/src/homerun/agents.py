"""Home-run agents: TraceBack, Greedy and the imagination-based shortcut
agent ("ours"), all stepping the same grid world."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gridworld import Action, Pose, World, render_view, step
from .planner import PlannerConfig, decide_shortcut, score_link, threshold_for
from .pose import PoseBelief, integrate
from .topomap import TURN_AROUND, ExperienceMap, cosine_distance, invert_actions

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 200


@dataclass
class StepRecord:
    step: int
    action: int
    executed: bool
    pose: tuple[int, int, int]  # true pose after the action
    belief: tuple[float, float, float] | None = None
    node: int | None = None
    note: dict = field(default_factory=dict)


@dataclass
class Episode:
    agent: str
    scenario: str
    door_open: bool | None
    outbound: list[int]
    home: tuple[int, int, int]
    home_node: int | None = None
    records: list[StepRecord] = field(default_factory=list)
    outcome: str = "reached"
    decisions: list[dict] = field(default_factory=list)

    @property
    def actions(self) -> list[int]:
        return [r.action for r in self.records]

    @property
    def step_count(self) -> int:
        return len(self.records)

    @property
    def final_pose(self) -> tuple[int, int, int] | None:
        return self.records[-1].pose if self.records else None

    @property
    def shortcut_taken(self) -> bool:
        return bool(self.decisions) and self.decisions[0]["decision"] == "Shortcut"

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            head = {k: v for k, v in asdict(self).items() if k != "records"}
            head["step_count"] = self.step_count
            fh.write(json.dumps({"episode": head}) + "\n")
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> Episode:
        with open(path) as fh:
            lines = [json.loads(l) for l in fh if l.strip()]
        head = lines[0]["episode"]
        head.pop("step_count")
        head["home"] = tuple(head["home"])
        ep = cls(**head)
        for r in lines[1:]:
            r["pose"] = tuple(r["pose"])
            if r["belief"] is not None:
                r["belief"] = tuple(r["belief"])
            ep.records.append(StepRecord(**r))
        return ep


def _pose_tuple(p: Pose) -> tuple[int, int, int]:
    return (p.x, p.y, p.heading)


def traceback_actions(outbound: Sequence[int]) -> list[Action]:
    """Turn around, replay the outbound actions backwards with turns
    mirrored, and turn around again to restore the start heading."""
    if not outbound:
        return []
    return [*TURN_AROUND, *invert_actions(outbound), *TURN_AROUND]


def merge_turns(head: Sequence[Action], tail: Sequence[Action]) -> list[Action]:
    """Concatenate two action lists, collapsing the turns where they meet
    into the fewest equivalent turns."""
    head, tail = list(head), list(tail)
    net = 0
    while head and head[-1] != Action.FORWARD:
        net += 1 if head.pop() == Action.TURN_LEFT else -1
    while tail and tail[0] != Action.FORWARD:
        net += 1 if tail.pop(0) == Action.TURN_LEFT else -1
    net %= 4
    turns = {0: [], 1: [Action.TURN_LEFT], 2: [Action.TURN_LEFT] * 2, 3: [Action.TURN_RIGHT]}[net]
    return head + turns + tail


# ---------------------------------------------------------------- TraceBack


def run_traceback(world: World, end: Pose, outbound: Sequence[int], home: Pose, scenario: str = "", door_open=None) -> Episode:
    ep = Episode("traceback", scenario, door_open, [int(a) for a in outbound], _pose_tuple(home))
    pose = end
    for i, a in enumerate(traceback_actions(outbound)):
        new, _ = step(world, pose, a)
        ep.records.append(StepRecord(i, int(a), a != Action.FORWARD or new != pose, _pose_tuple(new)))
        pose = new
    ep.outcome = "reached" if pose == home else "stopped"
    return ep


# ---------------------------------------------------------------- Greedy


def _reducing_headings(pose: Pose, goal: Pose) -> list[int]:
    dx, dy = goal.x - pose.x, goal.y - pose.y
    out = []
    if dx:
        out.append((0 if dx > 0 else 180, abs(dx)))
    if dy:
        out.append((270 if dy > 0 else 90, abs(dy)))
    out.sort(key=lambda t: -t[1])
    return [h for h, _ in out]


def _turn_toward(heading: int, target: int) -> Action:
    diff = (target - heading) % 360
    return Action.TURN_RIGHT if diff == 270 else Action.TURN_LEFT


def _n_turns(heading: int, target: int) -> int:
    diff = (target - heading) % 360
    return {0: 0, 90: 1, 180: 2, 270: 1}[diff]


def run_greedy(
    world: World,
    start: Pose,
    goal: Pose,
    outbound_poses: Sequence[Pose] = (),
    budget: int = DEFAULT_BUDGET,
    scenario: str = "",
    door_open=None,
) -> Episode:
    """Head straight for the (privileged) goal position, reducing Manhattan
    distance; after bumping into a wall, follow it on the side the known
    path went until the distance is below the bump distance and a
    distance-reducing move is free again. Ends by turning to the goal
    heading."""
    ep = Episode("greedy", scenario, door_open, [], _pose_tuple(goal))
    pose = start
    follow: int | None = None  # +1 keeps the wall on the right, -1 on the left
    hit_dist = math.inf

    def dist(p: Pose) -> int:
        return abs(p.x - goal.x) + abs(p.y - goal.y)

    def act(a: Action, note: str) -> None:
        nonlocal pose
        new, _ = step(world, pose, a)
        ep.records.append(StepRecord(len(ep.records), int(a), a != Action.FORWARD or new != pose, _pose_tuple(new), note={"mode": note}))
        pose = new

    def follow_side(p: Pose) -> int:
        # direction of travel back along the known path near ``p``
        if len(outbound_poses) < 2:
            return 1
        i = min(range(len(outbound_poses)), key=lambda k: abs(outbound_poses[k].x - p.x) + abs(outbound_poses[k].y - p.y))
        back = (outbound_poses[max(i - 1, 0)].x - outbound_poses[i].x, outbound_poses[max(i - 1, 0)].y - outbound_poses[i].y)
        if back == (0, 0) and i + 1 < len(outbound_poses):
            nxt = outbound_poses[i + 1]
            back = (outbound_poses[i].x - nxt.x, outbound_poses[i].y - nxt.y)
        lx, ly = Pose(0, 0, p.heading + 90).ahead()
        score = back[0] * lx + back[1] * ly
        # turning left keeps the wall on the right
        return 1 if score >= 0 else -1

    while len(ep.records) < budget:
        if pose.cell == goal.cell:
            if pose.heading == goal.heading:
                break
            act(_turn_toward(pose.heading, goal.heading), "align")
            continue
        reducing = _reducing_headings(pose, goal)
        if follow is not None:
            free = [h for h in reducing if world.is_walkable(*Pose(pose.x, pose.y, h).ahead())]
            if dist(pose) < hit_dist and free:
                follow = None
            else:
                side = Pose(pose.x, pose.y, pose.heading - 90 * follow)
                if world.is_walkable(*side.ahead()):
                    act(Action.TURN_RIGHT if follow > 0 else Action.TURN_LEFT, "follow")
                    act(Action.FORWARD, "follow")
                elif world.is_walkable(*pose.ahead()):
                    act(Action.FORWARD, "follow")
                else:
                    act(Action.TURN_LEFT if follow > 0 else Action.TURN_RIGHT, "follow")
                continue
        if pose.heading in reducing:
            before = pose
            act(Action.FORWARD, "greedy")
            if pose == before:
                hit_dist = dist(pose)
                follow = follow_side(pose)
                act(Action.TURN_LEFT if follow > 0 else Action.TURN_RIGHT, "follow")
            continue
        target = min(reducing, key=lambda h: (_n_turns(pose.heading, h), reducing.index(h)))
        act(_turn_toward(pose.heading, target), "greedy")
    ep.outcome = "reached" if pose == goal else "budget_exceeded"
    return ep


# ---------------------------------------------------------------- Ours


@dataclass
class Navigator:
    """Executes actions in a world while filtering the latent belief,
    integrating the pose belief and growing the experience map."""

    world: World
    pose: Pose
    model: object
    map: ExperienceMap = field(default_factory=ExperienceMap)
    context_window: int | None = 10
    belief_pose: PoseBelief | None = None
    tracker: object = None
    last_obs: np.ndarray | None = None

    def __post_init__(self):
        from .worldmodel.model import BeliefTracker

        self.tracker = BeliefTracker(self.model, self.context_window)
        self.belief_pose = PoseBelief.from_pose(self.pose)
        self._observe(-1, render_view(self.world, self.pose), None)

    def _observe(self, action: int, obs: np.ndarray, map_action):
        self.last_obs = obs
        b = self.tracker.observe(action, obs)
        mean = b.state.mean[0].double().numpy()
        ev = self.map.update(mean, mean, b.state.std[0].double().numpy(), self.belief_pose, map_action)
        self.belief_pose = ev.pose
        return ev

    @property
    def belief(self):
        return self.tracker.belief

    @property
    def feature(self) -> np.ndarray:
        return self.tracker.belief.state.mean[0].double().numpy()

    def act(self, action: Action) -> bool:
        new, obs = step(self.world, self.pose, action)
        executed = action != Action.FORWARD or new != self.pose
        self.pose = new
        self.belief_pose = integrate(self.belief_pose, action, executed)
        self._observe(int(action), obs, int(action) if executed else None)
        return executed

    def at_home(self, home_node: int, max_dist: float = 1.0) -> bool:
        node = self.map.nodes[home_node]
        template = self.map.view_cells[node.view_cell].template
        near = math.hypot(self.belief_pose.x - node.pose.x, self.belief_pose.y - node.pose.y) <= max_dist
        return near and cosine_distance(template, self.feature) < self.map.view_threshold


def explore(world: World, home: Pose, outbound: Sequence[int], model, map_kwargs: dict | None = None, context_window: int | None = 10) -> Navigator:
    """Walk ``outbound`` from ``home`` with a fresh map; node 0 is home."""
    nav = Navigator(world, home, model, ExperienceMap(**(map_kwargs or {})), context_window)
    for a in outbound:
        nav.act(Action(a))
    return nav


def estimate_home_distance(nav: Navigator, home_node: int = 0) -> int:
    p = nav.map.nodes[home_node].pose
    return int(math.ceil(math.hypot(nav.belief_pose.x - p.x, nav.belief_pose.y - p.y) - 1e-9))


@dataclass(frozen=True)
class OursConfig:
    planner: PlannerConfig = PlannerConfig()
    threshold: float = 0.0  # bound on the goal part of G
    replan: bool = True
    budget: int = DEFAULT_BUDGET


def run_ours(
    nav: Navigator,
    home_node: int,
    d: int,
    cfg: OursConfig = OursConfig(),
    home: Pose | None = None,
    scenario: str = "",
    door_open=None,
) -> Episode:
    """Score the shortcut to ``home_node`` over horizon ``d``; take it if the
    minimum EFE is below threshold, re-scoring after every step, and turn
    back along the executed gamble into the known route when a Forward is
    blocked, the re-scored decision flips or the plan ends away from home."""
    start_node = nav.map.current_node
    home_pose = home if home is not None else nav.map.nodes[home_node].pose.to_pose()
    ep = Episode("ours", scenario, door_open, [], _pose_tuple(home_pose), home_node)
    goal = nav.map.nodes[home_node]
    obs_scale = nav.model.cfg.obs_scale

    def record(a: Action, executed: bool, note: dict) -> None:
        b = nav.belief_pose
        ep.records.append(
            StepRecord(len(ep.records), int(a), executed, _pose_tuple(nav.pose), (b.x, b.y, b.heading), nav.map.current_node, note)
        )

    def decide(H: int, seed: int):
        pcfg = PlannerConfig(**{**asdict(cfg.planner), "seed": seed})
        score = score_link(nav.model, nav.belief, nav.belief_pose, goal, H, pcfg, source=nav.map.current_node)
        dec = decide_shortcut(score, threshold_for(cfg.threshold, H, obs_scale))
        ep.decisions.append(
            {"step": len(ep.records), "H": H, "G": dec.G, "threshold": dec.threshold, "decision": dec.kind,
             "plan": [int(a) for a in score.best_plan.actions]}
        )
        return dec

    gamble: list[Action] = []
    aborted = False
    if d > 0:
        dec = decide(d, cfg.planner.seed)
        plan = list(dec.plan.actions) if dec.shortcut else None
    else:
        plan = []
    if plan is not None:
        remaining = d
        while plan and len(ep.records) < cfg.budget:
            a = plan.pop(0)
            executed = nav.act(a)
            record(a, executed, {"phase": "shortcut"})
            remaining -= 1
            if not executed:
                aborted = True
                break
            gamble.append(a)
            if cfg.replan and remaining > 0:
                dec = decide(remaining, cfg.planner.seed + len(ep.records))
                if not dec.shortcut:
                    aborted = True
                    break
                plan = list(dec.plan.actions)
        if not aborted and not nav.at_home(home_node):
            aborted = True
        if not aborted:
            ep.outcome = "reached" if nav.pose == home_pose else "stopped"
            return ep

    # fallback along known links from where the home run started
    path = nav.map.plan_known(start_node, home_node)
    fallback = nav.map.path_actions(path) if path is not None else []
    if gamble:
        back = [*TURN_AROUND, *invert_actions(gamble), *TURN_AROUND]
        actions = merge_turns(back, fallback)
    else:
        actions = fallback
    phase_len = len(actions) - len(fallback)
    for i, a in enumerate(actions):
        if len(ep.records) >= cfg.budget:
            ep.outcome = "budget_exceeded"
            return ep
        executed = nav.act(a)
        record(a, executed, {"phase": "return" if i < phase_len else "fallback"})
    ep.outcome = "reached" if nav.pose == home_pose else "stopped"
    return ep
