"""Action/observation sequence collection and storage.

Frames are stored as 7x7 palette-index grids (49 bytes each) and rendered
to RGB on access, which keeps a 12k-step dataset well under a megabyte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..gridworld import (
    Action,
    Pose,
    World,
    WorldSpec,
    generate_world,
    render_grid,
    shortest_actions,
    step,
    view_grid,
    world_from_dict,
    world_to_dict,
)

DATASET_VERSION = 1

# world seeds used for data collection live in their own range so that the
# published test / validation scenario worlds can never be drawn
TRAIN_SEED_BASE = 100_000


@dataclass
class Episode:
    world: World
    start: Pose
    actions: np.ndarray  # (T,) int, actions[t] led into frame t; -1 for t == 0
    grids: np.ndarray  # (T, 7, 7) uint8
    poses: np.ndarray  # (T, 3) int16 x, y, heading
    split: str = "train"

    def __len__(self) -> int:
        return len(self.actions)

    def observations(self) -> np.ndarray:
        if len(self.grids) == 0:
            return np.zeros((0, 3, 56, 56), np.float32)
        return np.stack([render_grid(g) for g in self.grids])


@dataclass
class Dataset:
    episodes: list[Episode] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Episode]:
        return [e for e in self.episodes if e.split == name]

    @property
    def n_steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        lens = np.array([len(e) for e in self.episodes], dtype=np.int64)
        cat = lambda xs, shape, dt: np.concatenate(xs) if xs else np.zeros(shape, dt)  # noqa: E731
        meta = dict(self.metadata)
        meta.update(
            format="homerun.dataset",
            version=DATASET_VERSION,
            worlds=[world_to_dict(e.world) for e in self.episodes],
            starts=[[e.start.x, e.start.y, e.start.heading] for e in self.episodes],
            splits=[e.split for e in self.episodes],
        )
        with open(path, "wb") as fh:
            np.savez_compressed(
                fh,
                lengths=lens,
                actions=cat([e.actions for e in self.episodes], (0,), np.int8).astype(np.int8),
                grids=cat([e.grids for e in self.episodes], (0, 7, 7), np.uint8).astype(np.uint8),
                poses=cat([e.poses for e in self.episodes], (0, 3), np.int16).astype(np.int16),
                metadata=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            )

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        with np.load(path) as z:
            meta = json.loads(z["metadata"].tobytes().decode())
            if meta.get("format") != "homerun.dataset" or meta.get("version") != DATASET_VERSION:
                raise ValueError(f"{path}: not a version-{DATASET_VERSION} dataset")
            bounds = np.concatenate([[0], np.cumsum(z["lengths"])])
            actions, grids, poses = z["actions"], z["grids"], z["poses"]
        episodes = []
        for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            episodes.append(
                Episode(
                    world=world_from_dict(meta["worlds"][i]),
                    start=Pose(*meta["starts"][i]),
                    actions=actions[a:b].astype(np.int64),
                    grids=grids[a:b],
                    poses=poses[a:b],
                    split=meta["splits"][i],
                )
            )
        for k in ("worlds", "starts", "splits", "format", "version"):
            meta.pop(k)
        return cls(episodes, meta)


# ------------------------------------------------------------------ policies


def _random_policy(world: World, pose: Pose, rng: np.random.Generator, n: int):
    for _ in range(n):
        yield Action(rng.choice(3, p=[0.5, 0.25, 0.25]))


def _forage_policy(world: World, pose: Pose, rng: np.random.Generator, n: int):
    """Coverage-biased wandering: walk to doors (and through them) or to random
    cells, with random turns, dashes into walls and bumps mixed in."""
    emitted = 0
    cells = world.walkable_cells()
    door_cells = {(d.x, d.y) for d in world.doors}

    def plan():
        r = rng.random()
        if r < 0.25:
            # turn somewhere and run until the wall stops us, then bump once or twice
            turns = [Action(rng.integers(1, 3))] * int(rng.integers(0, 3))
            run, h = [], pose
            for t in turns:
                h = h.turned(t)
            while world.is_walkable(*h.ahead()):
                h = Pose(*h.ahead(), h.heading)
                run.append(Action.FORWARD)
            return turns + run + [Action.FORWARD] * int(rng.integers(1, 3))
        if r < 0.7:
            d = world.doors[rng.integers(len(world.doors))]
            target = (d.x, d.y)
        else:
            target = cells[rng.integers(len(cells))]
        path = shortest_actions(world, pose, target) or []
        if target in door_cells and path:
            # carry on through the door into the next room
            path = path + [Action.FORWARD] * int(rng.integers(1, 4))
        look = [Action(rng.choice(3, p=[0.3, 0.35, 0.35])) for _ in range(int(rng.integers(0, 4)))]
        return path + look

    while emitted < n:
        for a in plan():
            if rng.random() < 0.06:
                # random turn(s) mid-route, then re-plan from there
                for e in [Action(rng.integers(1, 3))] * int(rng.integers(1, 3)):
                    yield e
                    pose, _ = step(world, pose, e)
                    emitted += 1
                    if emitted >= n:
                        return
                break
            yield a
            pose, _ = step(world, pose, a)
            emitted += 1
            if emitted >= n:
                return


POLICIES = {"random": _random_policy, "scripted-forage": _forage_policy}


def random_world_spec(rng: np.random.Generator, seed: int, max_rooms: int = 3) -> WorldSpec:
    return WorldSpec(
        rooms_x=int(rng.integers(2, max_rooms + 1)),
        rooms_y=int(rng.integers(2, max_rooms + 1)),
        room_size=int(rng.integers(4, 8)),
        rng_seed=seed,
    )


def run_episode(world: World, start: Pose, actions) -> Episode:
    grids, poses, acts = [view_grid(world, start)], [(start.x, start.y, start.heading)], [-1]
    pose = start
    for a in actions:
        pose, _ = step(world, pose, a)
        acts.append(int(a))
        grids.append(view_grid(world, pose))
        poses.append((pose.x, pose.y, pose.heading))
    return Episode(
        world,
        start,
        np.array(acts, dtype=np.int64),
        np.array(grids, dtype=np.uint8),
        np.array(poses, dtype=np.int16),
    )


def collect(
    n_steps: int = 12_000,
    n_worlds: int = 39,
    policy: str = "scripted-forage",
    seed: int = 0,
    max_rooms: int = 3,
    exclude: tuple[World, ...] = (),
) -> Dataset:
    """Collect ``n_steps`` frames spread over ``n_worlds`` random worlds, one
    episode per world; the first 2/3 of episodes are training data, the
    rest validation."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {sorted(POLICIES)}")
    rng = np.random.default_rng(seed)
    episodes = []
    if n_steps > 0 and n_worlds > 0:
        n_train = int(round(n_worlds * 2 / 3))
        per_world = np.full(n_worlds, n_steps // n_worlds)
        per_world[: n_steps % n_worlds] += 1
        for i in range(n_worlds):
            if per_world[i] == 0:
                continue
            spec = random_world_spec(rng, TRAIN_SEED_BASE + seed * 1000 + i, max_rooms)
            world = generate_world(spec)
            if any(world == w for w in exclude):
                raise RuntimeError(f"collection world {spec} collides with an excluded world")
            cells = world.walkable_cells()
            x, y = cells[rng.integers(len(cells))]
            start = Pose(x, y, int(rng.choice([0, 90, 180, 270])))
            acts = list(POLICIES[policy](world, start, rng, int(per_world[i]) - 1))
            ep = run_episode(world, start, acts)
            ep.split = "train" if i < n_train else "val"
            episodes.append(ep)
    meta = {"n_steps": n_steps, "n_worlds": n_worlds, "policy": policy, "seed": seed, "max_rooms": max_rooms}
    return Dataset(episodes, meta)
