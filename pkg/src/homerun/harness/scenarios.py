"""Home-run scenarios on fixed 2x2 test worlds.

A scenario places the home pose and the end-of-exploration pose on either
side of one shared wall, lined up with that wall's door, so that the direct
route through the door takes exactly ``d`` actions. The outbound trajectory
is the shortest route from home to the end pose with that door closed, i.e.
the long way round through the other rooms. The open and closed variants of
a scenario differ only in the state of that door.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..gridworld import Action, Pose, World, WorldSpec, generate_world, shortest_actions

# the published test worlds; their seeds lie far below the data-collection range
TEST_WORLD_SPECS = (
    WorldSpec(2, 2, 6, rng_seed=11),
    WorldSpec(2, 2, 7, rng_seed=12),
    WorldSpec(2, 2, 6, rng_seed=13),
    WorldSpec(2, 2, 7, rng_seed=14),
)
# held-out worlds used only to calibrate the decision threshold
VALIDATION_WORLD_SPECS = (
    WorldSpec(2, 2, 6, rng_seed=21),
    WorldSpec(2, 2, 7, rng_seed=22),
)

# (steps from the end pose to the door, steps from the door to home, turns first)
# where the door step counts on the home side
LAYOUTS = {5: (3, 2, False), 6: (3, 2, True), 7: (4, 3, False), 9: (5, 3, True)}


@dataclass(frozen=True)
class Scenario:
    name: str
    world: World  # with the shortcut door in the state given by ``open``
    home: Pose
    end: Pose
    outbound: tuple[Action, ...]
    d: int
    door: tuple[int, int]
    open: bool

    @property
    def shortcut(self) -> tuple[Action, ...]:
        """Direct action sequence from the end pose to home through the door."""
        b, a, turn = LAYOUTS[self.d]
        first = ()
        if turn:
            first = (Action.TURN_LEFT,) if self.end.turned(Action.TURN_LEFT).heading == self.home.heading else (Action.TURN_RIGHT,)
        return first + (Action.FORWARD,) * (a + b)

    def variant(self, open: bool) -> Scenario:
        name = self.name.rsplit("-", 1)[0] + ("-open" if open else "-closed")
        return Scenario(name, self.world.with_door(*self.door, open), self.home, self.end, self.outbound, self.d, self.door, open)


def _placements(world: World, d: int):
    """Every (door, home, end) placement for distance ``d``, in a fixed order."""
    to_door, from_door, turn = LAYOUTS[d]
    for door in world.doors:
        ra, rb = door.rooms
        for near, far, sign in ((ra, rb, 1), (rb, ra, -1)):
            # the end pose lies in room ``far`` (the side the agent finished on)
            vertical_wall = world.room_boxes[ra][1] == world.room_boxes[rb][1]
            if vertical_wall:
                ex, ey = door.x + sign * to_door, door.y
                hx, hy = door.x - sign * from_door, door.y
                home_heading = 180 if sign > 0 else 0
            else:
                ex, ey = door.x, door.y + sign * to_door
                hx, hy = door.x, door.y - sign * from_door
                home_heading = 90 if sign > 0 else 270
            if world.room_at(ex, ey) != far or world.room_at(hx, hy) != near:
                continue
            home = Pose(hx, hy, home_heading)
            if not turn:
                yield door, home, [Pose(ex, ey, home_heading)]
            else:
                yield door, home, [Pose(ex, ey, home_heading - 90), Pose(ex, ey, home_heading + 90)]


def make_scenarios(d: int, specs=TEST_WORLD_SPECS, open: bool = True) -> list[Scenario]:
    """All scenarios of distance ``d`` over the given worlds."""
    if d not in LAYOUTS:
        raise ValueError(f"no scenario layout for d={d}; choose from {sorted(LAYOUTS)}")
    out = []
    for spec in specs:
        world = generate_world(spec)
        for door, home, ends in _placements(world, d):
            closed = world.with_door(door.x, door.y, False)
            for end in ends:
                outbound = shortest_actions(closed, home, end)
                if outbound is None:
                    continue
                name = f"w{spec.rng_seed}-d{d}-door{door.x}_{door.y}-home{home.x}_{home.y}_{home.heading}-end{end.heading}"
                sc = Scenario(name + "-closed", closed, home, end, tuple(outbound), d, (door.x, door.y), False)
                out.append(sc.variant(open))
    return out
