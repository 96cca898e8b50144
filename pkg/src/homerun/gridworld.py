"""Multi-room grid world with an egocentric 7x7 pixel view.

Layout follows the MiniGrid multi-room convention: a 1-tile outer wall
border, rooms of ``room_size`` tiles per side (the side length includes one
shared wall, so a 2x2 world of size 4 spans 9x9 tiles), and exactly one
door tile in every wall shared by two adjacent rooms.

Coordinates are ``(x, y)`` with ``y`` growing downwards (row index).
Heading 0 faces +x, 90 faces -y (up on screen), 180 faces -x, 270 faces +y,
so ``TurnLeft`` adds 90 degrees and ``TurnRight`` subtracts 90.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

WORLD_FORMAT_VERSION = 1

VIEW_TILES = 7
TILE_PX = 8
VIEW_PX = VIEW_TILES * TILE_PX  # 56
OBS_SHAPE = (3, VIEW_PX, VIEW_PX)

# tile categories in World.tiles
WALL, FLOOR, DOOR = 0, 1, 2

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.30, 0.85),
    "purple": (0.50, 0.20, 0.70),
    "yellow": (0.90, 0.85, 0.20),
    "grey": (0.55, 0.55, 0.55),
}
COLOR_NAMES = tuple(COLORS)

WALL_RGB = (0.90, 0.90, 0.90)
DOOR_RGB = (0.55, 0.35, 0.10)
MASK_RGB = (0.0, 0.0, 0.0)

# rendering palette index: 0 mask, 1 wall, 2 open door, 3.. floor colors
_PALETTE = np.array([MASK_RGB, WALL_RGB, DOOR_RGB, *COLORS.values()], dtype=np.float32)
_MASK_IDX, _WALL_IDX, _DOOR_IDX, _FLOOR0_IDX = 0, 1, 2, 3

HEADINGS = (0, 90, 180, 270)
_DIRS = {0: (1, 0), 90: (0, -1), 180: (-1, 0), 270: (0, 1)}


class Action(enum.IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


N_ACTIONS = len(Action)


class WorldSpecError(ValueError):
    """Raised for world parameters outside the supported ranges."""


def heading_vector(heading: int) -> tuple[int, int]:
    return _DIRS[heading % 360]


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int = 0

    def __post_init__(self):
        if self.heading % 360 not in _DIRS:
            raise ValueError(f"heading must be a multiple of 90, got {self.heading}")
        object.__setattr__(self, "heading", self.heading % 360)

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)

    def ahead(self, n: int = 1) -> tuple[int, int]:
        dx, dy = heading_vector(self.heading)
        return (self.x + n * dx, self.y + n * dy)

    def turned(self, action: Action) -> Pose:
        if action == Action.TURN_LEFT:
            return replace(self, heading=(self.heading + 90) % 360)
        if action == Action.TURN_RIGHT:
            return replace(self, heading=(self.heading - 90) % 360)
        return self


@dataclass(frozen=True)
class WorldSpec:
    """Generation parameters. ``floor_colors`` / ``door_positions`` are drawn
    from the seed when left as ``None``."""

    rooms_x: int = 2
    rooms_y: int = 2
    room_size: int = 5
    rng_seed: int = 0
    floor_colors: tuple[str, ...] | None = None
    door_positions: tuple[tuple[int, int], ...] | None = None

    def validate(self) -> None:
        if not (2 <= self.rooms_x <= 5 and 2 <= self.rooms_y <= 5):
            raise WorldSpecError(f"room grid must be 2..5 per side, got {self.rooms_x}x{self.rooms_y}")
        if not 4 <= self.room_size <= 7:
            raise WorldSpecError(f"room_size must be in 4..7, got {self.room_size}")
        n_rooms = self.rooms_x * self.rooms_y
        if self.floor_colors is not None:
            if len(self.floor_colors) != n_rooms:
                raise WorldSpecError(f"expected {n_rooms} floor colors, got {len(self.floor_colors)}")
            bad = set(self.floor_colors) - set(COLORS)
            if bad:
                raise WorldSpecError(f"unknown floor colors {sorted(bad)}")


@dataclass(frozen=True)
class Door:
    x: int
    y: int
    rooms: tuple[int, int]
    open: bool = True


@dataclass(frozen=True, eq=False)
class World:
    """Immutable tile grid. ``room_ids`` holds the room index of each floor
    tile (-1 elsewhere); ``room_boxes`` are inclusive ``(x0, y0, x1, y1)``
    bounds of each room including its walls."""

    tiles: np.ndarray
    room_ids: np.ndarray
    room_boxes: tuple[tuple[int, int, int, int], ...]
    room_colors: tuple[str, ...]
    doors: tuple[Door, ...]
    spec: WorldSpec | None = None
    _walkable: np.ndarray = field(init=False, repr=False)
    _door_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        tiles = np.asarray(self.tiles, dtype=np.uint8)
        tiles.setflags(write=False)
        object.__setattr__(self, "tiles", tiles)
        walkable = tiles == FLOOR
        for d in self.doors:
            walkable[d.y, d.x] = d.open
        walkable.setflags(write=False)
        object.__setattr__(self, "_walkable", walkable)
        object.__setattr__(self, "_door_index", {(d.x, d.y): i for i, d in enumerate(self.doors)})

    @property
    def width(self) -> int:
        return self.tiles.shape[1]

    @property
    def height(self) -> int:
        return self.tiles.shape[0]

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_walkable(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and bool(self._walkable[y, x])

    def door_at(self, x: int, y: int) -> Door | None:
        i = self._door_index.get((x, y))
        return None if i is None else self.doors[i]

    def door_between(self, room_a: int, room_b: int) -> Door:
        for d in self.doors:
            if set(d.rooms) == {room_a, room_b}:
                return d
        raise KeyError(f"rooms {room_a} and {room_b} share no door")

    def room_at(self, x: int, y: int) -> int:
        return int(self.room_ids[y, x])

    def with_door(self, x: int, y: int, open: bool) -> World:
        if (x, y) not in self._door_index:
            raise KeyError(f"no door at {(x, y)}")
        doors = tuple(replace(d, open=open) if (d.x, d.y) == (x, y) else d for d in self.doors)
        return World(self.tiles, self.room_ids, self.room_boxes, self.room_colors, doors, self.spec)

    def walkable_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self._walkable)
        return list(zip(xs.tolist(), ys.tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, World):
            return NotImplemented
        return (
            np.array_equal(self.tiles, other.tiles)
            and np.array_equal(self.room_ids, other.room_ids)
            and self.room_boxes == other.room_boxes
            and self.room_colors == other.room_colors
            and self.doors == other.doors
        )

    __hash__ = None


def generate_world(spec: WorldSpec) -> World:
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    s = spec.room_size
    w, h = spec.rooms_x * s + 1, spec.rooms_y * s + 1
    tiles = np.full((h, w), WALL, dtype=np.uint8)
    room_ids = np.full((h, w), -1, dtype=np.int16)
    boxes = []
    for ry in range(spec.rooms_y):
        for rx in range(spec.rooms_x):
            x0, y0 = rx * s, ry * s
            tiles[y0 + 1 : y0 + s, x0 + 1 : x0 + s] = FLOOR
            room_ids[y0 + 1 : y0 + s, x0 + 1 : x0 + s] = ry * spec.rooms_x + rx
            boxes.append((x0, y0, x0 + s, y0 + s))

    if spec.floor_colors is None:
        colors = tuple(COLOR_NAMES[i] for i in rng.integers(0, len(COLOR_NAMES), size=len(boxes)))
    else:
        colors = tuple(spec.floor_colors)

    # walls between horizontally adjacent rooms first, then vertical neighbours
    candidates = []
    for ry in range(spec.rooms_y):
        for rx in range(spec.rooms_x - 1):
            a = ry * spec.rooms_x + rx
            candidates.append(((rx + 1) * s, None, ry * s, (a, a + 1)))
    for ry in range(spec.rooms_y - 1):
        for rx in range(spec.rooms_x):
            a = ry * spec.rooms_x + rx
            candidates.append((None, (ry + 1) * s, rx * s, (a, a + spec.rooms_x)))

    if spec.door_positions is not None and len(spec.door_positions) != len(candidates):
        raise WorldSpecError(f"expected {len(candidates)} door positions, got {len(spec.door_positions)}")

    doors = []
    for i, (wx, wy, start, rooms) in enumerate(candidates):
        if spec.door_positions is not None:
            dx, dy = spec.door_positions[i]
            on_wall = (wx is not None and dx == wx and start < dy < start + s) or (
                wy is not None and dy == wy and start < dx < start + s
            )
            if not on_wall:
                raise WorldSpecError(f"door {(dx, dy)} is not strictly inside the wall between rooms {rooms}")
        else:
            offset = int(rng.integers(1, s))
            dx, dy = (wx, start + offset) if wx is not None else (start + offset, wy)
        tiles[dy, dx] = DOOR
        doors.append(Door(int(dx), int(dy), rooms, True))

    return World(tiles, room_ids, tuple(boxes), colors, tuple(doors), spec)


def step(world: World, pose: Pose, action: Action) -> tuple[Pose, np.ndarray]:
    action = Action(action)
    if action == Action.FORWARD:
        nx, ny = pose.ahead()
        if world.is_walkable(nx, ny):
            pose = Pose(nx, ny, pose.heading)
    else:
        pose = pose.turned(action)
    return pose, render_view(world, pose)


def view_cells(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World ``(x, y)`` of every egocentric view cell. View row 0 is the far
    edge, the agent sits at row 6, column 3, facing up."""
    fx, fy = heading_vector(pose.heading)
    rx, ry = heading_vector(pose.heading - 90)
    rows, cols = np.mgrid[0:VIEW_TILES, 0:VIEW_TILES]
    fwd = VIEW_TILES - 1 - rows
    lat = cols - VIEW_TILES // 2
    return pose.x + fwd * fx + lat * rx, pose.y + fwd * fy + lat * ry


def _visibility(see_through: np.ndarray) -> np.ndarray:
    # MiniGrid-style sweep: light spreads upwards and sideways from the agent
    # through see-through cells.
    n = VIEW_TILES
    vis = np.zeros((n, n), dtype=bool)
    vis[n - 1, n // 2] = True
    for j in range(n - 1, -1, -1):
        for i in range(n - 1):
            if not vis[j, i] or not see_through[j, i]:
                continue
            vis[j, i + 1] = True
            if j > 0:
                vis[j - 1, i + 1] = True
                vis[j - 1, i] = True
        for i in range(n - 1, 0, -1):
            if not vis[j, i] or not see_through[j, i]:
                continue
            vis[j, i - 1] = True
            if j > 0:
                vis[j - 1, i - 1] = True
                vis[j - 1, i] = True
    return vis


def view_grid(world: World, pose: Pose) -> np.ndarray:
    """7x7 palette indices of the egocentric view (0 = masked)."""
    xs, ys = view_cells(pose)
    inside = (xs >= 0) & (xs < world.width) & (ys >= 0) & (ys < world.height)
    cx, cy = np.where(inside, xs, 0), np.where(inside, ys, 0)
    tile = np.where(inside, world.tiles[cy, cx], WALL)
    walkable = inside & world._walkable[cy, cx]
    vis = _visibility(walkable)

    # An open door anywhere in the window reveals both rooms it connects.
    for d in world.doors:
        if not d.open:
            continue
        if not np.any(inside & (xs == d.x) & (ys == d.y)):
            continue
        for r in d.rooms:
            x0, y0, x1, y1 = world.room_boxes[r]
            vis |= inside & (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)

    room = world.room_ids[cy, cx]
    colors = np.array([COLOR_NAMES.index(c) for c in world.room_colors], dtype=np.int64)
    floor_idx = _FLOOR0_IDX + colors[np.maximum(room, 0)]
    grid = np.full((VIEW_TILES, VIEW_TILES), _WALL_IDX, dtype=np.int64)
    grid = np.where((tile == FLOOR), floor_idx, grid)
    grid = np.where(walkable & (tile == DOOR), _DOOR_IDX, grid)
    return np.where(vis, grid, _MASK_IDX)


def render_grid(grid: np.ndarray) -> np.ndarray:
    """Palette-index grid -> float32 RGB array of shape (3, 56, 56)."""
    rgb = _PALETTE[grid]  # (7, 7, 3)
    img = np.repeat(np.repeat(rgb, TILE_PX, axis=0), TILE_PX, axis=1)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def render_view(world: World, pose: Pose) -> np.ndarray:
    return render_grid(view_grid(world, pose))


# ---------------------------------------------------------------- persistence


def world_to_dict(world: World) -> dict:
    return {
        "format": "homerun.world",
        "version": WORLD_FORMAT_VERSION,
        "spec": None
        if world.spec is None
        else {
            "rooms_x": world.spec.rooms_x,
            "rooms_y": world.spec.rooms_y,
            "room_size": world.spec.room_size,
            "rng_seed": world.spec.rng_seed,
        },
        "tiles": ["".join(".#D"[{FLOOR: 0, WALL: 1, DOOR: 2}[int(t)]] for t in row) for row in world.tiles],
        "room_ids": world.room_ids.tolist(),
        "room_boxes": [list(b) for b in world.room_boxes],
        "room_colors": list(world.room_colors),
        "doors": [{"x": d.x, "y": d.y, "rooms": list(d.rooms), "open": d.open} for d in world.doors],
    }


def world_from_dict(doc: dict) -> World:
    if doc.get("format") != "homerun.world":
        raise ValueError("not a world document")
    if doc.get("version") != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world format version {doc.get('version')}")
    lut = {".": FLOOR, "#": WALL, "D": DOOR}
    tiles = np.array([[lut[c] for c in row] for row in doc["tiles"]], dtype=np.uint8)
    spec = None if doc["spec"] is None else WorldSpec(**doc["spec"])
    return World(
        tiles=tiles,
        room_ids=np.array(doc["room_ids"], dtype=np.int16),
        room_boxes=tuple(tuple(b) for b in doc["room_boxes"]),
        room_colors=tuple(doc["room_colors"]),
        doors=tuple(Door(d["x"], d["y"], tuple(d["rooms"]), d["open"]) for d in doc["doors"]),
        spec=spec,
    )


def save_world(world: World, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world_to_dict(world), indent=1))


def load_world(path: str | Path) -> World:
    return world_from_dict(json.loads(Path(path).read_text()))


def observation_bytes(obs: np.ndarray) -> bytes:
    """Row-major (H, W, RGB) uint8 dump."""
    hwc = np.clip(np.rint(np.asarray(obs).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    return hwc.tobytes()


def save_observation_png(obs: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    h, w = obs.shape[1:]
    Image.frombytes("RGB", (w, h), observation_bytes(obs)).save(path, format="PNG")


def shortest_actions(world: World, start: Pose, goal, max_states: int = 100_000) -> list[Action] | None:
    """Fewest-action path from ``start`` to ``goal``.

    ``goal`` is either a ``Pose`` (heading must match) or an ``(x, y)`` cell
    (any heading). Neighbours are expanded in ``Action`` order, so ties are
    broken deterministically. Returns ``None`` when unreachable.
    """
    if isinstance(goal, Pose):
        done = lambda p: p == goal  # noqa: E731
    else:
        gx, gy = goal
        done = lambda p: (p.x, p.y) == (gx, gy)  # noqa: E731
    if done(start):
        return []
    parent = {start: None}
    frontier = [start]
    while frontier and len(parent) < max_states:
        nxt = []
        for p in frontier:
            for a in Action:
                if a == Action.FORWARD:
                    ax, ay = p.ahead()
                    q = Pose(ax, ay, p.heading) if world.is_walkable(ax, ay) else p
                else:
                    q = p.turned(a)
                if q in parent:
                    continue
                parent[q] = (p, a)
                if done(q):
                    path = []
                    while parent[q] is not None:
                        q, a = parent[q]
                        path.append(a)
                    return path[::-1]
                nxt.append(q)
        frontier = nxt
    return None
