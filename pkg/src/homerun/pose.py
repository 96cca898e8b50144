"""Path integration of the pose belief.

Stands in for a pose-cell attractor network: the belief is advanced by the
executed actions, exactly by default, or with per-step Gaussian drift when
``drift_std > 0`` so loop-closure corrections can be studied.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .gridworld import Action, Pose

# exact unit steps for the four cardinal headings; heading 0 = +x, 90 = -y
_UNIT = {0: (1, 0), 90: (0, -1), 180: (-1, 0), 270: (0, 1)}


@dataclass(frozen=True)
class PoseBelief:
    x: float
    y: float
    heading: float = 0.0
    activity_extent: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", float(self.heading) % 360.0)

    @classmethod
    def from_pose(cls, pose: Pose) -> PoseBelief:
        return cls(float(pose.x), float(pose.y), float(pose.heading))

    def to_pose(self) -> Pose:
        """Nearest grid pose."""
        return Pose(int(round(self.x)), int(round(self.y)), int(round(self.heading / 90.0)) * 90 % 360)


def _unit(heading: float) -> tuple[float, float]:
    if heading in _UNIT:
        return _UNIT[heading]
    rad = math.radians(heading)
    return math.cos(rad), -math.sin(rad)


def integrate(
    belief: PoseBelief,
    action: Action | int,
    executed: bool = True,
    spread_growth: float = 0.0,
    drift_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PoseBelief:
    """Advance the belief by one action. A Forward that the environment
    blocked (``executed=False``) leaves the position unchanged."""
    action = Action(action)
    x, y, h = belief.x, belief.y, belief.heading
    if action == Action.FORWARD:
        if executed:
            ux, uy = _unit(h)
            x, y = x + ux, y + uy
            if drift_std > 0:
                rng = rng if rng is not None else np.random.default_rng()
                x += float(rng.normal(0.0, drift_std))
                y += float(rng.normal(0.0, drift_std))
    elif action == Action.TURN_LEFT:
        h = h + 90.0
    else:
        h = h - 90.0
    return PoseBelief(x, y, h, belief.activity_extent + spread_growth)


def integrate_many(belief: PoseBelief, actions: Iterable, executed: Iterable[bool] | None = None) -> PoseBelief:
    actions = list(actions)
    flags = [True] * len(actions) if executed is None else list(executed)
    for a, ok in zip(actions, flags):
        belief = integrate(belief, a, ok)
    return belief


def reset_to(belief: PoseBelief, anchor: Pose | PoseBelief) -> PoseBelief:
    return PoseBelief(float(anchor.x), float(anchor.y), float(anchor.heading), 0.0)


def heading_difference(a: float, b: float) -> float:
    """Signed smallest difference ``a - b`` in degrees, in [-180, 180)."""
    return (a - b + 180.0) % 360.0 - 180.0


def gaussian_kl_1d(mu_q: float, sd_q: float, mu_p: float, sd_p: float) -> float:
    return math.log(sd_p / sd_q) + (sd_q**2 + (mu_q - mu_p) ** 2) / (2 * sd_p**2) - 0.5


def pose_kl(
    q: PoseBelief,
    p: PoseBelief,
    pos_std: float = 0.25,
    heading_std: float = 5.0,
    q_pos_std: float | None = None,
    q_heading_std: float | None = None,
) -> float:
    """KL between two axis-aligned Gaussian pose beliefs; heading offsets are
    wrapped to the shortest angle."""
    qs = pos_std if q_pos_std is None else q_pos_std
    qh = heading_std if q_heading_std is None else q_heading_std
    dh = heading_difference(q.heading, p.heading)
    return (
        gaussian_kl_1d(q.x, qs, p.x, pos_std)
        + gaussian_kl_1d(q.y, qs, p.y, pos_std)
        + gaussian_kl_1d(dh, qh, 0.0, heading_std)
    )


def write_trace(path: str | Path, beliefs: Iterable[PoseBelief]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x", "y", "heading"])
        for i, b in enumerate(beliefs):
            w.writerow([i, repr(b.x), repr(b.y), repr(b.heading)])


def read_trace(path: str | Path) -> list[PoseBelief]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [PoseBelief(float(r["x"]), float(r["y"]), float(r["heading"])) for r in rows]

