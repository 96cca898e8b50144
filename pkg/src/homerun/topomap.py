"""Topological experience map: local view cells, location nodes, links,
loop closure and shortest-path planning over links."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gridworld import Action
from .pose import PoseBelief, heading_difference, reset_to

MAP_FORMAT_VERSION = 1


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 1.0
    return 1.0 - float(np.dot(a, b)) / (na * nb)


def invert_actions(actions: Sequence[int]) -> list[Action]:
    """Action sequence retracing ``actions`` backwards, for an agent that
    has already turned around: order reversed, turns mirrored."""
    swap = {Action.FORWARD: Action.FORWARD, Action.TURN_LEFT: Action.TURN_RIGHT, Action.TURN_RIGHT: Action.TURN_LEFT}
    return [swap[Action(a)] for a in reversed(actions)]


TURN_AROUND = (Action.TURN_LEFT, Action.TURN_LEFT)


@dataclass
class ViewCell:
    id: int
    template: np.ndarray
    linked_node: int
    excited_pose: PoseBelief


@dataclass
class LocationNode:
    id: int
    state_mean: np.ndarray
    state_std: np.ndarray
    pose: PoseBelief
    creation_step: int
    view_cell: int


@dataclass
class Link:
    source: int
    target: int
    actions: tuple[int, ...]
    cost: float
    imagined: bool = False
    efe: float | None = None


@dataclass
class MapEvent:
    node: int
    created: bool
    closed_loop: bool
    pose: PoseBelief


@dataclass
class ExperienceMap:
    view_threshold: float = 0.1
    state_ema: float = 0.1
    pose_tolerance: float = 0.5
    heading_tolerance: float = 45.0
    nodes: dict[int, LocationNode] = field(default_factory=dict)
    links: dict[tuple[int, int], Link] = field(default_factory=dict)
    imagined: dict[tuple[int, int], Link] = field(default_factory=dict)
    view_cells: list[ViewCell] = field(default_factory=list)
    current_node: int | None = None
    _pending: list[int] = field(default_factory=list)
    _step: int = 0

    # ------------------------------------------------------------ recognition

    def match_view(self, feature: np.ndarray) -> ViewCell | None:
        """First view cell whose template lies within ``view_threshold``
        cosine distance of ``feature``."""
        feature = np.asarray(feature, dtype=np.float64)
        if not np.all(np.isfinite(feature)):
            raise ValueError("feature must be finite")
        for cell in self.view_cells:
            if cosine_distance(cell.template, feature) < self.view_threshold:
                return cell
        return None

    def _matching_node(self, cell: ViewCell, pose: PoseBelief) -> LocationNode | None:
        best, best_d = None, math.inf
        for node in self.nodes.values():
            if node.view_cell != cell.id:
                continue
            d = math.hypot(node.pose.x - pose.x, node.pose.y - pose.y)
            if d <= self.pose_tolerance and abs(heading_difference(node.pose.heading, pose.heading)) < self.heading_tolerance:
                if d < best_d:
                    best, best_d = node, d
        return best

    # ------------------------------------------------------------ updates

    def update(self, feature, state_mean, state_std, pose: PoseBelief, action: int | None = None) -> MapEvent:
        """Register one executed step. ``action`` is the executed action that
        led here (``None`` for the first frame or a blocked move); it is
        appended to the annotation of the next link created."""
        self._step += 1
        if action is not None:
            self._pending.append(int(action))
        feature = np.asarray(feature, dtype=np.float64)
        mean = np.asarray(state_mean, dtype=np.float64)
        std = np.asarray(state_std, dtype=np.float64)

        cell = self.match_view(feature)
        node = None if cell is None else self._matching_node(cell, pose)
        if node is not None:
            if node.id == self.current_node:
                return MapEvent(node.id, False, False, pose)
            # loop closure onto an existing experience
            w = self.state_ema
            node.state_mean = (1 - w) * node.state_mean + w * mean
            node.state_std = (1 - w) * node.state_std + w * std
            if self.current_node is not None:
                self._add_link(self.current_node, node.id)
            self.current_node = node.id
            return MapEvent(node.id, False, True, reset_to(pose, node.pose))

        nid = len(self.nodes)
        if cell is None:
            cell = ViewCell(len(self.view_cells), feature.copy(), nid, pose)
            self.view_cells.append(cell)
        self.nodes[nid] = LocationNode(nid, mean.copy(), std.copy(), pose, self._step, cell.id)
        if self.current_node is not None:
            self._add_link(self.current_node, nid)
        self._pending.clear()
        self.current_node = nid
        return MapEvent(nid, True, False, pose)

    def _add_link(self, a: int, b: int) -> None:
        acts = tuple(self._pending)
        self._pending.clear()
        if (a, b) in self.links or (b, a) in self.links:
            return
        self.links[(a, b)] = Link(a, b, acts, float(len(acts)))

    def insert_imagined_link(self, source: int, target: int, plan: Sequence[int], efe: float) -> bool:
        """Add a provisional link carrying an imagined plan. Known links are
        never touched; an existing imagined link is only replaced by a lower
        EFE. Returns whether the map changed."""
        if source not in self.nodes or target not in self.nodes:
            raise KeyError(f"unknown node in imagined link {source}->{target}")
        if not math.isfinite(efe):
            raise ValueError("imagined link EFE must be finite")
        old = self.imagined.get((source, target))
        if old is not None and old.efe <= efe:
            return False
        self.imagined[(source, target)] = Link(source, target, tuple(int(a) for a in plan), float(len(plan)), True, float(efe))
        return True

    def remove_imagined_link(self, source: int, target: int) -> None:
        self.imagined.pop((source, target), None)

    # ------------------------------------------------------------ planning

    def neighbours(self, node: int, include_imagined: bool = False):
        """``(other, cost, link, forward)`` for every traversable link; known
        links can be walked both ways, imagined ones only forwards."""
        out = []
        for (a, b), link in self.links.items():
            if a == node:
                out.append((b, link.cost, link, True))
            elif b == node:
                out.append((a, link.cost, link, False))
        if include_imagined:
            for (a, b), link in self.imagined.items():
                if a == node:
                    out.append((b, link.cost, link, True))
        out.sort(key=lambda t: (t[0], not t[3]))
        return out

    def plan_known(self, source: int, target: int, include_imagined: bool = False) -> list[int] | None:
        """Minimum-cost node path; equal-cost alternatives resolve to the
        lexicographically smallest node sequence."""
        for n in (source, target):
            if n not in self.nodes:
                raise KeyError(f"unknown node {n}")
        best: dict[int, tuple[float, tuple[int, ...]]] = {source: (0.0, (source,))}
        heap = [(0.0, (source,))]
        while heap:
            cost, path = heapq.heappop(heap)
            u = path[-1]
            if best.get(u) != (cost, path):
                continue
            if u == target:
                return list(path)
            for v, c, _, _ in self.neighbours(u, include_imagined):
                cand = (cost + c, path + (v,))
                if v in path:
                    continue
                if v not in best or cand < best[v]:
                    best[v] = cand
                    heapq.heappush(heap, cand)
        return None

    def path_cost(self, path: Sequence[int], include_imagined: bool = False) -> float:
        total = 0.0
        for u, v in zip(path, path[1:]):
            costs = [c for w, c, _, _ in self.neighbours(u, include_imagined) if w == v]
            if not costs:
                raise KeyError(f"no link {u}->{v}")
            total += min(costs)
        return total

    def path_actions(self, path: Sequence[int], include_imagined: bool = False) -> list[Action]:
        """Low-level actions walking ``path`` from the pose of its first node
        and arriving with the heading of its last node. Links walked backwards
        are retraced after turning around."""
        actions: list[Action] = []
        reversed_mode = False
        for u, v in zip(path, path[1:]):
            options = [(c, link, fwd) for w, c, link, fwd in self.neighbours(u, include_imagined) if w == v]
            if not options:
                raise KeyError(f"no link {u}->{v}")
            _, link, fwd = min(options, key=lambda t: (t[0], not t[2]))
            if fwd == reversed_mode:
                actions.extend(TURN_AROUND)
                reversed_mode = not fwd
            actions.extend(Action(a) for a in link.actions) if fwd else actions.extend(invert_actions(link.actions))
        if reversed_mode:
            actions.extend(TURN_AROUND)
        return actions

    # ------------------------------------------------------------ integrity

    def check_integrity(self) -> None:
        for (a, b), link in [*self.links.items(), *self.imagined.items()]:
            if a not in self.nodes or b not in self.nodes or (link.source, link.target) != (a, b):
                raise AssertionError(f"dangling link {a}->{b}")
        for node in self.nodes.values():
            if not 0 <= node.view_cell < len(self.view_cells):
                raise AssertionError(f"node {node.id} refers to missing view cell")

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        def link_doc(l: Link) -> dict:
            return {
                "source": l.source,
                "target": l.target,
                "actions": list(l.actions),
                "cost": l.cost,
                "imagined": l.imagined,
                "efe": l.efe,
            }

        return {
            "format": "homerun.map",
            "version": MAP_FORMAT_VERSION,
            "config": {
                "view_threshold": self.view_threshold,
                "state_ema": self.state_ema,
                "pose_tolerance": self.pose_tolerance,
                "heading_tolerance": self.heading_tolerance,
            },
            "current_node": self.current_node,
            "step": self._step,
            "pending": list(self._pending),
            "nodes": [
                {
                    "id": n.id,
                    "state_mean": [float(v) for v in n.state_mean],
                    "state_std": [float(v) for v in n.state_std],
                    "pose": [n.pose.x, n.pose.y, n.pose.heading, n.pose.activity_extent],
                    "creation_step": n.creation_step,
                    "view_cell": n.view_cell,
                }
                for n in self.nodes.values()
            ],
            "view_cells": [
                {
                    "id": c.id,
                    "template": [float(v) for v in c.template],
                    "linked_node": c.linked_node,
                    "excited_pose": [c.excited_pose.x, c.excited_pose.y, c.excited_pose.heading, c.excited_pose.activity_extent],
                }
                for c in self.view_cells
            ],
            "links": [link_doc(l) for l in self.links.values()],
            "imagined_links": [link_doc(l) for l in self.imagined.values()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ExperienceMap:
        if doc.get("format") != "homerun.map" or doc.get("version") != MAP_FORMAT_VERSION:
            raise ValueError("not a supported map document")
        m = cls(**doc["config"])
        m.current_node = doc["current_node"]
        m._step = doc["step"]
        m._pending = list(doc["pending"])
        for n in doc["nodes"]:
            m.nodes[n["id"]] = LocationNode(
                n["id"], np.array(n["state_mean"]), np.array(n["state_std"]), PoseBelief(*n["pose"]), n["creation_step"], n["view_cell"]
            )
        for c in doc["view_cells"]:
            m.view_cells.append(ViewCell(c["id"], np.array(c["template"]), c["linked_node"], PoseBelief(*c["excited_pose"])))
        for key, store in (("links", m.links), ("imagined_links", m.imagined)):
            for l in doc[key]:
                store[(l["source"], l["target"])] = Link(
                    l["source"], l["target"], tuple(l["actions"]), l["cost"], l["imagined"], l["efe"]
                )
        return m

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> ExperienceMap:
        return cls.from_dict(json.loads(Path(path).read_text()))
