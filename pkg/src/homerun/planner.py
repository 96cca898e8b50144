"""Expected-free-energy scoring of imagined plans between map nodes.

All ``3**H`` plans of a horizon are imagined at once as a tree: plans that
share a prefix share its rollout, and every sample ``n`` uses the same noise
draw ``noise[n, k]`` at depth ``k`` whatever the plan (common random
numbers). A plan's score is therefore identical to rolling it out on its
own with the same noise table, which is what the reference tests do.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .gridworld import Action
from .pose import PoseBelief, integrate
from .worldmodel.model import Belief, ContractError, LatentState, RolloutSample, WorldModel, gaussian_entropy, kl_diag_gaussian

GOAL_TERMS = ("terminal", "summed")


class PlanBudgetError(ValueError):
    """Requested horizon exceeds the enumeration budget."""


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 5
    samples: int = 3
    threshold: float | None = None  # goal-part threshold; ambiguity floor is added per step
    goal_term: str = "terminal"
    prune_revisits: bool = False
    tau_same: float = 1e-3  # per-pixel MSE below which a Forward is imagined as blocked
    pos_std: float = 0.25
    heading_std: float = 5.0
    max_horizon: int = 9
    seed: int = 0
    chunk: int = 1024

    def __post_init__(self):
        if self.goal_term not in GOAL_TERMS:
            raise ValueError(f"goal_term must be one of {GOAL_TERMS}, got {self.goal_term!r}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


def enumerate_plans(H: int, max_horizon: int = 9) -> list[tuple[Action, ...]]:
    """All ``3**H`` action sequences in lexicographic order (Forward first)."""
    if H < 0:
        raise ValueError("horizon must be non-negative")
    if H > max_horizon:
        raise PlanBudgetError(f"horizon {H} exceeds the budget of {max_horizon} ({3**H} plans)")
    return list(itertools.product(tuple(Action), repeat=H))


def nominal_cells(start: PoseBelief, plan: Sequence[int]) -> list[tuple[int, int]]:
    """Cells visited by ``plan`` if no Forward is blocked."""
    b, cells = start, [start.to_pose().cell]
    for a in plan:
        b = integrate(b, a)
        cells.append(b.to_pose().cell)
    return cells


def revisits(cells: Sequence[tuple[int, int]]) -> bool:
    path = [c for i, c in enumerate(cells) if i == 0 or c != cells[i - 1]]
    return len(set(path)) < len(path)


def make_noise(n_samples: int, horizon: int, dim: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    """Standard normal table of shape ``(N, H + 1, D)``; slice 0 samples the start state."""
    g = torch.Generator().manual_seed(seed)
    return torch.randn((n_samples, horizon + 1, dim), generator=g, dtype=torch.float64).to(dtype)


def _units(headings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # same conventions as pose.integrate: exact steps on the four cardinal headings
    h = np.mod(headings, 360.0)
    rad = np.radians(h)
    ux, uy = np.cos(rad), -np.sin(rad)
    for deg, (cx, cy) in {0: (1, 0), 90: (0, -1), 180: (-1, 0), 270: (0, 1)}.items():
        m = h == deg
        ux[m], uy[m] = cx, cy
    return ux, uy


def frame_change(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean squared difference between two frame batches."""
    return ((a - b) ** 2).flatten(1).mean(1)


def egocentric_offset(start: PoseBelief, cell: tuple[int, int]) -> tuple[int, int]:
    """``(lateral, forward)`` offset of ``cell`` seen from ``start``; lateral
    is positive to the right."""
    fx, fy = _units(np.array([start.heading]))
    rx, ry = _units(np.array([start.heading - 90.0]))
    sx, sy = start.to_pose().cell
    dx, dy = cell[0] - sx, cell[1] - sy
    return int(round(dx * rx[0] + dy * ry[0])), int(round(dx * fx[0] + dy * fy[0]))


# ---------------------------------------------------------------- results


@dataclass
class Plan:
    actions: tuple[Action, ...]
    efe: float
    goal: float
    ambiguity: float
    terminal_poses: list[PoseBelief]
    samples: list[RolloutSample] | None = None
    blocked: np.ndarray | None = None  # (N, H) imagined blocked Forwards

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def terminal_cell(self) -> tuple[int, int]:
        """Most frequent terminal cell over samples (ties: earliest sample)."""
        cells = [p.to_pose().cell for p in self.terminal_poses]
        counts = Counter(cells)
        top = max(counts.values())
        return next(c for c in cells if counts[c] == top)


@dataclass
class PlanTable:
    """Scores of every evaluated plan, in enumeration order."""

    codes: np.ndarray  # (P,) base-3 plan codes, Forward = digit 0
    horizon: int
    efe: np.ndarray  # (P,)
    goal: np.ndarray  # (P,)
    ambiguity: float
    terminal_xyh: np.ndarray  # (P, N, 3)

    def actions(self, i: int) -> tuple[Action, ...]:
        return decode_plan(int(self.codes[i]), self.horizon)

    def terminal_poses(self, i: int) -> list[PoseBelief]:
        return [PoseBelief(*map(float, row)) for row in self.terminal_xyh[i]]

    def plan(self, i: int) -> Plan:
        return Plan(self.actions(i), float(self.efe[i]), float(self.goal[i]), self.ambiguity, self.terminal_poses(i))

    def best(self) -> int:
        # argmin returns the first minimum, i.e. the lexicographically smallest plan
        return int(np.argmin(self.efe))


def decode_plan(code: int, H: int) -> tuple[Action, ...]:
    digits = []
    for _ in range(H):
        code, d = divmod(code, 3)
        digits.append(Action(d))
    return tuple(reversed(digits))


def encode_plan(plan: Sequence[int]) -> int:
    code = 0
    for a in plan:
        code = code * 3 + int(a)
    return code


@dataclass
class LinkScore:
    source: int | None
    target: int | None
    best_plan: Plan
    G: float
    table: PlanTable | None = None


@dataclass
class EfeField:
    """Minimum EFE per terminal cell, keyed by egocentric ``(lateral, forward)``."""

    horizon: int
    values: dict[tuple[int, int], float] = field(default_factory=dict)

    def argmin(self) -> tuple[int, int]:
        return min(self.values, key=lambda c: (self.values[c], c[1], c[0]))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dx", "dy", "G"])
            for (dx, dy), g in sorted(self.values.items(), key=lambda kv: (kv[0][1], kv[0][0])):
                w.writerow([dx, dy, repr(g)])

    @classmethod
    def from_csv(cls, path: str | Path, horizon: int) -> EfeField:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(horizon, {(int(r["dx"]), int(r["dy"])): float(r["G"]) for r in rows})

    def to_image(self, path: str | Path, px: int = 24) -> None:
        """Heat grid with forward pointing up; low EFE bright, the start cell
        outlined and unreachable cells black."""
        from PIL import Image, ImageDraw

        H = max(self.horizon, 1)
        size = 2 * H + 1
        img = np.zeros((size, size, 3), np.float32)
        vals = np.array(list(self.values.values()))
        lo, hi = (vals.min(), vals.max()) if len(vals) else (0.0, 1.0)
        span = hi - lo if hi > lo else 1.0
        for (dx, dy), g in self.values.items():
            t = 1.0 - (g - lo) / span
            img[H - dy, H + dx] = (t, t**2, 0.2 + 0.6 * (1 - t))
        im = Image.fromarray((img * 255).astype(np.uint8)).resize((size * px, size * px), Image.NEAREST)
        ImageDraw.Draw(im).rectangle([H * px, H * px, (H + 1) * px - 1, (H + 1) * px - 1], outline=(255, 255, 255))
        im.save(path)


# ---------------------------------------------------------------- scoring


def _as_state(mean, std, model: WorldModel) -> LatentState:
    mean = torch.as_tensor(np.asarray(mean), dtype=model.dtype).reshape(1, -1)
    std = torch.as_tensor(np.asarray(std), dtype=model.dtype).reshape(1, -1)
    if mean.shape[-1] != model.latent_dim or std.shape != mean.shape:
        raise ContractError(f"goal state must have {model.latent_dim} features")
    return LatentState(mean, std)


@torch.no_grad()
def evaluate_plans(
    model: WorldModel,
    start: Belief,
    start_pose: PoseBelief,
    goal_state: LatentState,
    goal_pose: PoseBelief,
    H: int,
    cfg: PlannerConfig = PlannerConfig(),
    noise: torch.Tensor | None = None,
) -> PlanTable:
    """Score every plan of length ``H`` by imagination from ``start``."""
    if H > cfg.max_horizon:
        raise PlanBudgetError(f"horizon {H} exceeds the budget of {cfg.max_horizon} ({3**H} plans)")
    N, D = cfg.samples, model.latent_dim
    if noise is None:
        noise = make_noise(N, H, D, cfg.seed, model.dtype)
    if noise.shape != (N, H + 1, D):
        raise ContractError(f"noise must have shape {(N, H + 1, D)}, got {tuple(noise.shape)}")
    noise = noise.to(model.dtype)
    gm, gs = goal_state.mean.reshape(1, -1).to(model.dtype), goal_state.std.reshape(1, -1).to(model.dtype)
    ps, hs = cfg.pos_std, cfg.heading_std

    def goal_kl(mean, std, x, y, h) -> np.ndarray:
        k = kl_diag_gaussian(mean, std, gm, gs).double().numpy()
        dh = (h - goal_pose.heading + 180.0) % 360.0 - 180.0
        return k + ((x - goal_pose.x) ** 2 + (y - goal_pose.y) ** 2) / (2 * ps**2) + dh**2 / (2 * hs**2)

    # level 0: one prefix (the empty plan), N samples
    m0, s0 = start.state.mean.reshape(1, -1), start.state.std.reshape(1, -1)
    s = (m0 + s0 * noise[:, 0]).to(model.dtype)
    ctx = tuple(c.reshape(1, -1).expand(N, -1).contiguous() for c in start.context)
    codes = np.zeros(1, np.int64)
    x = np.full(N, start_pose.x)
    y = np.full(N, start_pose.y)
    h = np.full(N, start_pose.heading)
    if H == 0:
        goal = goal_kl(m0.expand(N, -1), s0.expand(N, -1), x, y, h)
        return PlanTable(codes, 0, goal.mean(keepdims=True), goal.mean(keepdims=True), 0.0, np.stack([x, y, h], -1)[None])
    acc = np.zeros(N)
    nom = np.array([[start_pose.x, start_pose.y, start_pose.heading]])
    cells = np.rint(nom[:, None, :2])

    for k in range(1, H + 1):
        P = len(codes)
        # children ordered (prefix, action, sample)
        acts = np.tile(np.repeat(np.arange(3), N), P)
        parent = np.repeat(np.arange(P), 3 * N) * N + np.tile(np.arange(N), 3 * P)
        parent_t = torch.as_tensor(parent)
        prior, new_ctx = model.prior(s[parent_t], torch.as_tensor(acts), tuple(c[parent_t] for c in ctx))
        eps = noise[:, k].repeat(3 * P, 1)
        s_new = prior.mean + prior.std * eps

        # imagined blocking: a Forward whose decoded frame barely changes
        fwd = np.nonzero(acts == 0)[0]
        blocked = np.zeros(len(acts), bool)
        for i in range(0, len(fwd), cfg.chunk):
            idx = torch.as_tensor(fwd[i : i + cfg.chunk])
            change = frame_change(model.decode(s_new[idx]), model.decode(s[parent_t[idx]]))
            blocked[fwd[i : i + cfg.chunk]] = (change < cfg.tau_same).numpy()

        px, py, ph = x[parent], y[parent], h[parent]
        ux, uy = _units(ph)
        move = (acts == 0) & ~blocked
        nx = np.where(move, px + ux, px)
        ny = np.where(move, py + uy, py)
        nh = np.where(acts == 1, ph + 90.0, np.where(acts == 2, ph - 90.0, ph)) % 360.0
        child_codes = np.repeat(codes * 3, 3) + np.tile(np.arange(3), P)

        if cfg.goal_term == "summed":
            acc = acc[parent] + goal_kl(prior.mean, prior.std, nx, ny, nh)
        elif k == H:
            acc = goal_kl(prior.mean, prior.std, nx, ny, nh)

        keep = None
        if cfg.prune_revisits:
            # nominal (never blocked) cell paths depend only on the prefix
            pa = np.tile(np.arange(3), P)
            pp = np.repeat(np.arange(P), 3)
            nux, nuy = _units(nom[pp, 2])
            step_x = np.where(pa == 0, nux, 0.0)
            step_y = np.where(pa == 0, nuy, 0.0)
            child_nom = np.stack(
                [nom[pp, 0] + step_x, nom[pp, 1] + step_y, np.where(pa == 1, nom[pp, 2] + 90, np.where(pa == 2, nom[pp, 2] - 90, nom[pp, 2])) % 360],
                -1,
            )
            child_cells = np.concatenate([cells[pp], np.rint(child_nom[:, None, :2])], 1)
            ok = np.array([not revisits([tuple(c) for c in row]) for row in child_cells])
            if not ok.any():
                raise PlanBudgetError("revisit pruning removed every plan")
            nom, cells, child_codes = child_nom[ok], child_cells[ok], child_codes[ok]
            if not ok.all():
                keep = np.repeat(ok, N)
        if keep is not None:
            kt = torch.as_tensor(np.nonzero(keep)[0])
            s_new, new_ctx = s_new[kt], tuple(c[kt] for c in new_ctx)
            nx, ny, nh = nx[keep], ny[keep], nh[keep]
            if len(acc) == len(keep):
                acc = acc[keep]
        s, ctx, x, y, h, codes = s_new, new_ctx, nx, ny, nh, child_codes

    P = len(codes)
    goal = acc.reshape(P, N).mean(1)
    ambiguity = H * gaussian_entropy(model.cfg.obs_scale)
    return PlanTable(codes, H, goal + ambiguity, goal, ambiguity, np.stack([x, y, h], -1).reshape(P, N, 3))


@torch.no_grad()
def rollout_plan(
    model: WorldModel,
    start: Belief,
    start_pose: PoseBelief,
    plan: Sequence[int],
    cfg: PlannerConfig = PlannerConfig(),
    noise: torch.Tensor | None = None,
) -> tuple[list[RolloutSample], np.ndarray, list[PoseBelief]]:
    """Imagine one plan with the planner's noise table: per-sample rollouts,
    imagined blocked flags ``(N, H)`` and terminal pose beliefs."""
    N, H, D = cfg.samples, len(plan), model.latent_dim
    if noise is None:
        noise = make_noise(N, H, D, cfg.seed, model.dtype)
    noise = noise.to(model.dtype)
    s = start.state.mean.reshape(1, -1) + start.state.std.reshape(1, -1) * noise[:, 0]
    ctx = tuple(c.reshape(1, -1).expand(N, -1).contiguous() for c in start.context)
    prev_frames = model.decode(s)
    latents, frames, means, stds, blocked = [], [], [], [], []
    poses = [start_pose] * N
    for k, a in enumerate(plan, start=1):
        prior, ctx = model.prior(s, torch.full((N,), int(a)), ctx)
        s = prior.mean + prior.std * noise[:, k]
        f = model.decode(s)
        b = (frame_change(f, prev_frames) < cfg.tau_same).numpy() & (int(a) == Action.FORWARD)
        poses = [integrate(p, a, executed=not bool(bi)) for p, bi in zip(poses, b)]
        latents.append(s)
        frames.append(f)
        means.append(prior.mean)
        stds.append(prior.std)
        blocked.append(b)
        prev_frames = f
    if H == 0:
        empty = torch.zeros((0, D), dtype=model.dtype)
        samples = [RolloutSample(empty, np.zeros((0, 3, 56, 56), np.float32), LatentState(empty, empty)) for _ in range(N)]
        return samples, np.zeros((N, 0), bool), poses
    lat, fr = torch.stack(latents, 1), torch.stack(frames, 1).numpy()
    mu, sd = torch.stack(means, 1), torch.stack(stds, 1)
    samples = [RolloutSample(lat[n], fr[n], LatentState(mu[n], sd[n])) for n in range(N)]
    return samples, np.stack(blocked, 1), poses


def score_link(
    model: WorldModel,
    start: Belief,
    start_pose: PoseBelief,
    goal,
    H: int,
    cfg: PlannerConfig = PlannerConfig(),
    source: int | None = None,
    noise: torch.Tensor | None = None,
) -> LinkScore:
    """Minimum-EFE plan of length ``H`` from the current belief to ``goal``,
    a map node carrying ``state_mean``, ``state_std`` and ``pose``."""
    for attr in ("state_mean", "state_std", "pose"):
        if getattr(goal, attr, None) is None:
            raise ContractError(f"goal node has no {attr}")
    goal_state = _as_state(goal.state_mean, goal.state_std, model)
    table = evaluate_plans(model, start, start_pose, goal_state, goal.pose, H, cfg, noise)
    best = table.plan(table.best())
    return LinkScore(source, getattr(goal, "id", None), best, best.efe, table)


def efe_field(table: PlanTable, start_pose: PoseBelief) -> EfeField:
    """Per terminal cell minimum EFE; a plan's terminal cell is the most
    frequent one over its samples."""
    out: dict[tuple[int, int], float] = {}
    for i in range(len(table.codes)):
        cells = [(int(round(r[0])), int(round(r[1]))) for r in table.terminal_xyh[i]]
        counts = Counter(cells)
        top = max(counts.values())
        cell = next(c for c in cells if counts[c] == top)
        key = egocentric_offset(start_pose, cell)
        g = float(table.efe[i])
        if key not in out or g < out[key]:
            out[key] = g
    return EfeField(table.horizon, out)


# ---------------------------------------------------------------- decisions


@dataclass(frozen=True)
class Decision:
    shortcut: bool
    plan: Plan | None
    G: float
    threshold: float

    @property
    def kind(self) -> str:
        return "Shortcut" if self.shortcut else "Fallback"


def decide_shortcut(score: LinkScore, threshold: float) -> Decision:
    """Shortcut iff ``G < threshold`` (a tie falls back)."""
    ok = bool(score.G < threshold)
    return Decision(ok, score.best_plan if ok else None, score.G, threshold)


def threshold_for(base: float, H: int, obs_scale: float) -> float:
    """Decision threshold at horizon ``H``: a fixed bound on the goal part
    plus the constant ambiguity of ``H`` imagined observations."""
    return base + H * gaussian_entropy(obs_scale)


# ---------------------------------------------------------------- calibration


@torch.no_grad()
def calibrate_tau_same(model: WorldModel, episodes, n_samples: int = 3, seed: int = 0, context_window: int = 10) -> dict:
    """Choose the imagined-blocking threshold from one-step Forward
    imaginations on recorded episodes, labelled by whether the recorded
    Forward actually moved. The threshold is the geometric midpoint of the
    class medians of the decoded frame change."""
    from .worldmodel.model import BeliefTracker

    g = torch.Generator().manual_seed(seed)
    moved, stuck = [], []
    for ep in episodes:
        tracker = BeliefTracker(model, context_window)
        obs = ep.observations()
        for t in range(len(ep)):
            if t > 0 and ep.actions[t] == Action.FORWARD:
                b = tracker.belief
                s = LatentState(b.state.mean.expand(n_samples, -1), b.state.std.expand(n_samples, -1)).sample(g)
                ctx = tuple(c.expand(n_samples, -1).contiguous() for c in b.context)
                prior, _ = model.prior(s, torch.zeros(n_samples, dtype=torch.long), ctx)
                change = frame_change(model.decode(prior.sample(g)), model.decode(s)).numpy()
                same = bool((ep.poses[t] == ep.poses[t - 1]).all())
                (stuck if same else moved).extend(change.tolist())
            tracker.observe(int(ep.actions[t]), obs[t])
    if not moved or not stuck:
        raise ValueError("calibration needs both executed and blocked Forward steps")
    m, s_ = float(np.median(moved)), float(np.median(stuck))
    tau = math.sqrt(max(m, 1e-12) * max(s_, 1e-12))
    moved_a, stuck_a = np.array(moved), np.array(stuck)
    acc = (np.sum(moved_a >= tau) + np.sum(stuck_a < tau)) / (len(moved_a) + len(stuck_a))
    return {
        "tau_same": tau,
        "median_moved": m,
        "median_blocked": s_,
        "n_moved": len(moved),
        "n_blocked": len(stuck),
        "accuracy": float(acc),
        "blocked_recall": float(np.mean(stuck_a < tau)),
        "moved_recall": float(np.mean(moved_a >= tau)),
    }

