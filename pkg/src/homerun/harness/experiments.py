"""Home-run experiments: calibration, the step-count table, the d = 9
gamble rate and figure export."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from ..agents import OursConfig, explore, run_greedy, run_ours, run_traceback
from ..gridworld import step
from ..planner import (
    PlannerConfig,
    calibrate_tau_same,
    efe_field,
    encode_plan,
    rollout_plan,
    score_link,
)
from ..worldmodel.checkpoint import file_digest, load_checkpoint
from .config import ConfigError, ExperimentConfig
from .dataset import collect
from .scenarios import LAYOUTS, VALIDATION_WORLD_SPECS, Scenario, make_scenarios

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("d", "agent", "door", "mean_steps", "n")
EPISODE_COLUMNS = ("d", "door", "scenario", "agent", "steps", "outcome", "decision", "G", "threshold")
CALIBRATION_VERSION = 1
# calibration episodes come from their own collection seed, disjoint from training data
CALIBRATION_COLLECT_SEED = 7


def load_model(path: str | Path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    return model, meta, file_digest(path)


def select(scenarios: list[Scenario], n: int) -> list[Scenario]:
    """``n`` scenarios spread evenly over the list (all of them if fewer)."""
    if n >= len(scenarios):
        return list(scenarios)
    idx = np.unique(np.linspace(0, len(scenarios) - 1, n).round().astype(int))
    return [scenarios[i] for i in idx]


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, cwd=Path(__file__).resolve().parent, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# ---------------------------------------------------------------- calibration


def goal_scores(model, scenarios: list[Scenario], planner: PlannerConfig) -> list[float]:
    """Goal part of the best plan's EFE at each scenario's own horizon."""
    out = []
    for sc in scenarios:
        nav = explore(sc.world, sc.home, sc.outbound, model)
        score = score_link(model, nav.belief, nav.belief_pose, nav.map.nodes[0], sc.d, planner)
        out.append(score.best_plan.goal)
    return out


def calibrate(model, planner: PlannerConfig, d: int = 5, specs=VALIDATION_WORLD_SPECS) -> dict:
    """Imagined-blocking threshold from recorded Forward steps, then the
    decision threshold as the midpoint between the mean goal scores of
    open and closed validation scenarios."""
    doc: dict = {}
    if math.isnan(planner.tau_same):
        data = collect(n_steps=1500, n_worlds=6, seed=CALIBRATION_COLLECT_SEED)
        tau = calibrate_tau_same(model, data.episodes)
        doc["tau"] = tau
        planner = replace(planner, tau_same=tau["tau_same"])
    opened = goal_scores(model, make_scenarios(d, specs, open=True), planner)
    closed = goal_scores(model, make_scenarios(d, specs, open=False), planner)
    threshold = 0.5 * (float(np.mean(opened)) + float(np.mean(closed)))
    doc.update(
        version=CALIBRATION_VERSION,
        tau_same=planner.tau_same,
        threshold=threshold,
        d=d,
        open_goal=opened,
        closed_goal=closed,
        planner=asdict(planner),
    )
    return doc


def resolve_planner(model, ckpt_path: str | Path, ckpt_digest: str, planner: PlannerConfig) -> tuple[PlannerConfig, dict | None]:
    """Fill in ``tau_same`` / ``threshold`` left open in the configuration,
    from a calibration file cached next to the checkpoint."""
    if not math.isnan(planner.tau_same) and planner.threshold is not None:
        return planner, None
    cache = Path(str(ckpt_path) + ".calibration.json")
    key = {k: v for k, v in asdict(planner).items() if k not in ("threshold", "tau_same", "horizon")}
    doc = None
    if cache.is_file():
        doc = json.loads(cache.read_text())
        saved = {k: v for k, v in doc.get("planner", {}).items() if k not in ("threshold", "tau_same", "horizon")}
        if doc.get("checkpoint_sha256") != ckpt_digest or doc.get("version") != CALIBRATION_VERSION or saved != key:
            doc = None
        elif not math.isnan(planner.tau_same) and doc.get("tau_same") != planner.tau_same:
            doc = None
    if doc is None:
        log.info("calibrating planner thresholds for %s", ckpt_path)
        doc = calibrate(model, planner)
        doc["checkpoint_sha256"] = ckpt_digest
        tmp = cache.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        tmp.replace(cache)
    planner = replace(planner, tau_same=doc["tau_same"])
    if planner.threshold is None:
        planner = replace(planner, threshold=doc["threshold"])
    return planner, doc


# ---------------------------------------------------------------- episodes


def outbound_poses(sc: Scenario):
    poses, p = [sc.home], sc.home
    for a in sc.outbound:
        p, _ = step(sc.world, p, a)
        poses.append(p)
    return poses


def run_agents(model, sc: Scenario, planner: PlannerConfig, cfg: ExperimentConfig) -> dict:
    """All three agents on one scenario."""
    tb = run_traceback(sc.world, sc.end, sc.outbound, sc.home, sc.name, sc.open)
    gr = run_greedy(sc.world, sc.end, sc.home, outbound_poses(sc), cfg.budget, sc.name, sc.open)
    nav = explore(sc.world, sc.home, sc.outbound, model)
    ours_cfg = OursConfig(planner, planner.threshold, cfg.replan, cfg.budget)
    ours = run_ours(nav, 0, sc.d, ours_cfg, sc.home, sc.name, sc.open)
    return {"traceback": tb, "greedy": gr, "ours": ours}


def _fmt(x: float) -> str:
    return repr(float(x))


def run_table1(cfg: ExperimentConfig, out_dir: str | Path, write_episodes: bool = True) -> dict:
    """Run every (d, door state) cell and write ``table1.csv``,
    ``episodes.csv``, ``gamble.json`` and, last, ``manifest.json``."""
    torch.use_deterministic_algorithms(True, warn_only=True)
    model, meta, digest = load_model(cfg.checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    planner, calib = resolve_planner(model, cfg.checkpoint, digest, replace(cfg.planner, seed=cfg.seed))
    t0 = time.time()
    cells: dict[tuple[int, str, str], list[int]] = {}
    rows = []
    gamble = {"d": 9, "n": 0, "shortcut": 0}
    for d in cfg.d_values:
        for door_open in (True, False):
            door = "open" if door_open else "closed"
            for sc in select(make_scenarios(d, open=door_open), cfg.runs_for(d)):
                eps = run_agents(model, sc, planner, cfg)
                for agent, ep in eps.items():
                    cells.setdefault((d, agent, door), []).append(ep.step_count)
                    first = ep.decisions[0] if ep.decisions else {}
                    rows.append(
                        {
                            "d": d, "door": door, "scenario": sc.name, "agent": agent,
                            "steps": ep.step_count, "outcome": ep.outcome,
                            "decision": first.get("decision", ""),
                            "G": _fmt(first["G"]) if first else "",
                            "threshold": _fmt(first["threshold"]) if first else "",
                        }
                    )
                    if write_episodes:
                        ep_dir = out / "episodes"
                        ep_dir.mkdir(exist_ok=True)
                        ep.write_jsonl(ep_dir / f"{sc.name}-{agent}.jsonl")
                if d == 9:
                    gamble["n"] += 1
                    gamble["shortcut"] += int(eps["ours"].shortcut_taken)
                log.info("d=%d %s %s: tb %d greedy %d ours %d (%s)", d, door, sc.name,
                         eps["traceback"].step_count, eps["greedy"].step_count, eps["ours"].step_count,
                         eps["ours"].decisions[0]["decision"] if eps["ours"].decisions else "-")
    table = []
    for (d, agent, door), steps in sorted(cells.items(), key=lambda kv: (kv[0][0], ("traceback", "greedy", "ours").index(kv[0][1]), kv[0][2] != "open")):
        table.append({"d": d, "agent": agent, "door": door, "mean_steps": float(np.mean(steps)), "n": len(steps)})
    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in table:
            w.writerow([r["d"], r["agent"], r["door"], _fmt(r["mean_steps"]), r["n"]])
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, EPISODE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    gamble["rate"] = gamble["shortcut"] / gamble["n"] if gamble["n"] else None
    (out / "gamble.json").write_text(json.dumps(gamble, indent=1))
    manifest = {
        "format": "homerun.run",
        "version": 1,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "planner_resolved": asdict(planner),
        "checkpoint": str(cfg.checkpoint),
        "checkpoint_sha256": digest,
        "git": git_describe(),
        "elapsed_s": time.time() - t0,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return {"table": table, "episodes": rows, "gamble": gamble, "planner": planner, "calibration": calib}


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0]) != TABLE_COLUMNS:
        raise ValueError(f"{path}: not a results table")
    return [{"d": int(r["d"]), "agent": r["agent"], "door": r["door"], "mean_steps": float(r["mean_steps"]), "n": int(r["n"])} for r in rows]


# ---------------------------------------------------------------- figures


def _strip(frames: np.ndarray) -> np.ndarray:
    """(N, H, 3, h, w) -> (N*h, H*w, 3) uint8 with 2-px gutters."""
    N, H, _, h, w = frames.shape
    g = 2
    img = np.full((N * (h + g) - g, H * (w + g) - g, 3), 255, np.uint8)
    for n in range(N):
        for k in range(H):
            tile = (np.clip(frames[n, k], 0, 1).transpose(1, 2, 0) * 255).round().astype(np.uint8)
            img[n * (h + g) : n * (h + g) + h, k * (w + g) : k * (w + g) + w] = tile
    return img


def render_figures(cfg: ExperimentConfig, out_dir: str | Path, d: int = 5, index: int = 0) -> dict:
    """EFE fields (open and closed door) and imagined rollout strips of the
    direct plan for one seeded scenario."""
    from PIL import Image

    model, _, digest = load_model(cfg.checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    planner, _ = resolve_planner(model, cfg.checkpoint, digest, replace(cfg.planner, seed=cfg.seed))
    files = {}
    for door_open in (True, False):
        tag = "open" if door_open else "closed"
        sc = make_scenarios(d, open=door_open)[index]
        nav = explore(sc.world, sc.home, sc.outbound, model)
        score = score_link(model, nav.belief, nav.belief_pose, nav.map.nodes[0], d, planner)
        field = efe_field(score.table, nav.belief_pose)
        field.to_csv(out / f"efe_field_{tag}.csv")
        field.to_image(out / f"efe_field_{tag}.png")
        for name, plan in (("direct", sc.shortcut), ("best", score.best_plan.actions)):
            samples, _, _ = rollout_plan(model, nav.belief, nav.belief_pose, plan, planner)
            frames = np.stack([s.frames for s in samples])
            Image.fromarray(_strip(frames)).save(out / f"rollout_{name}_{tag}.png")
        files[tag] = {
            "scenario": sc.name,
            "argmin": list(field.argmin()),
            "goal_cell": None if LAYOUTS[d][2] else [0, d],
            "best_plan": [int(a) for a in score.best_plan.actions],
            "direct_plan_G": float(score.table.efe[list(score.table.codes).index(encode_plan(sc.shortcut))]),
            "G": score.G,
        }
    (out / "figures.json").write_text(json.dumps(files, indent=1))
    return files

