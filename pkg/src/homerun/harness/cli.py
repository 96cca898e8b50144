"""Command line entry point.

    homerun collect  --out data.npz [--steps 12000 --worlds 39 --policy scripted-forage --seed 0]
    homerun train    --data data.npz --out run/ [--epochs 300 --preset paper --seed 0]
    homerun explore  --d 5 --index 0 [--closed] --out map.json
    homerun homerun  --d 5 --index 0 [--closed] [--out episodes/]
    homerun table1   --out results/
    homerun figures  --out figures/

``explore``, ``homerun``, ``table1`` and ``figures`` read the experiment
configuration from ``--config FILE`` with ``--set key=value`` overrides.
Relative paths default under ``$HOMERUN_DATA``.

Exit codes: 0 success, 2 configuration error, 3 step budget exceeded or
training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..planner import PlanBudgetError
from ..worldmodel.model import TrainingDivergenceError
from .config import ConfigError, data_root, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3

log = logging.getLogger("homerun")


class BudgetExceeded(RuntimeError):
    pass


def _experiment_config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def _scenario(args):
    from .scenarios import make_scenarios

    if args.d not in (5, 6, 7, 9):
        raise ConfigError(f"no scenario layout for d={args.d}")
    scenarios = make_scenarios(args.d, open=not args.closed)
    if not 0 <= args.index < len(scenarios):
        raise ConfigError(f"scenario index {args.index} outside 0..{len(scenarios) - 1}")
    return scenarios[args.index]


def cmd_collect(args) -> int:
    from .dataset import collect

    try:
        ds = collect(args.steps, args.worlds, args.policy, args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = Path(args.out or data_root() / "dataset.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    print(f"{len(ds.episodes)} episodes, {args.steps} steps -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from ..worldmodel import PRESETS, TrainConfig, train
    from .dataset import Dataset

    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    path = Path(args.data or data_root() / "dataset.npz")
    if not path.is_file():
        raise ConfigError(f"dataset not found: {path}")
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, preset=args.preset, lr=args.lr, obs_scale=args.obs_scale)
    out = Path(args.out or data_root())
    _, history = train(Dataset.load(path), cfg, out_dir=out)
    print(f"epoch {history[-1]['epoch']} val FE {history[-1]['val_FE']:.1f} -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_explore(args) -> int:
    from ..agents import explore
    from .experiments import load_model

    cfg = _experiment_config(args)
    sc = _scenario(args)
    model, _, _ = load_model(cfg.checkpoint)
    nav = explore(sc.world, sc.home, sc.outbound, model)
    out = Path(args.out or data_root() / f"{sc.name}.map.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    nav.map.save(out)
    print(f"{sc.name}: {len(nav.map.nodes)} nodes, {len(nav.map.links)} links -> {out}")
    return EXIT_OK


def cmd_homerun(args) -> int:
    from .experiments import load_model, resolve_planner, run_agents

    cfg = _experiment_config(args)
    sc = _scenario(args)
    model, _, digest = load_model(cfg.checkpoint)
    planner, _ = resolve_planner(model, cfg.checkpoint, digest, replace(cfg.planner, seed=cfg.seed))
    episodes = run_agents(model, sc, planner, cfg)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for agent, ep in episodes.items():
        print(f"{sc.name} {agent}: {ep.step_count} steps, {ep.outcome}")
        if out is not None:
            ep.write_jsonl(out / f"{sc.name}-{agent}.jsonl")
    if any(ep.outcome == "budget_exceeded" for ep in episodes.values()):
        raise BudgetExceeded(f"{sc.name}: step budget {cfg.budget} exceeded")
    return EXIT_OK


def cmd_table1(args) -> int:
    from .experiments import run_table1

    cfg = _experiment_config(args)
    out = Path(args.out or data_root() / "table1")
    res = run_table1(cfg, out, write_episodes=not args.no_episodes)
    print(f"{'d':>2} {'agent':<10} {'door':<6} {'mean':>7} {'n':>3}")
    for r in res["table"]:
        print(f"{r['d']:>2} {r['agent']:<10} {r['door']:<6} {r['mean_steps']:>7.2f} {r['n']:>3}")
    g = res["gamble"]
    if g["n"]:
        print(f"d=9 gamble rate {g['rate']:.2f} ({g['shortcut']}/{g['n']})")
    print(f"-> {out}")
    return EXIT_OK


def cmd_figures(args) -> int:
    from .experiments import render_figures

    cfg = _experiment_config(args)
    out = Path(args.out or data_root() / "figures")
    files = render_figures(cfg, out, d=args.d, index=args.index)
    print(json.dumps(files, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homerun", description="Home-run navigation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    c = sub.add_parser("collect", help="record a dataset of action/observation episodes")
    c.add_argument("--steps", type=int, default=12_000)
    c.add_argument("--worlds", type=int, default=39)
    c.add_argument("--policy", default="scripted-forage")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="train the world model")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--preset", default="paper")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--obs-scale", type=float, help="observation noise scale (preset default 0.1)")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    def experiment(q):
        q.add_argument("--config", help="key = value configuration file")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        q.add_argument("--out")

    def scenario(q):
        q.add_argument("--d", type=int, default=5)
        q.add_argument("--index", type=int, default=0)

    e = sub.add_parser("explore", help="build the map of one scenario's outbound trip")
    experiment(e)
    scenario(e)
    e.add_argument("--closed", action="store_true")
    e.set_defaults(func=cmd_explore)

    h = sub.add_parser("homerun", help="run all agents on one scenario")
    experiment(h)
    scenario(h)
    h.add_argument("--closed", action="store_true")
    h.set_defaults(func=cmd_homerun)

    r = sub.add_parser("table1", help="run the step-count table")
    experiment(r)
    r.add_argument("--no-episodes", action="store_true", help="skip per-episode JSONL files")
    r.set_defaults(func=cmd_table1)

    f = sub.add_parser("figures", help="EFE fields and imagined rollouts")
    experiment(f)
    scenario(f)
    f.set_defaults(func=cmd_figures)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetExceeded, PlanBudgetError, TrainingDivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
