"""Free-energy training of the world model on fixed-length windows."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..gridworld import render_grid
from .checkpoint import save_checkpoint
from .model import TrainingDivergenceError, WorldModel
from .networks import PRESETS, ModelConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_FE", "val_FE", "KL", "NLL")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-4
    batch_size: int = 16
    seq_len: int = 10
    seed: int = 0
    preset: str = "paper"
    checkpoint_every: int = 10
    grad_clip: float | None = None
    deterministic: bool = True
    obs_scale: float | None = None  # overrides the preset's observation scale


def set_determinism(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=True)


def make_windows(episodes: Sequence, seq_len: int, offset: int = 0) -> list[tuple[int, int]]:
    """Non-overlapping ``(episode, start)`` windows, shifted by ``offset``."""
    out = []
    for i, ep in enumerate(episodes):
        start = offset % seq_len
        while start + seq_len <= len(ep):
            out.append((i, start))
            start += seq_len
    return out


def window_batch(episodes, windows, seq_len: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    acts, obs = [], []
    for i, s in windows:
        ep = episodes[i]
        a = ep.actions[s : s + seq_len].copy()
        acts.append(a)
        obs.append(np.stack([render_grid(g) for g in ep.grids[s : s + seq_len]]))
    return torch.as_tensor(np.stack(acts)), torch.as_tensor(np.stack(obs), dtype=dtype)


@torch.no_grad()
def evaluate(model: WorldModel, episodes, seq_len: int, batch_size: int = 64, seed: int = 12345) -> dict:
    """Mean per-window free energy on all offset-0 windows, with fixed noise."""
    windows = make_windows(episodes, seq_len)
    if not windows:
        return {"FE": float("nan"), "KL": float("nan"), "NLL": float("nan")}
    g = torch.Generator().manual_seed(seed)
    tot = {"FE": 0.0, "KL": 0.0, "NLL": 0.0}
    for k in range(0, len(windows), batch_size):
        chunk = windows[k : k + batch_size]
        a, o = window_batch(episodes, chunk, seq_len, model.dtype)
        fe = model.free_energy(a, o, generator=g)
        n = len(chunk)
        tot["FE"] += float(fe.total) * n
        tot["KL"] += float(fe.kl) * n
        tot["NLL"] += float(fe.nll) * n
    return {k: v / len(windows) for k, v in tot.items()}


def train(
    dataset,
    config: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    model: WorldModel | None = None,
    model_config: ModelConfig | None = None,
) -> tuple[WorldModel, list[dict]]:
    """Train on ``dataset``'s train split, validating on its val split.

    Writes ``train_log.csv`` and ``model.ckpt`` (periodically and at the end)
    into ``out_dir`` when given. Raises ``TrainingDivergenceError`` on a
    non-finite loss; the last good checkpoint stays on disk.
    """
    set_determinism(config.seed, config.deterministic)
    train_eps, val_eps = dataset.split("train"), dataset.split("val")
    if not train_eps:
        raise ValueError("dataset has no training episodes")
    if model is None:
        mc = model_config or PRESETS[config.preset]
        if config.obs_scale is not None:
            mc = replace(mc, obs_scale=config.obs_scale)
        model = WorldModel(mc)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)

    def checkpoint(epoch: int, history: list[dict]) -> None:
        if out is None:
            return
        meta = {"epoch": epoch, "train_config": asdict(config), "history": history}
        meta.update(dataset_metadata=dataset.metadata)
        save_checkpoint(model, out / "model.ckpt", meta)

    history: list[dict] = []
    model.eval()
    v = evaluate(model, val_eps, config.seq_len)
    row = {"epoch": 0, "train_FE": float("nan"), "val_FE": v["FE"], "KL": v["KL"], "NLL": v["NLL"]}
    history.append(row)
    try:
        if writer:
            writer.writerow([row[c] for c in LOG_COLUMNS])
        for epoch in range(1, config.epochs + 1):
            t0 = time.time()
            model.train()
            windows = make_windows(train_eps, config.seq_len, offset=int(rng.integers(config.seq_len)))
            order = rng.permutation(len(windows))
            sums = np.zeros(3)
            for k in range(0, len(order), config.batch_size):
                idx = [windows[j] for j in order[k : k + config.batch_size]]
                a, o = window_batch(train_eps, idx, config.seq_len, model.dtype)
                fe = model.free_energy(a, o, generator=noise_gen)
                if not torch.isfinite(fe.total):
                    raise TrainingDivergenceError(f"non-finite free energy at epoch {epoch}")
                opt.zero_grad()
                fe.total.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                sums += np.array([fe.total.item(), fe.kl.item(), fe.nll.item()]) * len(idx)
            sums /= max(len(windows), 1)
            model.eval()
            v = evaluate(model, val_eps, config.seq_len)
            row = {"epoch": epoch, "train_FE": sums[0], "val_FE": v["FE"], "KL": sums[1], "NLL": sums[2]}
            history.append(row)
            if writer:
                writer.writerow([row[c] for c in LOG_COLUMNS])
                log_fh.flush()
            log.info(
                "epoch %d train FE %.1f val FE %.1f (KL %.1f NLL %.1f) %.1fs",
                epoch, sums[0], v["FE"], sums[1], sums[2], time.time() - t0,
            )
            if not math.isfinite(v["FE"]) and val_eps:
                raise TrainingDivergenceError(f"non-finite validation free energy at epoch {epoch}")
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                checkpoint(epoch, history)
    finally:
        if writer:
            log_fh.close()
    model.eval()
    return model, history
