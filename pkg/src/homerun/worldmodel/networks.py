"""Prior, posterior and likelihood networks of the low-level model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..gridworld import N_ACTIONS, VIEW_PX

# spatial sizes after each upsampling stage of the decoder; ends at the view size
_DECODER_SIZES = (4, 7, 14, 28, VIEW_PX)


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 30
    hidden_dim: int = 200
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    decoder_channels: tuple[int, ...] = (128, 64, 32, 16)
    obs_scale: float = 0.1
    min_std: float = 1e-3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


PRESETS = {
    "paper": ModelConfig(),
    "tiny": ModelConfig(
        latent_dim=16,
        hidden_dim=100,
        encoder_channels=(8, 16, 32, 64, 128),
        decoder_channels=(64, 32, 16, 8),
    ),
}


def one_hot_actions(actions: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """Integer actions -> one-hot; ``-1`` (no previous action) maps to zeros."""
    actions = torch.as_tensor(actions, dtype=torch.long)
    out = F.one_hot(actions.clamp(min=0), N_ACTIONS).to(dtype)
    return out * (actions >= 0).unsqueeze(-1).to(dtype)


def split_gaussian(raw: torch.Tensor, min_std: float) -> tuple[torch.Tensor, torch.Tensor]:
    mean, pre_std = raw.chunk(2, dim=-1)
    return mean, F.softplus(pre_std) + min_std


class Encoder(nn.Module):
    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        layers, c_in = [], 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.SiLU()]
            c_in = c
        self.net = nn.Sequential(*layers, nn.Flatten())
        self.out_dim = channels[-1] * 2 * 2

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.net(obs)


class PosteriorNet(nn.Module):
    """Q(s_t | s_{t-1}, a_{t-1}, o_t)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_channels)
        self.head = nn.Sequential(
            nn.Linear(self.encoder.out_dim + N_ACTIONS + cfg.latent_dim, cfg.hidden_dim),
            nn.SiLU(),
            nn.Linear(cfg.hidden_dim, 2 * cfg.latent_dim),
        )

    def forward(self, prev_s, action_1h, obs):
        feat = self.encoder(obs)
        raw = self.head(torch.cat([feat, action_1h, prev_s], dim=-1))
        return split_gaussian(raw, self.cfg.min_std)


class PriorNet(nn.Module):
    """P(s_t | s_{t-1}, a_{t-1}) with an LSTM cell carrying recurrent context."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.cell = nn.LSTMCell(cfg.latent_dim + N_ACTIONS, cfg.hidden_dim)
        self.head = nn.Linear(cfg.hidden_dim, 2 * cfg.latent_dim)

    def forward(self, prev_s, action_1h, context):
        h, c = self.cell(torch.cat([prev_s, action_1h], dim=-1), context)
        mean, std = split_gaussian(self.head(h), self.cfg.min_std)
        return mean, std, (h, c)


class LikelihoodNet(nn.Module):
    """Mean image of P(o_t | s_t); values squashed into [0, 1]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        top = cfg.encoder_channels[-1]
        self.dense = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.hidden_dim),
            nn.SiLU(),
            nn.Linear(cfg.hidden_dim, top * 2 * 2),
            nn.SiLU(),
            nn.Unflatten(1, (top, 2, 2)),
        )
        layers, c_in = [], top
        for size, c in zip(_DECODER_SIZES, (*cfg.decoder_channels, 3)):
            layers += [nn.Upsample(size=(size, size)), nn.Conv2d(c_in, c, 3, padding=1)]
            if c != 3:
                layers.append(nn.SiLU())
            c_in = c
        self.deconv = nn.Sequential(*layers)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.deconv(self.dense(s)))
