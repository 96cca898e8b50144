"""Latent world model: filtering, one-step prediction, decoding, training
loss and prior-only imagination."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from ..gridworld import OBS_SHAPE
from .networks import LikelihoodNet, ModelConfig, PosteriorNet, PriorNet, one_hot_actions

Context = tuple[torch.Tensor, torch.Tensor]

OBS_NUMEL = int(np.prod(OBS_SHAPE))


class ContractError(ValueError):
    """Inputs with the wrong shape or type for a model operation."""


class TrainingDivergenceError(RuntimeError):
    pass


def kl_diag_gaussian(mean_q, std_q, mean_p, std_p) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    var_ratio = (std_q / std_p) ** 2
    t = ((mean_q - mean_p) / std_p) ** 2
    return 0.5 * (var_ratio + t - 1.0 - torch.log(var_ratio)).sum(-1)


@dataclass(frozen=True)
class LatentState:
    """Diagonal Gaussian belief over the latent features."""

    mean: torch.Tensor
    std: torch.Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + self.std * eps

    def kl(self, other: LatentState) -> torch.Tensor:
        return kl_diag_gaussian(self.mean, self.std, other.mean, other.std)

    def detach(self) -> LatentState:
        return LatentState(self.mean.detach().clone(), self.std.detach().clone())

    def __getitem__(self, idx) -> LatentState:
        return LatentState(self.mean[idx], self.std[idx])


@dataclass(frozen=True)
class ObservationDist:
    """Independent Gaussian per pixel with a fixed scale."""

    mean: torch.Tensor
    scale: float

    def log_prob(self, obs: torch.Tensor) -> torch.Tensor:
        z = (obs - self.mean) / self.scale
        per_px = -0.5 * z**2 - math.log(self.scale) - 0.5 * math.log(2 * math.pi)
        return per_px.flatten(-3).sum(-1)

    def entropy(self) -> torch.Tensor:
        return torch.full(self.mean.shape[:-3], gaussian_entropy(self.scale), dtype=self.mean.dtype)


def gaussian_entropy(scale: float, numel: int = OBS_NUMEL) -> float:
    """Differential entropy of the fixed-scale observation model, in nats."""
    return numel * 0.5 * math.log(2 * math.pi * math.e * scale**2)


class FreeEnergy(NamedTuple):
    total: torch.Tensor
    kl: torch.Tensor
    nll: torch.Tensor


@dataclass(frozen=True)
class Belief:
    """Filtered posterior plus the prior's recurrent context positioned at
    the same time step."""

    state: LatentState
    context: Context


@dataclass
class RolloutSample:
    latents: torch.Tensor  # (H, D) sampled states
    frames: np.ndarray  # (H, 3, 56, 56) decoded means
    priors: LatentState  # (H, D) one-step prior at each step

    @property
    def horizon(self) -> int:
        return self.latents.shape[0]


class WorldModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.posterior_net = PosteriorNet(self.cfg)
        self.prior_net = PriorNet(self.cfg)
        self.likelihood_net = LikelihoodNet(self.cfg)
        # conv kernels run markedly faster on CPU in NHWC layout
        self.to(memory_format=torch.channels_last)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def initial_context(self, batch: int) -> Context:
        z = torch.zeros(batch, self.cfg.hidden_dim, dtype=self.dtype)
        return (z, z.clone())

    def zero_state(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.latent_dim, dtype=self.dtype)

    def _check_obs(self, obs: torch.Tensor) -> torch.Tensor:
        obs = torch.as_tensor(obs, dtype=self.dtype)
        if tuple(obs.shape[-3:]) != OBS_SHAPE:
            raise ContractError(f"observation must end in shape {OBS_SHAPE}, got {tuple(obs.shape)}")
        return obs

    # -------------------------------------------------------------- one step

    def posterior(self, prev_s: torch.Tensor, action, obs) -> LatentState:
        obs = self._check_obs(obs)
        if prev_s.shape[-1] != self.cfg.latent_dim:
            raise ContractError(f"state must have {self.cfg.latent_dim} features, got {prev_s.shape[-1]}")
        mean, std = self.posterior_net(prev_s, one_hot_actions(action, self.dtype), obs)
        return LatentState(mean, std)

    def prior(self, prev_s: torch.Tensor, action, context: Context | None = None) -> tuple[LatentState, Context]:
        if prev_s.shape[-1] != self.cfg.latent_dim:
            raise ContractError(f"state must have {self.cfg.latent_dim} features, got {prev_s.shape[-1]}")
        if context is None:
            context = self.initial_context(prev_s.shape[0])
        mean, std, context = self.prior_net(prev_s, one_hot_actions(action, self.dtype), context)
        return LatentState(mean, std), context

    def likelihood(self, s: torch.Tensor) -> ObservationDist:
        if s.shape[-1] != self.cfg.latent_dim:
            raise ContractError(f"state must have {self.cfg.latent_dim} features, got {s.shape[-1]}")
        return ObservationDist(self.likelihood_net(s), self.cfg.obs_scale)

    def decode(self, s: torch.Tensor, chunk: int = 512) -> torch.Tensor:
        """Batched mean-image decoding without gradients."""
        with torch.no_grad():
            parts = [self.likelihood_net(s[i : i + chunk]) for i in range(0, s.shape[0], chunk)]
        if not parts:
            return torch.zeros((0, *OBS_SHAPE), dtype=self.dtype)
        return torch.cat(parts).contiguous()

    # -------------------------------------------------------------- training

    def free_energy(
        self,
        actions: torch.Tensor,
        observations: torch.Tensor,
        noise: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> FreeEnergy:
        """Free energy of ``(B, T)`` action / ``(B, T, 3, 56, 56)`` observation
        windows. ``actions[:, t]`` is the action that led into
        ``observations[:, t]`` (``-1`` when unknown). Sums over time, averages
        over the batch. ``noise`` of shape ``(B, T, D)`` fixes the
        reparameterisation draws."""
        observations = self._check_obs(observations)
        actions = torch.as_tensor(actions, dtype=torch.long)
        B, T = actions.shape
        if observations.shape[:2] != (B, T):
            raise ContractError("actions and observations disagree on (batch, time)")
        s_prev = self.zero_state(B)
        context = self.initial_context(B)
        kl_terms, samples = [], []
        for t in range(T):
            prior, context = self.prior(s_prev, actions[:, t], context)
            post = self.posterior(s_prev, actions[:, t], observations[:, t])
            if noise is not None:
                eps = noise[:, t]
            else:
                eps = torch.randn(post.mean.shape, generator=generator, dtype=post.mean.dtype)
            s_prev = post.mean + post.std * eps
            kl_terms.append(post.kl(prior))
            samples.append(s_prev)
        s_all = torch.stack(samples, 1).flatten(0, 1)
        recon = self.likelihood(s_all)
        nll = -recon.log_prob(observations.flatten(0, 1)).view(B, T).sum(1).mean()
        kl = torch.stack(kl_terms, 1).sum(1).mean()
        return FreeEnergy(kl + nll, kl, nll)

    # -------------------------------------------------------------- inference

    @torch.no_grad()
    def observe(self, belief: Belief | None, action: int, obs) -> Belief:
        """One filtering step using the previous posterior mean."""
        if belief is None:
            s_prev, context = self.zero_state(1), self.initial_context(1)
        else:
            s_prev, context = belief.state.mean, belief.context
        a = torch.tensor([action])
        _, context = self.prior(s_prev, a, context)
        post = self.posterior(s_prev, a, torch.as_tensor(obs, dtype=self.dtype).unsqueeze(0))
        return Belief(post, context)

    @torch.no_grad()
    def imagine(
        self,
        start: Belief,
        plan: Sequence[int],
        n_samples: int,
        generator: torch.Generator | None = None,
    ) -> list[RolloutSample]:
        """``n_samples`` independent prior rollouts of ``plan`` from ``start``."""
        H = len(plan)
        state = LatentState(start.state.mean.expand(n_samples, -1), start.state.std.expand(n_samples, -1))
        s = state.sample(generator)
        context = tuple(c.expand(n_samples, -1).contiguous() for c in start.context)
        latents, means, stds = [], [], []
        for a in plan:
            prior, context = self.prior(s, torch.full((n_samples,), int(a)), context)
            s = prior.sample(generator)
            latents.append(s)
            means.append(prior.mean)
            stds.append(prior.std)
        if H == 0:
            empty = torch.zeros((0, self.latent_dim), dtype=self.dtype)
            return [
                RolloutSample(empty, np.zeros((0, *OBS_SHAPE), np.float32), LatentState(empty, empty))
                for _ in range(n_samples)
            ]
        lat = torch.stack(latents, 1)  # (N, H, D)
        frames = self.decode(lat.flatten(0, 1)).view(n_samples, H, *OBS_SHAPE).numpy()
        mu, sd = torch.stack(means, 1), torch.stack(stds, 1)
        return [RolloutSample(lat[i], frames[i], LatentState(mu[i], sd[i])) for i in range(n_samples)]


@dataclass
class BeliefTracker:
    """Online filter over an executed trajectory.

    The recurrent context handed to imagination is rebuilt from the last
    ``context_window`` executed steps so it matches the window length the
    prior was trained on (``None`` keeps the full history).
    """

    model: WorldModel
    context_window: int | None = 10
    belief: Belief | None = None
    _history: deque = field(default_factory=deque)

    def reset(self) -> None:
        self.belief = None
        self._history.clear()

    @torch.no_grad()
    def observe(self, action: int, obs) -> Belief:
        prev = self.belief
        s_prev = self.model.zero_state(1) if prev is None else prev.state.mean
        self.belief = self.model.observe(prev, action, obs)
        self._history.append((s_prev, int(action)))
        if self.context_window is not None:
            while len(self._history) > self.context_window:
                self._history.popleft()
            context = self.model.initial_context(1)
            for s, a in self._history:
                _, context = self.model.prior(s, torch.tensor([a]), context)
            self.belief = Belief(self.belief.state, context)
        return self.belief
