from __future__ import annotations

import csv
import math

import numpy as np
import pytest
import torch

from homerun.gridworld import OBS_SHAPE, Action, Pose, render_view, step
from homerun.harness.dataset import collect
from homerun.worldmodel import (
    PRESETS,
    BeliefTracker,
    ContractError,
    LatentState,
    ModelConfig,
    TrainConfig,
    TrainingDivergenceError,
    WorldModel,
    gaussian_entropy,
    kl_diag_gaussian,
    load_checkpoint,
    save_checkpoint,
    train,
)
from homerun.worldmodel.checkpoint import CheckpointError, file_digest, read_checkpoint
from homerun.worldmodel.networks import one_hot_actions
from homerun.worldmodel.train import LOG_COLUMNS, make_windows


def test_paper_preset_sizes():
    cfg = PRESETS["paper"]
    assert (cfg.latent_dim, cfg.hidden_dim, cfg.obs_scale) == (30, 200, 0.1)
    m = WorldModel(cfg)
    lstm = m.prior_net.cell
    assert (lstm.input_size, lstm.hidden_size) == (33, 200)
    assert m.posterior_net.encoder.out_dim == 256 * 2 * 2
    convs = [l for l in m.posterior_net.encoder.net if isinstance(l, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [16, 32, 64, 128, 256]
    assert all(c.kernel_size == (3, 3) and c.stride == (2, 2) for c in convs)


def test_one_hot_no_action_is_zero():
    oh = one_hot_actions(torch.tensor([-1, 0, 2]))
    assert oh.tolist() == [[0, 0, 0], [1, 0, 0], [0, 0, 1]]


def test_shapes_and_std_positive(tiny_model):
    m = tiny_model
    s = torch.randn(4, m.latent_dim)
    obs = torch.rand(4, *OBS_SHAPE)
    post = m.posterior(s, torch.tensor([0, 1, 2, -1]), obs)
    prior, ctx = m.prior(s, torch.tensor([0, 1, 2, 0]))
    assert post.mean.shape == prior.mean.shape == (4, m.latent_dim)
    assert (post.std > 0).all() and (prior.std > 0).all()
    assert ctx[0].shape == (4, m.cfg.hidden_dim)
    with torch.no_grad():
        img = m.likelihood(post.mean).mean
    assert img.shape == (4, *OBS_SHAPE)
    assert float(img.min()) >= 0 and float(img.max()) <= 1


def test_contract_errors(tiny_model):
    m = tiny_model
    with pytest.raises(ContractError):
        m.posterior(torch.zeros(1, m.latent_dim), torch.tensor([0]), torch.zeros(1, 3, 32, 32))
    with pytest.raises(ContractError):
        m.prior(torch.zeros(1, m.latent_dim + 1), torch.tensor([0]))
    with pytest.raises(ContractError):
        m.free_energy(torch.zeros(2, 3, dtype=torch.long), torch.zeros(2, 4, *OBS_SHAPE))


def test_kl_closed_form_scalar():
    mq, sq, mp, sp = 0.5, 0.3, -0.2, 1.1
    expected = math.log(sp / sq) + (sq**2 + (mq - mp) ** 2) / (2 * sp**2) - 0.5
    got = kl_diag_gaussian(torch.tensor([mq]), torch.tensor([sq]), torch.tensor([mp]), torch.tensor([sp]))
    assert float(got) == pytest.approx(expected, rel=1e-6)


def test_observation_entropy_constant():
    # 9408 independent Gaussians of std 0.1
    assert gaussian_entropy(0.1) == pytest.approx(9408 * 0.5 * math.log(2 * math.pi * math.e * 0.01))
    assert gaussian_entropy(0.1) < 0  # differential entropy at this scale is negative


def test_free_energy_decomposes(tiny_model):
    torch.manual_seed(0)
    a = torch.tensor([[-1, 0, 1], [-1, 2, 0]])
    o = torch.rand(2, 3, *OBS_SHAPE)
    noise = torch.randn(2, 3, tiny_model.latent_dim)
    with torch.no_grad():
        fe = tiny_model.free_energy(a, o, noise=noise)
        again = tiny_model.free_energy(a, o, noise=noise)
    assert float(fe.total) == pytest.approx(float(fe.kl + fe.nll))
    assert float(fe.kl) >= 0
    assert float(again.total) == float(fe.total)


def test_imagine_shapes(tiny_model, world):
    m = tiny_model
    tr = BeliefTracker(m)
    tr.observe(-1, render_view(world, Pose(2, 2, 0)))
    g = torch.Generator().manual_seed(0)
    roll = m.imagine(tr.belief, [0, 1, 0], n_samples=3, generator=g)
    assert len(roll) == 3
    assert roll[0].frames.shape == (3, *OBS_SHAPE) and roll[0].latents.shape == (3, m.latent_dim)
    assert m.imagine(tr.belief, [], 2)[0].horizon == 0


def test_belief_tracker_window(tiny_model, world):
    m = tiny_model
    pose = Pose(2, 2, 0)
    tr_full, tr_win = BeliefTracker(m, None), BeliefTracker(m, 3)
    tr_full.observe(-1, render_view(world, pose))
    tr_win.observe(-1, render_view(world, pose))
    for a in [Action.FORWARD, Action.TURN_LEFT, Action.FORWARD, Action.TURN_RIGHT, Action.FORWARD]:
        pose, obs = step(world, pose, a)
        b_full = tr_full.observe(int(a), obs)
        b_win = tr_win.observe(int(a), obs)
    # posteriors agree, the contexts differ once history exceeds the window
    assert torch.allclose(b_full.state.mean, b_win.state.mean)
    assert not torch.allclose(b_full.context[0], b_win.context[0])


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    save_checkpoint(tiny_model, tmp_path / "m.ckpt", {"epoch": 3})
    m2, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["epoch"] == 3 and ModelConfig.from_dict(meta["model_config"]) == tiny_model.cfg
    for (k, v), (k2, v2) in zip(tiny_model.state_dict().items(), m2.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    # re-saving the loaded model is byte-identical
    save_checkpoint(m2, tmp_path / "m2.ckpt", {"epoch": 3})
    assert file_digest(tmp_path / "m.ckpt") == file_digest(tmp_path / "m2.ckpt")


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.ckpt")


def test_windows_are_disjoint():
    eps = [np.zeros(25), np.zeros(9), np.zeros(10)]
    w = make_windows(eps, 10, offset=3)
    assert w == [(0, 3), (0, 13)]
    assert make_windows(eps, 10) == [(0, 0), (0, 10), (2, 0)]


@pytest.fixture(scope="module")
def small_dataset():
    return collect(n_steps=300, n_worlds=3, seed=5)


def test_training_smoke_writes_log_and_checkpoint(tmp_path, small_dataset):
    cfg = TrainConfig(epochs=2, preset="tiny", batch_size=4, checkpoint_every=1)
    model, hist = train(small_dataset, cfg, tmp_path)
    assert len(hist) == 3
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 4
    m2, meta = load_checkpoint(tmp_path / "model.ckpt")
    assert meta["epoch"] == 2 and meta["train_config"]["preset"] == "tiny"
    assert hist[2]["val_FE"] < hist[0]["val_FE"]


def test_training_is_deterministic(tmp_path, small_dataset):
    cfg = TrainConfig(epochs=1, preset="tiny", batch_size=4)
    train(small_dataset, cfg, tmp_path / "a")
    train(small_dataset, cfg, tmp_path / "b")
    assert file_digest(tmp_path / "a" / "model.ckpt") == file_digest(tmp_path / "b" / "model.ckpt")


def test_obs_scale_override(tmp_path, small_dataset):
    model, _ = train(small_dataset, TrainConfig(epochs=1, preset="tiny", obs_scale=0.3), tmp_path)
    assert model.cfg.obs_scale == 0.3
    assert load_checkpoint(tmp_path / "model.ckpt")[0].cfg.obs_scale == 0.3


def test_divergence_raises(tmp_path, small_dataset):
    torch.manual_seed(0)
    m = WorldModel(PRESETS["tiny"])
    with torch.no_grad():
        m.likelihood_net.dense[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergenceError):
        train(small_dataset, TrainConfig(epochs=1, preset="tiny"), tmp_path, model=m)


def test_latent_state_sample_is_seeded():
    st = LatentState(torch.zeros(2, 4), torch.ones(2, 4))
    a = st.sample(torch.Generator().manual_seed(1))
    b = st.sample(torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
