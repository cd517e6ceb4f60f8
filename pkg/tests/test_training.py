import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from capgan import autograd as ag
from capgan.autograd import Tensor
from capgan.data import make_batch
from capgan.model import build_models, copy_state
from capgan.training import (
    Adam,
    ModelDims,
    TrainConfig,
    TrainingData,
    TrainingError,
    TrainState,
    discriminator_loss,
    discriminator_loss_terms,
    generator_loss,
    gradient_penalty,
    interpolate,
    train_loop,
    train_step,
)
from conftest import fd_errors, tiny_batch, tiny_models
from test_model import force_token, zero_all

NO_DROPOUT = dict(p_embedding=0.0, p_hidden=0.0)


def rng0():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- interpolation

def test_interpolate_endpoints_and_midpoint():
    x = np.eye(4)[[1, 2]][None]          # (1, 2, 4)
    xt = np.eye(4)[[3, 0]][None]
    assert np.array_equal(interpolate(x, xt, rng0(), eps=1.0)[0].data, x)
    assert np.array_equal(interpolate(x, xt, rng0(), eps=0.0)[0].data, xt)
    mid = interpolate(np.eye(3)[[0]], np.eye(3)[[2]], rng0(), eps=0.5)[0].data
    np.testing.assert_array_equal(mid, [[0.5, 0.0, 0.5]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_interpolation_stays_on_simplex(seed):
    rng = np.random.default_rng(seed)
    x = rng.dirichlet(np.ones(7), size=(3, 5))
    xt = rng.dirichlet(np.ones(7) * 0.1, size=(3, 5))
    x_hat, eps = interpolate(x, xt, rng)
    assert eps.shape == (3,) and x_hat.requires_grad
    assert (x_hat.data >= 0).all()
    np.testing.assert_allclose(x_hat.data.sum(axis=-1), 1.0, atol=1e-6)


def test_one_epsilon_per_item():
    x, xt = np.zeros((2, 3, 4)), np.ones((2, 3, 4))
    x_hat, eps = interpolate(x, xt, rng0())
    for b in range(2):
        assert np.allclose(x_hat.data[b], 1.0 - eps[b])


# ---------------------------------------------------------------- penalty

def linear_critic(w):
    def critic(x_hat, image, mask):
        B = x_hat.shape[0]
        return ag.tsum(ag.reshape(x_hat, (B, -1)) * Tensor(w), axis=1)
    return critic


def test_penalty_zero_for_unit_norm_linear_critic():
    rng = np.random.default_rng(1)
    w = rng.normal(size=12)
    w /= np.linalg.norm(w)
    x_hat = Tensor(rng.dirichlet(np.ones(4), size=(5, 3)), requires_grad=True)
    assert gradient_penalty(linear_critic(w), None, x_hat, lambda_gp=9.0).item() <= 1e-8


@pytest.mark.parametrize("d", [1, 4, 12, 30])
def test_penalty_for_constant_gradient_critic(d):
    x_hat = Tensor(np.random.default_rng(d).random((3, d)), requires_grad=True)
    got = gradient_penalty(linear_critic(np.full(d, 2.0)), None, x_hat, lambda_gp=9.0).item()
    assert math.isclose(got, 9.0 * (2.0 * math.sqrt(d) - 1.0) ** 2, rel_tol=1e-12)


def test_penalty_zero_weight():
    x_hat = Tensor(np.ones((2, 3)), requires_grad=True)
    assert gradient_penalty(linear_critic(np.full(3, 5.0)), None, x_hat, lambda_gp=0.0).item() == 0.0


def test_penalty_requires_differentiable_input():
    with pytest.raises(ValueError):
        gradient_penalty(linear_critic(np.ones(3)), None, Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(3))
def test_penalty_matches_difference_oracle(seed):
    _, D = tiny_models(seed)
    b = tiny_batch(seed, ragged=True)
    x_hat, _ = interpolate(b.real_dists, np.random.default_rng(seed).dirichlet(np.ones(6), size=(2, 3)),
                           np.random.default_rng(seed))
    got = gradient_penalty(D, b.image, x_hat, 9.0, b.mask).item()
    want = oracle.penalty_by_differences(D, b.image, x_hat.data, b.mask, 9.0)
    assert math.isclose(got, want, rel_tol=1e-6)


def test_penalty_value_unchanged_without_recording():
    _, D = tiny_models(0)
    b = tiny_batch(0)
    x_hat = Tensor(b.real_dists * 0.5 + 0.5 / 6, requires_grad=True)
    a = gradient_penalty(D, b.image, x_hat, 9.0, b.mask).item()
    with ag.no_grad():
        c = gradient_penalty(D, b.image, x_hat, 9.0, b.mask).item()
    assert a == c


@pytest.mark.parametrize("seed", range(2))
def test_double_backprop_through_penalty(seed):
    _, D = tiny_models(seed)
    b = tiny_batch(seed, ragged=True)
    x_hat, _ = interpolate(b.real_dists, np.random.default_rng(seed).dirichlet(np.ones(6), size=(2, 3)),
                           np.random.default_rng(seed))
    assert fd_errors(lambda: gradient_penalty(D, b.image, x_hat, 9.0, b.mask), D.params()) <= 1e-3


# ---------------------------------------------------------------- losses

def test_zero_critic_losses():
    G, D = tiny_models(0)
    zero_all(D)
    b = tiny_batch(0)
    wgan = TrainConfig(lambda_gp=0.0)
    log = TrainConfig(objective="log_loss")
    assert discriminator_loss(wgan, D, G, b, rng0()).item() == 0.0
    assert math.isclose(discriminator_loss(log, D, G, b, rng0()).item(), 2 * math.log(2), rel_tol=1e-12)
    assert generator_loss(wgan, D, G, b, rng0()).item() == 0.0
    assert math.isclose(generator_loss(log, D, G, b, rng0()).item(), math.log(2), rel_tol=1e-12)
    assert round(discriminator_loss(log, D, G, b, rng0()).item(), 4) == 1.3863
    assert round(generator_loss(log, D, G, b, rng0()).item(), 4) == 0.6931


def _oracle_scores(G, D, b):
    fake = oracle.generator_probs(G, b.image, b.real_ids)
    return (oracle.critic_score(D, b.image, b.real_dists, b.mask),
            oracle.critic_score(D, b.image, fake, b.mask))


@pytest.mark.parametrize("seed", range(3))
def test_losses_match_transcription(seed):
    G, D = tiny_models(seed)
    b = tiny_batch(seed, ragged=True)
    real, fake = _oracle_scores(G, D, b)
    sig = lambda z: 1 / (1 + np.exp(-z))
    cases = [
        (TrainConfig(lambda_gp=0.0, **NO_DROPOUT), fake.mean() - real.mean(), -fake.mean()),
        (TrainConfig(objective="log_loss", **NO_DROPOUT),
         -np.log(sig(real)).mean() - np.log(sig(-fake)).mean(), -np.log(sig(fake)).mean()),
    ]
    for cfg, d_want, g_want in cases:
        assert math.isclose(discriminator_loss(cfg, D, G, b, rng0()).item(), d_want, rel_tol=1e-10)
        assert math.isclose(generator_loss(cfg, D, G, b, rng0()).item(), g_want, rel_tol=1e-10)


@pytest.mark.parametrize("seed", range(2))
def test_loss_gradients_every_coordinate(seed):
    G, D = tiny_models(seed)
    b = tiny_batch(seed, ragged=True)
    cfg = TrainConfig()
    g_fn = lambda: generator_loss(cfg, D, G, b, np.random.default_rng(seed))
    d_fn = lambda: discriminator_loss(cfg, D, G, b, np.random.default_rng(seed))
    assert fd_errors(g_fn, G.params()) <= 1e-3
    assert fd_errors(d_fn, D.params()) <= 1e-3


def test_penalty_term_is_added_to_the_critic_loss():
    G, D = tiny_models(1)
    b = tiny_batch(1)
    terms = discriminator_loss_terms(TrainConfig(), D, G, b, rng0())
    assert terms["penalty"].item() > 0
    assert terms["loss"].item() == terms["adversarial"].item() + terms["penalty"].item()
    log_terms = discriminator_loss_terms(TrainConfig(objective="log_loss"), D, G, b, rng0())
    assert log_terms["penalty"].item() == 0.0
    pen = discriminator_loss_terms(TrainConfig(objective="log_loss", log_loss_penalty=True), D, G, b, rng0())
    assert pen["penalty"].item() > 0


def test_mismatched_pairs_change_the_critic_loss():
    G, D = tiny_models(2)
    b = tiny_batch(2, B=3)
    plain = discriminator_loss(TrainConfig(lambda_gp=0.0), D, G, b, rng0()).item()
    mixed = discriminator_loss(TrainConfig(lambda_gp=0.0, mismatched_pairs=True), D, G, b, rng0()).item()
    assert plain != mixed


# ---------------------------------------------------------------- optimisation

def _state(seed=0, **cfg_kw):
    G, D = tiny_models(seed)
    cfg = TrainConfig(batch_size=2, **cfg_kw)
    return cfg, TrainState.create(cfg, G, D, np.random.default_rng(seed))


def test_zero_learning_rate_leaves_parameters_untouched():
    cfg, state = _state(lr=0.0)
    before = [copy_state(state.G), copy_state(state.D)]
    train_step(cfg, state, tiny_batch(0))
    for snap, model in zip(before, (state.G, state.D)):
        for k, t in model.state().items():
            assert t.data.tobytes() == snap[k].tobytes()


def test_train_step_is_deterministic():
    results = []
    for _ in range(2):
        cfg, state = _state(3)
        results.append([train_step(cfg, state, tiny_batch(0)) for _ in range(3)])
    assert results[0] == results[1]


def test_updates_stay_on_their_own_side():
    cfg, state = _state(4, critic_ratio=1)
    b = tiny_batch(4)
    g_before = copy_state(state.G)
    loss = discriminator_loss(cfg, state.D, state.G, b, state.rng)
    names = list(state.opt_d.params)
    grads = ag.grad(loss, [state.opt_d.params[k] for k in names])
    state.opt_d.step({k: g.data for k, g in zip(names, grads)})
    assert all(np.array_equal(t.data, g_before[k]) for k, t in state.G.state().items())

    d_before = copy_state(state.D)
    loss = generator_loss(cfg, state.D, state.G, b, state.rng)
    names = list(state.opt_g.params)
    grads = ag.grad(loss, [state.opt_g.params[k] for k in names])
    state.opt_g.step({k: g.data for k, g in zip(names, grads)})
    for k, t in state.D.params().items():
        assert np.array_equal(t.data, d_before[k]), k


def test_critic_learns_a_separable_toy():
    """Real captions are token 4, the generator always says token 5."""
    G, D = tiny_models(7)
    force_token(G, 5)
    cfg = TrainConfig(lr=1e-3, **NO_DROPOUT)
    b = make_batch([[4, 4, 2]] * 4, np.random.default_rng(7).normal(size=(4, 8)), 6)
    opt = Adam(D.params(), cfg.lr, cfg.beta1, cfg.beta2)
    rng, losses = np.random.default_rng(7), []
    for _ in range(50):
        loss = discriminator_loss(cfg, D, G, b, rng)
        losses.append(loss.item())
        names = list(opt.params)
        grads = ag.grad(loss, [opt.params[k] for k in names])
        opt.step({k: g.data for k, g in zip(names, grads)})
    assert np.mean(losses[-5:]) < np.mean(losses[:5]) - 0.1


def test_non_finite_values_abort():
    cfg, state = _state(5)
    state.D.W_ans.data[0, 0] = np.nan
    with pytest.raises(TrainingError):
        train_step(cfg, state, tiny_batch(0))


@pytest.mark.parametrize("bad", [dict(lambda_gp=-1), dict(batch_size=0), dict(objective="hinge"),
                                 dict(critic_ratio=0), dict(p_hidden=1.0), dict(lr=-1e-3)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- loop

def _loop(synth_small, metrics, patience=5, max_epochs=20, run_dir=None):
    tr, va, feats, vocab = synth_small
    data = TrainingData(tr, va, feats, vocab)
    G, D = build_models(np.random.default_rng(0), len(vocab), 8, 8, feats.d_img)
    snaps, seq = [], iter(metrics)

    def scripted(g):
        snaps.append(copy_state(g))
        return next(seq)

    cfg = TrainConfig(batch_size=20, critic_ratio=1, lr=1e-3, patience=patience, max_epochs=max_epochs)
    result = train_loop(cfg, data, G, D, run_dir=run_dir, evaluate_fn=scripted)
    return result, G, snaps


def test_flat_metric_stops_after_patience(synth_small):
    result, G, snaps = _loop(synth_small, [0.1] * 6)
    assert len(result.history) == 6 and result.best_epoch == 1 and result.stopped_early
    for k, t in G.state().items():
        assert np.array_equal(t.data, snaps[0][k])


def test_rising_metric_runs_to_budget(synth_small):
    result, G, snaps = _loop(synth_small, [0.01 * i for i in range(1, 8)], max_epochs=7)
    assert len(result.history) == 7 and result.best_epoch == 7 and not result.stopped_early
    for k, t in G.state().items():
        assert np.array_equal(t.data, snaps[-1][k])


def test_history_and_best_checkpoint_written(synth_small, tmp_path):
    _loop(synth_small, [0.2, 0.3, 0.1], patience=1, run_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "history.jsonl").read_text().splitlines()]
    assert lines[0]["type"] == "header" and lines[0]["config"]["patience"] == 1
    epochs = lines[1:]
    assert [e["epoch"] for e in epochs] == [1, 2, 3]
    for key in ("d_loss", "g_loss", "penalty", "val_bleu4", "wallclock_s"):
        assert all(key in e for e in epochs)
    manifest = json.loads((tmp_path / "best" / "manifest.json").read_text())
    assert manifest["meta"]["epoch"] == 2 and manifest["meta"]["val_bleu4"] == 0.3


def test_model_dims_defaults():
    dims = ModelDims()
    assert (dims.d_emb, dims.d_h, dims.d_img) == (300, 256, 2048)
    cfg = TrainConfig()
    assert (cfg.lambda_gp, cfg.p_hidden, cfg.batch_size, cfg.patience) == (9.0, 0.5, 512, 5)
