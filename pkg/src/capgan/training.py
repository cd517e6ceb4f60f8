"""Adversarial objectives and the alternating training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Batch, CaptionRecord, FeatureTable, Vocabulary, batch_iter
from .model import (
    DecodeConfig,
    DiscriminatorParams,
    GeneratorParams,
    build_models,
    copy_state,
    discriminator_score,
    discriminator_steps,
    generator_rollout_teacher_forced,
    restore_state,
    save_checkpoint,
)
from .nn import DropoutSpec

log = logging.getLogger(__name__)

OBJECTIVES = ("wgan_gp", "log_loss")


class TrainingError(RuntimeError):
    """Non-finite loss or parameter; carries where it happened."""

    def __init__(self, message: str, step: int = -1, epoch: int = -1):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


@dataclass
class TrainConfig:
    lambda_gp: float = 9.0
    p_embedding: float = 0.0
    p_hidden: float = 0.5
    batch_size: int = 512
    critic_ratio: int = 5
    objective: str = "wgan_gp"
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    log_loss_penalty: bool = False
    mismatched_pairs: bool = False
    max_len: int = 20

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("batch_size", "critic_ratio", "patience", "max_epochs", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.lr < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("optimizer constants out of range")
        DropoutSpec(self.p_embedding, self.p_hidden)

    @property
    def dropout(self) -> DropoutSpec:
        return DropoutSpec(self.p_embedding, self.p_hidden, active=True)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ModelDims:
    d_emb: int = 300
    d_h: int = 256
    d_img: int = 2048
    share_embedding: bool = True
    freeze_embedding: bool = False


@dataclass
class TrainingData:
    train: list[CaptionRecord]
    val: list[CaptionRecord]
    features: FeatureTable
    vocab: Vocabulary

    def __post_init__(self):
        if not self.train:
            raise ValueError("TrainingData: empty training set")


class Adam:
    """Adam over a name -> Tensor mapping; updates ``Tensor.data`` in place."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.5,
                 beta2: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        if self.lr == 0.0:
            return
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# objective pieces


def interpolate(x, x_tilde, rng: np.random.Generator, eps=None) -> tuple[Tensor, np.ndarray]:
    """``eps * x + (1 - eps) * x_tilde`` with one ``eps ~ U[0, 1]`` per batch item.

    The result is a fresh leaf so the critic can be differentiated with
    respect to it.
    """
    x = np.asarray(ag.as_tensor(x).data)
    x_tilde = np.asarray(ag.as_tensor(x_tilde).data)
    if x.shape != x_tilde.shape:
        raise ValueError(f"interpolate: shape mismatch {x.shape} vs {x_tilde.shape}")
    if eps is None:
        eps = rng.random(x.shape[0])
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (x.shape[0],))
    e = eps.reshape((-1,) + (1,) * (x.ndim - 1))
    return Tensor(e * x + (1.0 - e) * x_tilde, requires_grad=True), np.array(eps)


def _penalty(score_fn: Callable[[Tensor], Tensor], x_hat: Tensor, lambda_gp: float) -> Tensor:
    # the inner pass is always recorded; it is differentiated again only
    # when the caller is recording too
    outer = ag.is_grad_enabled()
    with ag.enable_grad():
        scores = score_fn(x_hat)
        (g,) = ag.grad(ag.tsum(scores), [x_hat], create_graph=outer)
    B = x_hat.shape[0]
    norms = ag.l2_norm(ag.reshape(g, (B, -1)), axis=1, eps=1e-12)
    gap = norms - 1.0
    return ag.scale(ag.mean(gap * gap), lambda_gp)


def gradient_penalty(D, image, x_hat: Tensor, lambda_gp: float = 9.0, mask=None) -> Tensor:
    """``lambda * mean_b (||grad_{x_hat} D(x_hat)||_2 - 1)^2``.

    ``D`` is a :class:`DiscriminatorParams` or any callable
    ``(x_hat, image, mask) -> scores`` of shape ``(B,)``.  The returned
    scalar stays differentiable with respect to the critic's parameters.
    """
    if not isinstance(x_hat, Tensor) or not x_hat.requires_grad:
        raise ValueError("gradient_penalty: x_hat must be a Tensor with requires_grad=True")
    if isinstance(D, DiscriminatorParams):
        score_fn = lambda z: discriminator_score(D, image, z, mask, validate=False)
    else:
        score_fn = lambda z: D(z, image, mask)
    return _penalty(score_fn, x_hat, lambda_gp)


def _masked_mean_weights(mask: np.ndarray) -> Tensor:
    counts = mask.sum(axis=1)
    return Tensor(mask / counts[:, None])


def _sequence_scores(D: DiscriminatorParams, image: np.ndarray, dists: Tensor, mask: np.ndarray) -> Tensor:
    per_step = discriminator_steps(D, image, dists=dists)
    return ag.tsum(per_step * _masked_mean_weights(mask), axis=1)


def sample_fake(G: GeneratorParams, batch: Batch, dropout: DropoutSpec, rng, record: bool) -> Tensor:
    if record:
        return generator_rollout_teacher_forced(G, batch.image, batch.real_ids, dropout, rng)
    with ag.no_grad():
        return generator_rollout_teacher_forced(G, batch.image, batch.real_ids, dropout, rng)


def discriminator_loss_terms(cfg: TrainConfig, D: DiscriminatorParams, G: GeneratorParams,
                             batch: Batch, rng: np.random.Generator) -> dict[str, Tensor]:
    """Critic loss and its parts.  The generator sample is detached."""
    B = batch.size
    fake = sample_fake(G, batch, cfg.dropout, rng, record=False)
    real = Tensor(batch.real_dists)
    images = [batch.image, batch.image]
    masks = [batch.mask, batch.mask]
    pieces = [real, fake]
    if cfg.mismatched_pairs:
        # real caption paired with another item's image counts as fake
        pieces.append(real)
        images.append(batch.image[np.roll(np.arange(B), 1)])
        masks.append(batch.mask)
    # real, fake (and mismatched) groups share one critic pass
    scores = _sequence_scores(D, np.concatenate(images), ag.concat(pieces, axis=0),
                              np.concatenate(masks))
    s_real = scores[0:B]
    s_fake = scores[B:2 * B]
    s_neg = ag.concat([s_fake, scores[2 * B:3 * B]], axis=0) if cfg.mismatched_pairs else s_fake
    if cfg.objective == "wgan_gp":
        adv = ag.mean(s_neg) - ag.mean(s_real)
    else:
        adv = -ag.mean(ag.log_sigmoid(s_real)) - ag.mean(ag.log_sigmoid(-s_neg))
    if cfg.objective == "wgan_gp" or cfg.log_loss_penalty:
        # separate pass keeps the double-backward graph to B rows
        x_hat, _ = interpolate(batch.real_dists, fake.data, rng)
        penalty = _penalty(lambda z: _sequence_scores(D, batch.image, z, batch.mask), x_hat,
                           cfg.lambda_gp)
    else:
        penalty = Tensor(0.0)
    return {"loss": adv + penalty, "adversarial": adv, "penalty": penalty,
            "real": ag.mean(s_real), "fake": ag.mean(s_fake)}


def discriminator_loss(cfg: TrainConfig, D, G, batch: Batch, rng) -> Tensor:
    return discriminator_loss_terms(cfg, D, G, batch, rng)["loss"]


def generator_loss(cfg: TrainConfig, D: DiscriminatorParams, G: GeneratorParams,
                   batch: Batch, rng: np.random.Generator) -> Tensor:
    """``-mean D(fake)`` (WGAN) or ``-mean log sigmoid(D(fake))`` (log loss)."""
    fake = sample_fake(G, batch, cfg.dropout, rng, record=True)
    s_fake = _sequence_scores(D, batch.image, fake, batch.mask)
    if cfg.objective == "wgan_gp":
        return -ag.mean(s_fake)
    return -ag.mean(ag.log_sigmoid(s_fake))


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainState:
    G: GeneratorParams
    D: DiscriminatorParams
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig, G: GeneratorParams, D: DiscriminatorParams,
               rng: np.random.Generator | None = None) -> "TrainState":
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        opt_g = Adam(G.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        opt_d = Adam(D.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        return cls(G, D, opt_g, opt_d, rng)


def _update(opt: Adam, loss: Tensor, what: str, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"{what} loss is not finite at step {step}", step=step)
    names = list(opt.params)
    grads = ag.grad(loss, [opt.params[k] for k in names])
    opt.step({k: g.data for k, g in zip(names, grads)})
    for k in names:
        if not np.isfinite(opt.params[k].data).all():
            raise TrainingError(f"{what} parameter {k} became non-finite at step {step}", step=step)


def train_step(cfg: TrainConfig, state: TrainState, batch: Batch) -> dict[str, float]:
    """``critic_ratio`` critic updates, then one generator update, on ``batch``."""
    for _ in range(cfg.critic_ratio):
        terms = discriminator_loss_terms(cfg, state.D, state.G, batch, state.rng)
        _update(state.opt_d, terms["loss"], "discriminator", state.step)
    g_loss = generator_loss(cfg, state.D, state.G, batch, state.rng)
    _update(state.opt_g, g_loss, "generator", state.step)
    state.step += 1
    return {
        "d_loss": terms["loss"].item(),
        "g_loss": g_loss.item(),
        "penalty": terms["penalty"].item(),
    }


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_bleu: float
    best_G: dict = field(repr=False, default_factory=dict)
    best_D: dict = field(repr=False, default_factory=dict)
    stopped_early: bool = False


def train_loop(
    cfg: TrainConfig,
    data: TrainingData,
    G: GeneratorParams,
    D: DiscriminatorParams,
    run_dir: str | Path | None = None,
    evaluate_fn: Callable[[GeneratorParams], float] | None = None,
    state: TrainState | None = None,
) -> TrainResult:
    """Train until validation BLEU-4 stalls for ``patience`` epochs.

    One epoch is one :func:`train_step` per training batch.  On return the
    models hold the parameters of the best epoch.
    """
    from .evaluation import evaluate

    if evaluate_fn is None:
        if not data.val:
            raise ValueError("train_loop: validation set is empty")
        decode = DecodeConfig(max_len=cfg.max_len)
        evaluate_fn = lambda g: evaluate(g, data.val, data.features, data.vocab, decode).bleu4
    rng = np.random.default_rng(cfg.seed)
    batch_rng, step_rng = rng.spawn(2)
    state = state or TrainState.create(cfg, G, D, step_rng)
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_file = open(out / "history.jsonl", "w", encoding="utf-8")
        hist_file.write(json.dumps({"type": "header", "config": cfg.to_json()}) + "\n")
    history: list[dict] = []
    best_bleu, best_epoch, since_best = -np.inf, 0, 0
    best_G, best_D = copy_state(G), copy_state(D)
    stopped = False
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            sums = {"d_loss": 0.0, "g_loss": 0.0, "penalty": 0.0}
            n = 0
            for batch in batch_iter(data.train, data.features, cfg.batch_size, batch_rng, len(data.vocab)):
                try:
                    scalars = train_step(cfg, state, batch)
                except TrainingError as exc:
                    exc.epoch = epoch
                    raise
                for k in sums:
                    sums[k] += scalars[k]
                n += 1
            bleu = float(evaluate_fn(G))
            rec = {"epoch": epoch, **{k: v / max(n, 1) for k, v in sums.items()},
                   "val_bleu4": bleu, "wallclock_s": time.perf_counter() - t0}
            history.append(rec)
            if out is not None:
                hist_file.write(json.dumps({"type": "epoch", **rec}) + "\n")
                hist_file.flush()
            log.info("epoch %d d_loss %.4f g_loss %.4f gp %.4f bleu4 %.4f", epoch,
                     rec["d_loss"], rec["g_loss"], rec["penalty"], bleu)
            if bleu > best_bleu:
                best_bleu, best_epoch, since_best = bleu, epoch, 0
                best_G, best_D = copy_state(G), copy_state(D)
                if out is not None:
                    save_checkpoint(out / "best", G, D, data.vocab,
                                    {"epoch": epoch, "val_bleu4": bleu, "config": cfg.to_json()})
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    stopped = True
                    break
    finally:
        if out is not None:
            hist_file.close()
    restore_state(G, best_G)
    restore_state(D, best_D)
    return TrainResult(history, best_epoch, float(best_bleu), best_G, best_D, stopped)


def build_and_train(cfg: TrainConfig, data: TrainingData, dims: ModelDims,
                    run_dir: str | Path | None = None) -> TrainResult:
    """Seeded model construction followed by :func:`train_loop`."""
    G, D = build_models(np.random.default_rng(cfg.seed), len(data.vocab), dims.d_emb, dims.d_h,
                        dims.d_img, share_embedding=dims.share_embedding,
                        freeze_embedding=dims.freeze_embedding)
    result = train_loop(cfg, data, G, D, run_dir=run_dir)
    result.models = (G, D)
    return result
