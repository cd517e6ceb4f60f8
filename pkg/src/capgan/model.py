"""Generator and discriminator branches of the adversarial captioner.

Both branches run the same recurrence per step ``t``::

    h_t  = gru1(x_t, s_{t-1})      s = h'_{t-1} for G, h_{t-1} for D
    v_t  = h_t * (I @ W_I)
    h'_t = gru2(h_t, v_t)          (v_t fills the state slot)

The generator reads ``softmax(h'_t @ W_proj)``; the discriminator reads
``h'_t @ W_ans`` and averages it over unmasked steps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import BOS, EOS, PAD, Vocabulary
from .nn import (
    AttentionParams,
    DropoutSpec,
    EmbeddingTable,
    GruCellParams,
    GruRunner,
    attention_fuse,
    check_distribution,
    dropout_apply,
    embed_distribution,
    embed_tokens,
    glorot,
    linear,
    project_image,
)

CHECKPOINT_FORMAT = "capgan-checkpoint"
CHECKPOINT_VERSION = 1


def _prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


@dataclass
class GeneratorParams:
    embedding: EmbeddingTable
    gru1: GruCellParams
    gru2: GruCellParams
    att: AttentionParams
    W_proj: Tensor

    def __post_init__(self):
        d_h = self.gru1.d_h
        if self.gru1.d_in != self.embedding.d_emb:
            raise ValueError("GeneratorParams: gru1 input width must equal d_emb")
        if (self.gru2.d_in, self.gru2.d_h) != (d_h, d_h) or self.att.W_I.shape[1] != d_h:
            raise ValueError("GeneratorParams: gru2/attention widths must equal d_h")
        if self.W_proj.shape != (d_h, self.embedding.vocab_size):
            raise ValueError(f"GeneratorParams: W_proj shape {self.W_proj.shape} != {(d_h, self.embedding.vocab_size)}")

    @property
    def d_h(self) -> int:
        return self.gru1.d_h

    @property
    def d_img(self) -> int:
        return self.att.W_I.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.embedding.vocab_size

    def params(self) -> dict[str, Tensor]:
        """Trainable tensors (the shared embedding, when trainable, lives here)."""
        out = _prefixed("embedding", self.embedding.params())
        out.update(_prefixed("gru1", self.gru1.params()))
        out.update(_prefixed("gru2", self.gru2.params()))
        out.update(_prefixed("att", self.att.params()))
        out["W_proj"] = self.W_proj
        return out

    def state(self) -> dict[str, Tensor]:
        out = self.params()
        out["embedding.E"] = self.embedding.matrix
        return out


@dataclass
class DiscriminatorParams:
    embedding: EmbeddingTable
    gru1: GruCellParams
    gru2: GruCellParams
    att: AttentionParams
    W_ans: Tensor
    owns_embedding: bool = False

    def __post_init__(self):
        d_h = self.gru1.d_h
        if self.gru1.d_in != self.embedding.d_emb:
            raise ValueError("DiscriminatorParams: gru1 input width must equal d_emb")
        if (self.gru2.d_in, self.gru2.d_h) != (d_h, d_h) or self.att.W_I.shape[1] != d_h:
            raise ValueError("DiscriminatorParams: gru2/attention widths must equal d_h")
        if self.W_ans.shape != (d_h, 1):
            raise ValueError(f"DiscriminatorParams: W_ans shape {self.W_ans.shape} != {(d_h, 1)}")

    @property
    def d_h(self) -> int:
        return self.gru1.d_h

    def params(self) -> dict[str, Tensor]:
        out = _prefixed("embedding", self.embedding.params()) if self.owns_embedding else {}
        out.update(_prefixed("gru1", self.gru1.params()))
        out.update(_prefixed("gru2", self.gru2.params()))
        out.update(_prefixed("att", self.att.params()))
        out["W_ans"] = self.W_ans
        return out

    def state(self) -> dict[str, Tensor]:
        out = self.params()
        if self.owns_embedding:
            out["embedding.E"] = self.embedding.matrix
        return out


@dataclass
class StepState:
    h: Tensor
    v: Tensor
    h_prime: Tensor
    p: Tensor | None = None


@dataclass
class DecodeConfig:
    max_len: int = 20
    strategy: str = "greedy"
    dropout_active: bool = False

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("DecodeConfig: max_len must be >= 1")
        if self.strategy != "greedy":
            raise ValueError(f"DecodeConfig: unsupported strategy {self.strategy!r}")


def build_models(
    rng: np.random.Generator,
    vocab_size: int,
    d_emb: int = 300,
    d_h: int = 256,
    d_img: int = 2048,
    embedding: EmbeddingTable | None = None,
    share_embedding: bool = True,
    freeze_embedding: bool = False,
) -> tuple[GeneratorParams, DiscriminatorParams]:
    """Freshly initialized generator and discriminator."""
    if embedding is None:
        embedding = EmbeddingTable.random(rng, vocab_size, d_emb, frozen=freeze_embedding)
    G = GeneratorParams(
        embedding=embedding,
        gru1=GruCellParams.init(rng, d_emb, d_h),
        gru2=GruCellParams.init(rng, d_h, d_h),
        att=AttentionParams.init(rng, d_img, d_h),
        W_proj=Tensor(glorot(rng, d_h, vocab_size), requires_grad=True),
    )
    if share_embedding:
        d_embedding, owns = embedding, False
    else:
        d_embedding = EmbeddingTable(Tensor(embedding.matrix.data.copy()), frozen=embedding.frozen)
        owns = True
    D = DiscriminatorParams(
        embedding=d_embedding,
        gru1=GruCellParams.init(rng, d_emb, d_h),
        gru2=GruCellParams.init(rng, d_h, d_h),
        att=AttentionParams.init(rng, d_img, d_h),
        W_ans=Tensor(glorot(rng, d_h, 1), requires_grad=True),
        owns_embedding=owns,
    )
    return G, D


def _check_ids(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ValueError(f"expected (batch, T>=1) token ids, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError(f"token id out of range [0, {vocab_size})")
    return ids


def _head(W: Tensor, h_primes: list[Tensor]) -> Tensor:
    """Apply an output matrix to every step's ``h'`` in one product: ``(B, T, k)``."""
    stacked = ag.stack(h_primes, axis=1)
    B, T, d = stacked.shape
    return ag.reshape(ag.matmul(ag.reshape(stacked, (B * T, d)), W), (B, T, W.shape[1]))


def generator_step(G: GeneratorParams, gru1: GruRunner, gru2: GruRunner, x_proj: Tensor,
                   h_prev: Tensor, projected: Tensor, dropout: DropoutSpec, rng) -> StepState:
    """One generator step up to h_prime (no output projection)."""
    h = gru1.step(x_proj, h_prev)
    h = dropout_apply(dropout, "hidden", h, rng)
    v = attention_fuse(G.att, h, None, projected=projected)
    h_prime = gru2.step(gru2.project(h), v)
    return StepState(h, v, h_prime)


def generator_rollout_teacher_forced(
    G: GeneratorParams,
    image,
    gt_ids,
    dropout: DropoutSpec,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-step vocabulary distributions, shape ``(B, T, |V|)``.

    Step ``t`` reads ground-truth token ``t - 1`` (``<bos>`` at ``t = 0``).
    """
    ids = _check_ids(gt_ids, G.vocab_size)
    image = ag.as_tensor(image)
    B, T = ids.shape
    inputs = np.concatenate([np.full((B, 1), BOS), ids[:, :-1]], axis=1)
    gru1, gru2 = GruRunner(G.gru1), GruRunner(G.gru2)
    projected = project_image(G.att, image)
    h_prime = Tensor(np.zeros((B, G.d_h)))
    outs = []
    for t in range(T):
        x = dropout_apply(dropout, "embedding", embed_tokens(G.embedding, inputs[:, t]), rng)
        h_prime = generator_step(G, gru1, gru2, gru1.project(x), h_prime, projected,
                                 dropout, rng).h_prime
        outs.append(h_prime)
    return ag.softmax(_head(G.W_proj, outs))


def greedy_decode(G: GeneratorParams, image, cfg: DecodeConfig | None = None,
                  rng: np.random.Generator | None = None) -> list[list[int]]:
    """Argmax decoding for each image row; outputs stop before ``<eos>``.

    ``<pad>``/``<bos>`` are never part of the returned ids.
    """
    cfg = cfg or DecodeConfig()
    image = np.atleast_2d(np.asarray(ag.as_tensor(image).data))
    B = image.shape[0]
    dropout = DropoutSpec(0.0, 0.0, active=False)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with ag.no_grad():
        projected = project_image(G.att, Tensor(image))
        gru1, gru2 = GruRunner(G.gru1), GruRunner(G.gru2)
        h_prime = Tensor(np.zeros((B, G.d_h)))
        token = np.full(B, BOS)
        for _ in range(cfg.max_len):
            x = embed_tokens(G.embedding, token)
            step = generator_step(G, gru1, gru2, gru1.project(x), h_prime, projected, dropout, rng)
            h_prime = step.h_prime
            token = linear(G.W_proj, h_prime).data.argmax(axis=1)
            for b in np.flatnonzero(~done):
                if token[b] == EOS:
                    done[b] = True
                elif token[b] not in (PAD, BOS):
                    out[b].append(int(token[b]))
            if done.all():
                break
    return out


def discriminator_steps(D: DiscriminatorParams, image, dists=None, ids=None) -> Tensor:
    """Per-step critic outputs, shape ``(B, T)``.

    Step inputs are ``dists[:, t] @ E`` or, for token ids, rows of ``E``.
    """
    if ids is not None:
        ids = _check_ids(ids, D.embedding.vocab_size)
        B, T = ids.shape
        step_input = lambda t: embed_tokens(D.embedding, ids[:, t])
    else:
        dists = ag.as_tensor(dists)
        if dists.ndim != 3:
            raise ValueError(f"discriminator_score: expected (B, T, |V|) distributions, got {dists.shape}")
        B, T = dists.shape[0], dists.shape[1]
        step_input = lambda t: embed_distribution(D.embedding, dists[:, t, :], validate=False)
    projected = project_image(D.att, ag.as_tensor(image))
    gru1, gru2 = GruRunner(D.gru1), GruRunner(D.gru2)
    h = Tensor(np.zeros((B, D.d_h)))
    outs = []
    for t in range(T):
        h = gru1.step(gru1.project(step_input(t)), h)
        v = attention_fuse(D.att, h, None, projected=projected)
        outs.append(gru2.step(gru2.project(h), v))
    return ag.reshape(_head(D.W_ans, outs), (B, T))


def discriminator_score(
    D: DiscriminatorParams,
    image,
    dists=None,
    mask: np.ndarray | None = None,
    ids=None,
    validate: bool = True,
) -> Tensor:
    """Unbounded critic score per batch item: mean of per-step outputs.

    Give either ``dists`` (rows on the simplex) or token ``ids``; both go
    through the same embedding table.  Steps where ``mask`` is 0 are
    excluded from the mean.
    """
    if (dists is None) == (ids is None):
        raise ValueError("discriminator_score: pass exactly one of dists or ids")
    if dists is not None and validate:
        check_distribution(ag.as_tensor(dists).data, tol=1e-5, op="discriminator_score")
    per_step = discriminator_steps(D, image, dists=dists, ids=ids)
    if mask is None:
        return ag.mean(per_step, axis=1)
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("discriminator_score: a batch item has no unmasked steps")
    return ag.tsum(per_step * Tensor(mask / counts[:, None]), axis=1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, G: GeneratorParams, D: DiscriminatorParams,
                    vocab: Vocabulary, meta: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``params.bin`` (little-endian float64) into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    named = _prefixed("G", G.state())
    named.update(_prefixed("D", D.state()))
    for name, t in named.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {"d_emb": G.embedding.d_emb, "d_h": G.d_h, "d_img": G.d_img,
                 "vocab_size": G.vocab_size},
        "embedding": {"shared": not D.owns_embedding, "frozen": G.embedding.frozen},
        "vocab": vocab.to_json(),
        "meta": meta or {},
        "params": entries,
    }
    (out / "params.bin").write_bytes(b"".join(blobs))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return out


def load_checkpoint(path: str | Path) -> tuple[GeneratorParams, DiscriminatorParams, Vocabulary, dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{root}: not a {CHECKPOINT_FORMAT} directory")
    blob = (root / "params.bin").read_bytes()
    arrays = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                          offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
    dims = manifest["dims"]
    emb = manifest["embedding"]
    G, D = build_models(np.random.default_rng(0), dims["vocab_size"], dims["d_emb"], dims["d_h"],
                        dims["d_img"], share_embedding=emb["shared"],
                        freeze_embedding=emb["frozen"])
    for prefix, model in (("G", G), ("D", D)):
        for name, t in model.state().items():
            t.data = arrays[f"{prefix}.{name}"].copy()
    return G, D, Vocabulary.from_json(manifest["vocab"]), manifest.get("meta", {})


def copy_state(model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.state().items()}


def restore_state(model, snapshot: dict[str, np.ndarray]) -> None:
    for k, t in model.state().items():
        t.data = snapshot[k].copy()
