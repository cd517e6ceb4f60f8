"""Layers shared by the generator and the discriminator.

Parameters live in small dataclasses of :class:`~capgan.autograd.Tensor`;
layers are plain functions of ``(params, inputs, rng)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SITES = ("embedding", "hidden")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


@dataclass
class EmbeddingTable:
    """Token embedding matrix of shape ``(vocab_size, d_emb)``."""

    matrix: Tensor
    frozen: bool = True

    def __post_init__(self):
        self.matrix.requires_grad = not self.frozen
        if not np.isfinite(self.matrix.data).all():
            raise ValueError("EmbeddingTable: non-finite rows")

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def d_emb(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def random(cls, rng, vocab_size: int, d_emb: int, frozen: bool = False, scale: float = 0.1):
        return cls(Tensor(rng.normal(0.0, scale, size=(vocab_size, d_emb))), frozen=frozen)

    def params(self) -> dict[str, Tensor]:
        return {} if self.frozen else {"E": self.matrix}


@dataclass
class GruCellParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_h: int) -> "GruCellParams":
        return cls(
            W_z=_param(glorot(rng, d_in, d_h)),
            W_r=_param(glorot(rng, d_in, d_h)),
            W_h=_param(glorot(rng, d_in, d_h)),
            U_z=_param(glorot(rng, d_h, d_h)),
            U_r=_param(glorot(rng, d_h, d_h)),
            U_h=_param(glorot(rng, d_h, d_h)),
            b_z=_param(np.zeros(d_h)),
            b_r=_param(np.zeros(d_h)),
            b_h=_param(np.zeros(d_h)),
        )

    @classmethod
    def zeros(cls, d_in: int, d_h: int) -> "GruCellParams":
        return cls(*(_param(np.zeros((d_in, d_h))) for _ in range(3)),
                   *(_param(np.zeros((d_h, d_h))) for _ in range(3)),
                   *(_param(np.zeros(d_h)) for _ in range(3)))

    @property
    def d_in(self) -> int:
        return self.W_z.shape[0]

    @property
    def d_h(self) -> int:
        return self.W_z.shape[1]

    def params(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class AttentionParams:
    W_I: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_img: int, d_h: int) -> "AttentionParams":
        return cls(_param(glorot(rng, d_img, d_h)))

    def params(self) -> dict[str, Tensor]:
        return {"W_I": self.W_I}


@dataclass
class DropoutSpec:
    """Dropout rates for the two noise sites; ``active`` is off at evaluation."""

    p_embedding: float = 0.0
    p_hidden: float = 0.5
    active: bool = True

    def __post_init__(self):
        for name in ("p_embedding", "p_hidden"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"DropoutSpec: {name}={rate} outside [0, 1)")

    def rate(self, site: str) -> float:
        if site not in SITES:
            raise ValueError(f"unknown dropout site {site!r}; expected one of {SITES}")
        return self.p_embedding if site == "embedding" else self.p_hidden

    def inactive(self) -> "DropoutSpec":
        return DropoutSpec(self.p_embedding, self.p_hidden, active=False)


def linear(W: Tensor, x: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W (+ bias)`` with ``x`` of shape ``(batch, d_in)``."""
    out = ag.matmul(x, W)
    if bias is not None:
        out = ag.add(out, bias)
    return out


class GruRunner:
    """A GRU cell with its gate weights fused for repeated stepping.

    The concatenated weights are recorded once per sequence, so gradients
    still reach the individual parameter tensors.
    """

    def __init__(self, params: GruCellParams):
        self.params = params
        self.d_h = params.d_h
        self.W = ag.concat([params.W_z, params.W_r, params.W_h], axis=1)
        self.b = ag.concat([params.b_z, params.b_r, params.b_h], axis=0)
        self.U_zr = ag.concat([params.U_z, params.U_r], axis=1)

    def project(self, x: Tensor) -> Tensor:
        """Input projections ``x @ [W_z W_r W_h] + b`` for any number of rows."""
        if x.ndim != 2 or x.shape[1] != self.params.d_in:
            raise ValueError(f"gru_step: input shape {x.shape} does not match d_in={self.params.d_in}")
        return ag.matmul(x, self.W) + self.b

    def step(self, x_proj: Tensor, h: Tensor) -> Tensor:
        d = self.d_h
        if h.ndim != 2 or h.shape != (x_proj.shape[0], d):
            raise ValueError(f"gru_step: state shape {h.shape} does not match {(x_proj.shape[0], d)}")
        gates = ag.sigmoid(x_proj[:, : 2 * d] + ag.matmul(h, self.U_zr))
        z, r = gates[:, :d], gates[:, d:]
        c = ag.tanh(x_proj[:, 2 * d:] + ag.matmul(r * h, self.params.U_h))
        return h + z * (c - h)


def gru_step(params: GruCellParams, x: Tensor, h: Tensor) -> Tensor:
    """One step of a standard GRU.

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    c = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * c
    """
    runner = GruRunner(params)
    return runner.step(runner.project(ag.as_tensor(x)), ag.as_tensor(h))


def embed_tokens(E: EmbeddingTable, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Rows of ``E`` selected by ``ids`` (any integer array shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= E.vocab_size):
        raise ValueError(f"embed_tokens: token id out of range [0, {E.vocab_size})")
    return ag.index(E.matrix, ids)


def check_distribution(p: np.ndarray, tol: float = 1e-5, op: str = "embed_distribution") -> None:
    if p.size == 0:
        return
    if p.min() < -tol or np.abs(p.sum(axis=-1) - 1.0).max() > tol:
        raise ValueError(f"{op}: rows must be non-negative and sum to 1 (tolerance {tol})")


def embed_distribution(E: EmbeddingTable, p: Tensor, validate: bool = True) -> Tensor:
    """Expected embedding ``p @ E`` of each distribution row in ``p``.

    One-hot rows reproduce :func:`embed_tokens` exactly, so real and
    generated captions share one input path.
    """
    p = ag.as_tensor(p)
    if p.shape[-1] != E.vocab_size:
        raise ValueError(f"embed_distribution: last axis {p.shape[-1]} != vocab size {E.vocab_size}")
    if validate:
        check_distribution(p.data)
    lead = p.shape[:-1]
    flat = ag.reshape(p, (int(np.prod(lead)) if lead else 1, E.vocab_size))
    return ag.reshape(ag.matmul(flat, E.matrix), lead + (E.d_emb,))


def project_image(att: AttentionParams, image: Tensor) -> Tensor:
    image = ag.as_tensor(image)
    if image.ndim != 2 or image.shape[1] != att.W_I.shape[0]:
        raise ValueError(f"attention_fuse: image shape {image.shape} does not match W_I {att.W_I.shape}")
    return ag.matmul(image, att.W_I)


def attention_fuse(att: AttentionParams, h: Tensor, image: Tensor, projected: Tensor | None = None) -> Tensor:
    """Element-wise gating ``h * (image @ W_I)``."""
    if projected is None:
        projected = project_image(att, image)
    if h.shape != projected.shape:
        raise ValueError(f"attention_fuse: state shape {h.shape} vs projected image {projected.shape}")
    return h * projected


def dropout_apply(spec: DropoutSpec, site: str, x: Tensor, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    p = spec.rate(site)
    if not spec.active or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def load_glove(path: str | Path, tokens: Sequence[str], d_emb: int,
               rng: np.random.Generator, frozen: bool = True) -> EmbeddingTable:
    """Embedding table from a GloVe text file; unknown tokens get N(0, 0.1^2) rows."""
    wanted = {tok: i for i, tok in enumerate(tokens)}
    matrix = rng.normal(0.0, 0.1, size=(len(tokens), d_emb))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts[0] not in wanted:
                continue
            if len(parts) != d_emb + 1:
                raise ValueError(f"{path}:{lineno}: expected {d_emb} values, got {len(parts) - 1}")
            matrix[wanted[parts[0]]] = np.array(parts[1:], dtype=np.float64)
    return EmbeddingTable(Tensor(matrix), frozen=frozen)
