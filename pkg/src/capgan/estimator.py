"""scikit-learn style wrapper around the adversarial captioner.

``X`` is a 2-D array of precomputed image features, one row per image.
``y`` holds the reference captions of each row: a string or a list of
strings.
"""
from __future__ import annotations

from dataclasses import fields
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import CaptionRecord, FeatureTable, Vocabulary, build_vocab, encode_caption, tokenize
from .evaluation import bleu4
from .model import DecodeConfig, build_models, greedy_decode
from .training import TrainConfig, TrainingData, train_loop


def check_features(X, d_img: int | None = None) -> np.ndarray:
    """Finite float64 matrix with an optional fixed width."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if d_img is not None and X.shape[1] != d_img:
        raise ValueError(f"X has {X.shape[1]} features, expected {d_img}")
    return X


def check_captions(y, n_rows: int) -> list[list[str]]:
    """Normalise ``y`` to one non-empty list of caption strings per row."""
    if isinstance(y, str):
        raise TypeError("y must be a sequence with one entry per row, not a single string")
    y = list(y)
    if len(y) != n_rows:
        raise ValueError(f"y has {len(y)} entries but X has {n_rows} rows")
    out = []
    for i, refs in enumerate(y):
        refs = [refs] if isinstance(refs, str) else list(refs)
        if not refs or not all(isinstance(r, str) for r in refs):
            raise ValueError(f"y[{i}] must be a caption string or a non-empty list of strings")
        out.append(refs)
    return out


def _records(X: np.ndarray, y: list[list[str]], vocab: Vocabulary, max_len: int, offset: int):
    feats = FeatureTable(X, np.arange(offset, offset + len(X)))
    recs = [CaptionRecord(offset + i, i, [encode_caption(vocab, tokenize(c), max_len) for c in refs])
            for i, refs in enumerate(y)]
    return recs, feats


class CaptionGAN(BaseEstimator):
    """Image captioner trained adversarially against a recurrent critic.

    Parameters mirror :class:`capgan.training.TrainConfig` plus model widths.
    ``validation_fraction`` of the rows (at least one) is held out for early
    stopping unless ``fit`` receives explicit validation data.

    Fitted attributes: ``vocab_``, ``generator_``, ``discriminator_``,
    ``history_``, ``best_epoch_``, ``best_val_bleu4_``, ``n_features_in_``.
    """

    def __init__(self, *, d_emb=300, d_h=256, share_embedding=True, freeze_embedding=False,
                 min_count=5, max_len=20, lambda_gp=9.0, p_embedding=0.0, p_hidden=0.5,
                 batch_size=512, critic_ratio=5, objective="wgan_gp", lr=1e-4, beta1=0.5,
                 beta2=0.9, patience=5, max_epochs=100, seed=0, validation_fraction=0.1):
        self.d_emb = d_emb
        self.d_h = d_h
        self.share_embedding = share_embedding
        self.freeze_embedding = freeze_embedding
        self.min_count = min_count
        self.max_len = max_len
        self.lambda_gp = lambda_gp
        self.p_embedding = p_embedding
        self.p_hidden = p_hidden
        self.batch_size = batch_size
        self.critic_ratio = critic_ratio
        self.objective = objective
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.patience = patience
        self.max_epochs = max_epochs
        self.seed = seed
        self.validation_fraction = validation_fraction

    def _train_config(self) -> TrainConfig:
        params = self.get_params()
        return TrainConfig(**{f.name: params[f.name] for f in fields(TrainConfig) if f.name in params})

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_features(X)
        y = check_captions(y, len(X))
        cfg = self._train_config()
        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must lie in (0, 1) when X_val is not given")
            order = np.random.default_rng(self.seed).permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            if n_val >= len(X):
                raise ValueError("not enough rows to hold out a validation split")
            val_idx, tr_idx = order[:n_val], order[n_val:]
            X_val, y_val = X[val_idx], [y[i] for i in val_idx]
            X, y = X[tr_idx], [y[i] for i in tr_idx]
        else:
            X_val = check_features(X_val, X.shape[1])
            y_val = check_captions(y_val, len(X_val))

        vocab = build_vocab((tokenize(c) for refs in y for c in refs), self.min_count)
        train, feats_tr = _records(X, y, vocab, self.max_len, 0)
        val, feats_val = _records(X_val, y_val, vocab, self.max_len, len(X))
        features = FeatureTable(np.vstack([feats_tr.matrix, feats_val.matrix]),
                                np.concatenate([feats_tr.image_ids, feats_val.image_ids]))
        data = TrainingData(train, val, features, vocab)

        G, D = build_models(np.random.default_rng(self.seed), len(vocab), self.d_emb, self.d_h,
                            X.shape[1], share_embedding=self.share_embedding,
                            freeze_embedding=self.freeze_embedding)
        result = train_loop(cfg, data, G, D)
        self.vocab_ = vocab
        self.generator_, self.discriminator_ = G, D
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_val_bleu4_ = result.best_bleu
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> list[str]:
        """Greedy captions, one string per row."""
        check_is_fitted(self, "generator_")
        X = check_features(X, self.n_features_in_)
        ids = greedy_decode(self.generator_, X, DecodeConfig(max_len=self.max_len))
        return [" ".join(self.vocab_.decode(seq)) for seq in ids]

    def score(self, X, y) -> float:
        """Corpus BLEU-4 of the predicted captions against ``y``."""
        X = check_features(X, getattr(self, "n_features_in_", None))
        refs = check_captions(y, len(X))
        cands = [c.split() for c in self.predict(X)]
        return bleu4(cands, [[tokenize(r) for r in rs] for rs in refs]).bleu4


def captions_of(records: Sequence[CaptionRecord], vocab: Vocabulary) -> list[list[str]]:
    """Reference strings of each record, for feeding ``fit``/``score``."""
    return [[" ".join(vocab.decode(ref)) for ref in rec.references] for rec in records]
