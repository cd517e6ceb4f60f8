"""BLEU-4 scoring, validation evaluation and the dropout grid sweep."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CaptionRecord, FeatureTable, Vocabulary
from .model import DecodeConfig, GeneratorParams, greedy_decode

Tokens = Sequence[str]


@dataclass
class BleuReport:
    bleu4: float
    precisions: list[float]
    brevity_penalty: float
    candidate_length: int
    reference_length: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "bleu4_x100": 100.0 * self.bleu4,
            "precisions": self.precisions,
            "brevity_penalty": self.brevity_penalty,
            "candidate_length": self.candidate_length,
            "reference_length": self.reference_length,
        }


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped(candidate: Tokens, refs: Sequence[Tokens], n: int) -> tuple[int, int]:
    counts = _ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in refs:
        max_ref |= _ngrams(ref, n)
    matched = sum(min(c, max_ref[g]) for g, c in counts.items())
    return matched, max(len(candidate) - n + 1, 0)


def ngram_precision(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                    n: int) -> tuple[int, int]:
    """Corpus-summed clipped n-gram matches and candidate n-gram count."""
    if n < 1:
        raise ValueError("ngram_precision: n must be >= 1")
    if len(candidates) != len(references):
        raise ValueError("ngram_precision: candidates and references differ in length")
    matched = total = 0
    for cand, refs in zip(candidates, references):
        m, t = _clipped(cand, refs, n)
        matched += m
        total += t
    return matched, total


def _closest_ref_length(cand_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu4(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
          smoothing: str | tuple = "none") -> BleuReport:
    """Corpus BLEU-4 with uniform weights.

    ``smoothing`` is ``"none"`` or ``("add_k", k)``; add-k adds ``k`` to the
    match and total counts of the 2- to 4-gram precisions.
    """
    if not candidates:
        raise ValueError("bleu4: empty corpus")
    if len(candidates) != len(references) or any(len(r) == 0 for r in references):
        raise ValueError("bleu4: every candidate needs at least one reference")
    k = 0.0
    if smoothing != "none":
        kind, k = smoothing
        if kind != "add_k" or k < 0:
            raise ValueError(f"bleu4: unknown smoothing {smoothing!r}")
    matches, totals, precisions = [], [], []
    for n in range(1, 5):
        m, t = ngram_precision(candidates, references, n)
        matches.append(m)
        totals.append(t)
        if n > 1:
            m, t = m + k, t + k
        precisions.append(m / t if t > 0 else 0.0)
    c = sum(len(cand) for cand in candidates)
    r = sum(_closest_ref_length(len(cand), refs) for cand, refs in zip(candidates, references))
    if c == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - r / c))
    if min(precisions) <= 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return BleuReport(score, precisions, bp, c, r, matches, totals)


def sentence_bleu4(candidate: Tokens, references: Sequence[Tokens], smoothing="none") -> float:
    return bleu4([candidate], [references], smoothing).bleu4


@dataclass
class EvalResult:
    report: BleuReport
    records: list[dict]

    @property
    def bleu4(self) -> float:
        return self.report.bleu4


def evaluate(G: GeneratorParams, records: Sequence[CaptionRecord], features: FeatureTable,
             vocab: Vocabulary, cfg: DecodeConfig | None = None) -> EvalResult:
    """Greedy-decode every image (no dropout) and score against all references."""
    if not records:
        raise ValueError("evaluate: empty dataset")
    cfg = cfg or DecodeConfig()
    image = features.matrix[[r.feature_row for r in records]]
    decoded = greedy_decode(G, image, cfg)
    candidates = [vocab.decode(ids) for ids in decoded]
    references = [[vocab.decode(ref) for ref in r.references] for r in records]
    report = bleu4(candidates, references)
    rows = [
        {
            "image_id": r.image_id,
            "candidate": " ".join(cand),
            "references": [" ".join(ref) for ref in refs],
            "sentence_bleu4": sentence_bleu4(cand, refs),
        }
        for r, cand, refs in zip(records, candidates, references)
    ]
    return EvalResult(report, rows)


def write_eval_records(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# dropout sweep


@dataclass
class SweepGrid:
    embedding_rates: list[float]
    hidden_rates: list[float]
    bleu: np.ndarray          # (len(hidden_rates), len(embedding_rates))
    epochs_run: np.ndarray
    aborted: np.ndarray
    histories: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> Path:
        """Rows are hidden rates, columns embedding rates."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["p_hidden\\p_emb"] + [f"{r:.6f}" for r in self.embedding_rates])
            for i, ph in enumerate(self.hidden_rates):
                w.writerow([f"{ph:.6f}"] + [f"{b:.6f}" for b in self.bleu[i]])
        return path


def _run_cell(args):
    from .training import TrainingError, build_and_train

    cfg, data, dims, p_emb, p_hid = args
    cell_cfg = replace(cfg, p_embedding=p_emb, p_hidden=p_hid)
    try:
        result = build_and_train(cell_cfg, data, dims)
    except TrainingError as exc:
        return p_emb, p_hid, 0.0, exc.epoch, True, []
    return p_emb, p_hid, result.best_bleu, len(result.history), False, result.history


def dropout_sweep(base_cfg, rates_emb: Sequence[float], rates_hid: Sequence[float],
                  budget_epochs: int, data, dims, out_dir: str | Path | None = None,
                  jobs: int = 1) -> SweepGrid:
    """Train one model per (embedding rate, hidden rate) cell.

    Cells share ``base_cfg`` (including the seed) and differ only in dropout
    rates.  A cell that aborts on non-finite values scores 0 and is flagged.
    """
    rates_emb, rates_hid = list(map(float, rates_emb)), list(map(float, rates_hid))
    if not rates_emb or not rates_hid:
        raise ValueError("dropout_sweep: rate lists must be non-empty")
    for r in rates_emb + rates_hid:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"dropout_sweep: rate {r} outside [0, 1)")
    cfg = replace(base_cfg, max_epochs=int(budget_epochs))
    tasks = [(cfg, data, dims, pe, ph) for ph in rates_hid for pe in rates_emb]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    shape = (len(rates_hid), len(rates_emb))
    grid = SweepGrid(rates_emb, rates_hid, np.zeros(shape), np.zeros(shape, dtype=int),
                     np.zeros(shape, dtype=bool))
    for idx, (pe, ph, bleu, epochs, aborted, history) in enumerate(results):
        i, j = divmod(idx, len(rates_emb))
        grid.bleu[i, j] = bleu
        grid.epochs_run[i, j] = epochs
        grid.aborted[i, j] = aborted
        grid.histories[(pe, ph)] = history
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        grid.to_csv(out / "sweep.csv")
        for (pe, ph), history in grid.histories.items():
            with open(out / f"history_emb{pe:.6f}_hid{ph:.6f}.jsonl", "w", encoding="utf-8") as fh:
                for rec in history:
                    fh.write(json.dumps(rec) + "\n")
    return grid
