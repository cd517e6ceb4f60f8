"""Vocabulary, caption/feature ingestion, synthetic data and batching."""
from __future__ import annotations

import itertools
import json
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
DEFAULT_MAX_LEN = 20

_PUNCT = re.compile(r"[^\w\s']", flags=re.UNICODE)

FEATURE_MAGIC = b"CAPF"
FEATURE_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation except apostrophes, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).replace("_", " ").split()


@dataclass
class Vocabulary:
    """Token <-> id map with the four specials pinned at ids 0..3."""

    tokens: list[str]
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError(f"Vocabulary must start with {SPECIALS}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("Vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Tokens for ``ids``, stopping at <eos> and dropping <pad>/<bos>."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "min_count": self.min_count}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["tokens"]), int(obj.get("min_count", 1)))


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Vocabulary over tokenized sentences, ordered by count then lexically."""
    counts = Counter(itertools.chain.from_iterable(corpus))
    if not counts:
        raise ValueError("build_vocab: empty corpus")
    kept = sorted(
        (tok for tok, n in counts.items() if n >= min_count and tok not in SPECIALS),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(list(SPECIALS) + kept, min_count=min_count)


def encode_caption(vocab: Vocabulary, tokens: Sequence[str], max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """Ids of at most ``max_len`` tokens, then <eos>.

    Greedy decoding emits at most ``max_len`` tokens too, so a perfect
    caption can always be reproduced.
    """
    return vocab.encode(tokens[:max_len]) + [EOS]


@dataclass
class CaptionRecord:
    image_id: int
    feature_row: int
    references: list[list[int]]

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"CaptionRecord {self.image_id}: no references")


@dataclass
class FeatureTable:
    """Precomputed image features, one row per image id."""

    matrix: np.ndarray
    image_ids: np.ndarray
    row_of: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        self.image_ids = np.asarray(self.image_ids, dtype=np.uint64)
        if self.matrix.ndim != 2 or len(self.image_ids) != self.matrix.shape[0]:
            raise ValueError("FeatureTable: matrix rows and image ids disagree")
        bad = np.flatnonzero(~np.isfinite(self.matrix).all(axis=1))
        if bad.size:
            raise ValueError(f"FeatureTable: non-finite values in row {int(bad[0])}")
        self.row_of = {int(i): r for r, i in enumerate(self.image_ids)}

    @property
    def d_img(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def lookup(self, image_id: int) -> np.ndarray:
        try:
            return self.matrix[self.row_of[int(image_id)]]
        except KeyError:
            raise KeyError(f"no feature row for image id {image_id}") from None


def write_features(path: str | Path, table: FeatureTable) -> None:
    n, d = table.matrix.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, n, d))
        fh.write(table.matrix.astype("<f8").tobytes())
        fh.write(table.image_ids.astype("<u8").tobytes())


def load_features(path: str | Path) -> FeatureTable:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    expected = 16 + 8 * n * d + 8 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: header declares {n}x{d} but payload is {len(raw)} bytes, expected {expected}")
    matrix = np.frombuffer(raw, dtype="<f8", count=n * d, offset=16).reshape(n, d)
    ids = np.frombuffer(raw, dtype="<u8", count=n, offset=16 + 8 * n * d)
    return FeatureTable(matrix.astype(np.float64), ids.astype(np.uint64))


def read_caption_file(path: str | Path) -> dict[int, list[str]]:
    """Captions grouped by image id from a COCO-style annotation file."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        images = [int(img["id"]) for img in obj["images"]]
        grouped: dict[int, list[str]] = {i: [] for i in images}
        for ann in obj["annotations"]:
            grouped.setdefault(int(ann["image_id"]), []).append(str(ann["caption"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed caption file ({exc})") from exc
    return {i: caps for i, caps in grouped.items() if caps}


def write_caption_file(path: str | Path, captions: dict[int, list[str]]) -> None:
    images = [{"id": int(i)} for i in captions]
    anns = []
    for image_id, caps in captions.items():
        for cap in caps:
            anns.append({"id": len(anns), "image_id": int(image_id), "caption": cap})
    Path(path).write_text(json.dumps({"images": images, "annotations": anns}), encoding="utf-8")


def load_captions(
    path: str | Path,
    vocab: Vocabulary,
    features: FeatureTable | None = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> list[CaptionRecord]:
    """Records grouped per image; images without a feature row are skipped."""
    grouped = read_caption_file(path)
    records, missing = [], []
    for image_id, caps in grouped.items():
        if features is not None and image_id not in features.row_of:
            missing.append(image_id)
            continue
        row = features.row_of[image_id] if features is not None else -1
        refs = [encode_caption(vocab, tokenize(c), max_len) for c in caps]
        records.append(CaptionRecord(image_id, row, refs))
    if missing:
        log.warning("skipped %d images without feature rows: %s", len(missing), missing[:10])
    return records


# ---------------------------------------------------------------------------
# synthetic desk-scale data


@dataclass
class SyntheticSpec:
    colors: list[str] = field(default_factory=lambda: ["red", "green", "blue", "yellow"])
    shapes: list[str] = field(default_factory=lambda: ["cube", "sphere", "cone", "cylinder"])
    surfaces: list[str] = field(default_factory=lambda: ["table", "floor", "shelf", "rug"])
    d_img: int = 64
    noise_sigma: float = 0.1
    n_train: int = 500
    n_val: int = 100
    seed: int = 0

    def __post_init__(self):
        if not (self.colors and self.shapes and self.surfaces):
            raise ValueError("SyntheticSpec: attribute lists must be non-empty")
        if self.n_val < 1 or self.n_train < 1:
            raise ValueError("SyntheticSpec: n_train and n_val must be >= 1")
        if self.d_img < self.block_width:
            raise ValueError(f"SyntheticSpec: d_img={self.d_img} smaller than attribute blocks ({self.block_width})")

    @property
    def block_width(self) -> int:
        return 2 * len(self.colors) + len(self.shapes) + len(self.surfaces)

    def caption(self, c1: int, shape: int, c2: int, surface: int) -> str:
        return f"a {self.colors[c1]} {self.shapes[shape]} on a {self.colors[c2]} {self.surfaces[surface]}"

    def clean_features(self, attrs: np.ndarray) -> np.ndarray:
        """Noise-free one-hot attribute blocks, zero padded to ``d_img``."""
        nc, ns = len(self.colors), len(self.shapes)
        offsets = np.array([0, nc, nc + ns, 2 * nc + ns])
        out = np.zeros((len(attrs), self.d_img))
        rows = np.arange(len(attrs))[:, None]
        out[rows, attrs + offsets] = 1.0
        return out

    def decode_attributes(self, features: np.ndarray) -> np.ndarray:
        """Nearest one-hot reading of each attribute block."""
        nc, ns, nf = len(self.colors), len(self.shapes), len(self.surfaces)
        bounds = [(0, nc), (nc, nc + ns), (nc + ns, 2 * nc + ns), (2 * nc + ns, 2 * nc + ns + nf)]
        return np.stack([features[:, lo:hi].argmax(axis=1) for lo, hi in bounds], axis=1)


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    train: list[CaptionRecord]
    val: list[CaptionRecord]
    features: FeatureTable
    vocab: Vocabulary
    captions: dict[int, list[str]]
    attributes: np.ndarray

    def __iter__(self):
        # unpacks as (train, val, features, vocab)
        return iter((self.train, self.val, self.features, self.vocab))


def generate_synthetic(spec: SyntheticSpec, max_len: int = DEFAULT_MAX_LEN) -> SyntheticData:
    """Colored-shape scenes whose captions are recoverable from the features."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val
    attrs = np.stack(
        [
            rng.integers(len(spec.colors), size=n),
            rng.integers(len(spec.shapes), size=n),
            rng.integers(len(spec.colors), size=n),
            rng.integers(len(spec.surfaces), size=n),
        ],
        axis=1,
    )
    matrix = spec.clean_features(attrs)
    if spec.noise_sigma > 0:
        matrix = matrix + rng.normal(0.0, spec.noise_sigma, size=matrix.shape)
    table = FeatureTable(matrix, np.arange(n, dtype=np.uint64))
    captions = {i: [spec.caption(*attrs[i])] for i in range(n)}
    vocab = build_vocab(
        (tokenize(c) for i in range(spec.n_train) for c in captions[i]), min_count=1
    )
    records = [
        CaptionRecord(i, i, [encode_caption(vocab, tokenize(c), max_len) for c in captions[i]])
        for i in range(n)
    ]
    return SyntheticData(spec, records[: spec.n_train], records[spec.n_train:], table,
                         vocab, captions, attrs)


def write_synthetic(data: SyntheticData, out_dir: str | Path) -> dict[str, Path]:
    """Write ``train.json``, ``val.json`` and ``features.bin`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"train": out / "train.json", "val": out / "val.json", "features": out / "features.bin"}
    n_train = data.spec.n_train
    write_caption_file(paths["train"], {i: c for i, c in data.captions.items() if i < n_train})
    write_caption_file(paths["val"], {i: c for i, c in data.captions.items() if i >= n_train})
    write_features(paths["features"], data.features)
    return paths


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    image: np.ndarray       # (B, d_img)
    real_ids: np.ndarray    # (B, T) int, <pad>-padded, <eos>-terminated
    real_dists: np.ndarray  # (B, T, |V|) one-hot rows
    mask: np.ndarray        # (B, T) 1.0 on real steps

    @property
    def size(self) -> int:
        return self.real_ids.shape[0]


def one_hot(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (vocab_size,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def make_batch(sequences: Sequence[Sequence[int]], image: np.ndarray, vocab_size: int) -> Batch:
    T = max(len(s) for s in sequences)
    ids = np.full((len(sequences), T), PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), T))
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return Batch(np.asarray(image, dtype=np.float64), ids, one_hot(ids, vocab_size), mask)


def batch_iter(
    records: Sequence[CaptionRecord],
    features: FeatureTable,
    batch_size: int,
    rng: np.random.Generator,
    vocab_size: int,
) -> Iterator[Batch]:
    """One shuffled pass; each image contributes one randomly drawn reference."""
    if batch_size < 1:
        raise ValueError("batch_iter: batch_size must be >= 1")
    order = rng.permutation(len(records))
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        seqs = [r.references[rng.integers(len(r.references))] for r in chunk]
        image = features.matrix[[r.feature_row for r in chunk]]
        yield make_batch(seqs, image, vocab_size)
