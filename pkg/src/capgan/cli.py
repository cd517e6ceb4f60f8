"""Command-line entry point: ``capgan {train,generate,evaluate,sweep,make-synth}``.

Exit codes: 0 success, 1 usage or validation error, 2 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import (
    SyntheticSpec,
    build_vocab,
    generate_synthetic,
    load_captions,
    load_features,
    read_caption_file,
    tokenize,
    write_synthetic,
)
from .evaluation import dropout_sweep, evaluate, write_eval_records
from .model import DecodeConfig, build_models, greedy_decode, load_checkpoint, save_checkpoint
from .nn import load_glove
from .training import ModelDims, TrainConfig, TrainingData, TrainingError, train_loop

log = logging.getLogger("capgan")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a training run needs; flat so it maps onto JSON and flags."""

    captions_train: str | None = None
    captions_val: str | None = None
    features: str | None = None
    out_dir: str = "runs/latest"
    glove: str | None = None
    min_count: int = 5
    d_emb: int = 300
    d_h: int = 256
    d_img: int = 2048
    share_embedding: bool = True
    freeze_embedding: bool | None = None
    lambda_gp: float = 9.0
    p_embedding: float = 0.0
    p_hidden: float = 0.5
    batch_size: int = 512
    critic_ratio: int = 5
    objective: str = "wgan_gp"
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    max_len: int = 20
    mismatched_pairs: bool = False
    log_loss_penalty: bool = False

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def dims(self) -> ModelDims:
        freeze = self.freeze_embedding if self.freeze_embedding is not None else self.glove is not None
        return ModelDims(self.d_emb, self.d_h, self.d_img, self.share_embedding, freeze)

    def validate(self) -> None:
        for name in ("captions_train", "captions_val", "features", "glove"):
            path = getattr(self, name)
            if name != "glove" and path is None:
                raise UsageError(f"{name}: required (set it in --config or pass --{name.replace('_', '-')})")
            if path is not None and not Path(path).exists():
                raise UsageError(f"{name}: path does not exist: {path}")
        for name in ("d_emb", "d_h", "d_img", "min_count"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name}: must be a positive integer")
        try:
            self.train_config()
        except ValueError as exc:
            raise UsageError(str(exc)) from None


_HELP = {
    "captions_train": "COCO-style caption JSON for training",
    "captions_val": "COCO-style caption JSON for validation",
    "features": "binary feature file (CAPF)",
    "out_dir": "run directory",
    "glove": "GloVe text file for the embedding table",
    "min_count": "vocabulary frequency threshold",
    "d_emb": "token embedding width",
    "d_h": "GRU width",
    "d_img": "image feature width",
    "share_embedding": "one embedding table for both branches",
    "freeze_embedding": "keep embedding rows fixed",
    "lambda_gp": "gradient penalty weight",
    "p_embedding": "dropout rate on generator input embeddings",
    "p_hidden": "dropout rate on the generator's first GRU output",
    "batch_size": "batch size",
    "critic_ratio": "critic updates per generator update",
    "objective": "wgan_gp or log_loss",
    "lr": "Adam learning rate",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "patience": "epochs without validation BLEU-4 gain before stopping",
    "max_epochs": "epoch budget",
    "seed": "random seed (falls back to $CAPGAN_SEED)",
    "max_len": "maximum caption length",
    "mismatched_pairs": "also show the critic real captions with wrong images",
    "log_loss_penalty": "add the gradient penalty to the log-loss critic",
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flat run settings")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        kind = {int: int, float: float, bool: _parse_bool}.get(type(default), str)
        if f.name in ("freeze_embedding",):
            kind = _parse_bool
        choices = ["wgan_gp", "log_loss"] if f.name == "objective" else None
        shown = "frozen when --glove is given" if f.name == "freeze_embedding" else default
        p.add_argument(flag, dest=f.name, type=kind, default=None, choices=choices,
                       help=f"{_HELP[f.name]} (default: {shown})")


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < $CAPGAN_SEED < config file < command-line flags."""
    values: dict = {}
    if os.environ.get("CAPGAN_SEED"):
        values["seed"] = int(os.environ["CAPGAN_SEED"])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config: path does not exist: {path}")
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config: {path} is not valid JSON ({exc})") from None
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise UsageError(f"config: unknown keys {unknown}")
        values.update(file_values)
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(f"config: {exc}") from None
    cfg.validate()
    return cfg


def load_training_data(cfg: RunConfig) -> TrainingData:
    features = load_features(cfg.features)
    if features.d_img != cfg.d_img:
        raise UsageError(f"d_img: config says {cfg.d_img} but {cfg.features} has width {features.d_img}")
    grouped = read_caption_file(cfg.captions_train)
    vocab = build_vocab((tokenize(c) for caps in grouped.values() for c in caps), cfg.min_count)
    train = load_captions(cfg.captions_train, vocab, features, cfg.max_len)
    val = load_captions(cfg.captions_val, vocab, features, cfg.max_len)
    if not train:
        raise UsageError(f"captions_train: no usable records in {cfg.captions_train}")
    if not val:
        raise UsageError(f"captions_val: no usable records in {cfg.captions_val}")
    return TrainingData(train, val, features, vocab)


def _models_for(cfg: RunConfig, data: TrainingData):
    dims = cfg.dims()
    rng = np.random.default_rng(cfg.seed)
    embedding = None
    if cfg.glove:
        embedding = load_glove(cfg.glove, data.vocab.tokens, dims.d_emb, rng, frozen=dims.freeze_embedding)
    return build_models(rng, len(data.vocab), dims.d_emb, dims.d_h, dims.d_img, embedding=embedding,
                        share_embedding=dims.share_embedding, freeze_embedding=dims.freeze_embedding)


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    data = load_training_data(cfg)
    G, D = _models_for(cfg, data)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=1), encoding="utf-8")
    try:
        result = train_loop(cfg.train_config(), data, G, D, run_dir=out)
    except TrainingError as exc:
        print(f"numerical abort: {exc} (epoch {exc.epoch}, step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(out / "best", G, D, data.vocab,
                    {"epoch": result.best_epoch, "val_bleu4": result.best_bleu, "config": asdict(cfg)})
    final = evaluate(G, data.val, data.features, data.vocab, DecodeConfig(max_len=cfg.max_len))
    write_eval_records(out / "eval_records.jsonl", final.records)
    report = {"best_epoch": result.best_epoch, "epochs_run": len(result.history), **final.report.to_json()}
    (out / "eval.json").write_text(json.dumps(report, indent=1), encoding="utf-8")
    print(json.dumps(report))
    return EXIT_OK


def cmd_generate(args) -> int:
    G, _, vocab, meta = load_checkpoint(args.checkpoint)
    features = load_features(args.features)
    try:
        row = features.lookup(args.image_id)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    max_len = args.max_len or meta.get("config", {}).get("max_len", 20)
    (ids,) = greedy_decode(G, row[None, :], DecodeConfig(max_len=max_len))
    print(" ".join(vocab.decode(ids)))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    G, _, vocab, meta = load_checkpoint(args.checkpoint)
    features = load_features(args.features)
    max_len = args.max_len or meta.get("config", {}).get("max_len", 20)
    records = load_captions(args.captions, vocab, features, max_len)
    if not records:
        raise UsageError(f"captions: no evaluable records in {args.captions}")
    result = evaluate(G, records, features, vocab, DecodeConfig(max_len=max_len))
    per_image = Path(args.out) if args.out else Path(args.checkpoint) / "eval_records.jsonl"
    write_eval_records(per_image, result.records)
    print(json.dumps(result.report.to_json()))
    return EXIT_OK


def _rates(text: str) -> list[float]:
    try:
        rates = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None
    if not rates:
        raise argparse.ArgumentTypeError("empty rate list")
    return rates


def cmd_sweep(args) -> int:
    for r in args.rates_emb + args.rates_hid:
        if not 0.0 <= r < 1.0:
            raise UsageError(f"rates: {r} outside [0, 1)")
    cfg = resolve_run_config(args)
    data = load_training_data(cfg)
    out = Path(cfg.out_dir)
    grid = dropout_sweep(cfg.train_config(), args.rates_emb, args.rates_hid, args.budget_epochs,
                         data, cfg.dims(), out_dir=out, jobs=args.jobs)
    n_aborted = int(grid.aborted.sum())
    if n_aborted:
        print(f"{n_aborted} cell(s) aborted on non-finite values; recorded as 0", file=sys.stderr)
    print(out / "sweep.csv")
    return EXIT_OK


def cmd_make_synth(args) -> int:
    values = {}
    if args.spec:
        values = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    for key in ("d_img", "noise_sigma", "n_train", "n_val", "seed"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    try:
        spec = SyntheticSpec(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"spec: {exc}") from None
    paths = write_synthetic(generate_synthetic(spec), args.out_dir)
    config = {
        "captions_train": str(paths["train"]), "captions_val": str(paths["val"]),
        "features": str(paths["features"]), "d_img": spec.d_img, "min_count": 1,
        "d_emb": 32, "d_h": 64, "batch_size": 64,
    }
    cfg_path = Path(args.out_dir) / "synth.json"
    cfg_path.write_text(json.dumps(config, indent=1), encoding="utf-8")
    print(cfg_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capgan", description="Adversarial image captioning: train, caption, evaluate and sweep.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a captioner")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="caption one image")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--features", required=True, help="binary feature file")
    p.add_argument("--image-id", type=int, required=True, help="image id to caption")
    p.add_argument("--max-len", type=int, default=None, help="maximum caption length (default: from checkpoint, else 20)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="corpus BLEU-4 of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--captions", required=True, help="COCO-style caption JSON")
    p.add_argument("--features", required=True, help="binary feature file")
    p.add_argument("--out", default=None, help="per-image JSONL path (default: <checkpoint>/eval_records.jsonl)")
    p.add_argument("--max-len", type=int, default=None, help="maximum caption length (default: from checkpoint, else 20)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="dropout grid over embedding and hidden rates")
    _add_run_flags(p)
    p.add_argument("--rates-emb", type=_rates, default=[0.0, 0.25, 0.5], help="comma-separated embedding rates (default: 0,0.25,0.5)")
    p.add_argument("--rates-hid", type=_rates, default=[0.0, 0.25, 0.5], help="comma-separated hidden rates (default: 0,0.25,0.5)")
    p.add_argument("--budget-epochs", type=int, default=30, help="epoch budget per cell (default: 30)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-synth", help="write a synthetic dataset and a matching config")
    p.add_argument("--spec", default=None, help="SyntheticSpec JSON")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--d-img", type=int, default=None, help="feature width (default: 64)")
    p.add_argument("--noise-sigma", type=float, default=None, help="feature noise (default: 0.1)")
    p.add_argument("--n-train", type=int, default=None, help="training images (default: 500)")
    p.add_argument("--n-val", type=int, default=None, help="validation images (default: 100)")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: 0)")
    p.set_defaults(func=cmd_make_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
