import csv
import json
import re

import numpy as np
import pytest

from capgan.cli import main
from capgan.data import EOS, build_vocab, load_captions, load_features, read_caption_file, tokenize
from capgan.evaluation import evaluate
from capgan.model import build_models, load_checkpoint, save_checkpoint
from test_model import force_token

FAST = ["--d-emb", "8", "--d-h", "8", "--batch-size", "20", "--critic-ratio", "1"]
GRAMMAR = re.compile(r"^a (red|green|blue|yellow) (cube|sphere|cone|cylinder) on a "
                     r"(red|green|blue|yellow) (table|floor|shelf|rug)$")


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["make-synth", "--out-dir", str(out), "--n-train", "40", "--n-val", "10", "--seed", "1"]) == 0
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _forced_checkpoint(synth_dir, tmp_path, token):
    grouped = read_caption_file(synth_dir / "train.json")
    vocab = build_vocab((tokenize(c) for cs in grouped.values() for c in cs), 1)
    G, D = build_models(np.random.default_rng(0), len(vocab), 8, 8, 64)
    force_token(G, token)
    save_checkpoint(tmp_path / "ck", G, D, vocab, {"config": {"max_len": 6}})
    return tmp_path / "ck", vocab


def _without_out_dir(obj):
    if isinstance(obj, dict):
        return {k: _without_out_dir(v) for k, v in obj.items() if k != "out_dir"}
    if isinstance(obj, list):
        return [_without_out_dir(v) for v in obj]
    return obj


# ---------------------------------------------------------------- train

def test_make_synth_writes_dataset_and_config(synth_dir):
    cfg = json.loads((synth_dir / "synth.json").read_text())
    assert cfg["d_img"] == 64 and cfg["min_count"] == 1
    assert len(read_caption_file(synth_dir / "train.json")) == 40


def test_train_one_epoch(capsys, synth_dir, tmp_path):
    code, out, _ = run(capsys, "train", "--config", synth_dir / "synth.json", "--max-epochs", 1,
                       "--out-dir", tmp_path, *FAST)
    assert code == 0
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[1])["epoch"] == 1
    assert (tmp_path / "best" / "manifest.json").exists()
    assert "bleu4" in json.loads(out)


def test_objective_override_reaches_history(capsys, synth_dir, tmp_path):
    code, _, _ = run(capsys, "train", "--config", synth_dir / "synth.json", "--max-epochs", 1,
                     "--objective", "log_loss", "--out-dir", tmp_path, *FAST)
    header = json.loads((tmp_path / "history.jsonl").read_text().splitlines()[0])
    assert code == 0 and header["config"]["objective"] == "log_loss"


def test_missing_feature_file(capsys, synth_dir, tmp_path):
    code, _, err = run(capsys, "train", "--config", synth_dir / "synth.json", "--features",
                       tmp_path / "nope.bin")
    assert code == 1 and "nope.bin" in err


def test_flag_beats_file_beats_default(capsys, synth_dir, tmp_path, monkeypatch):
    cfg = json.loads((synth_dir / "synth.json").read_text())
    cfg.update({"max_epochs": 1, "lambda_gp": 3.0, "seed": 11})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    monkeypatch.setenv("CAPGAN_SEED", "99")
    code, _, _ = run(capsys, "train", "--config", path, "--lambda-gp", 4.0, "--out-dir", tmp_path / "r", *FAST)
    header = json.loads((tmp_path / "r" / "history.jsonl").read_text().splitlines()[0])["config"]
    assert code == 0
    assert header["lambda_gp"] == 4.0 and header["seed"] == 11 and header["p_hidden"] == 0.5


def test_seed_falls_back_to_environment(capsys, synth_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("CAPGAN_SEED", "7")
    run(capsys, "train", "--config", synth_dir / "synth.json", "--max-epochs", 1, "--out-dir", tmp_path, *FAST)
    header = json.loads((tmp_path / "history.jsonl").read_text().splitlines()[0])["config"]
    assert header["seed"] == 7


def test_unknown_config_key(capsys, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"learning_rate": 0.1}')
    code, _, err = run(capsys, "train", "--config", path)
    assert code == 1 and "learning_rate" in err


def test_invalid_rate_is_a_usage_error(capsys, synth_dir):
    code, _, err = run(capsys, "train", "--config", synth_dir / "synth.json", "--p-hidden", 1.5)
    assert code == 1 and "p_hidden" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_code(capsys, synth_dir, tmp_path):
    code, _, err = run(capsys, "train", "--config", synth_dir / "synth.json", "--max-epochs", 2,
                       "--lr", 1e300, "--out-dir", tmp_path, *FAST)
    assert code == 2 and "numerical abort" in err


def test_fixed_seed_gives_identical_artifacts(capsys, synth_dir, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "train", "--config", synth_dir / "synth.json", "--max-epochs", 2,
                   "--seed", 5, "--out-dir", tmp_path / name, *FAST)[0] == 0
    for rel in ("best/params.bin", "eval.json", "eval_records.jsonl"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    manifests = [json.loads((tmp_path / n / "best" / "manifest.json").read_text()) for n in "ab"]
    assert _without_out_dir(manifests[0]) == _without_out_dir(manifests[1])
    strip = lambda p: [{k: v for k, v in json.loads(x).items() if k != "wallclock_s"}
                       for x in p.read_text().splitlines()]
    assert strip(tmp_path / "a" / "history.jsonl") == strip(tmp_path / "b" / "history.jsonl")


@pytest.mark.parametrize("command", ["train", "generate", "evaluate", "sweep", "make-synth"])
def test_help_lists_defaults(capsys, command):
    with pytest.raises(SystemExit) as exc:
        from capgan.cli import build_parser
        build_parser().parse_args([command, "--help"])
    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    if command in ("train", "sweep"):
        for flag, default in [("--lambda-gp", "9.0"), ("--p-hidden", "0.5"), ("--batch-size", "512"),
                              ("--d-h", "256"), ("--d-emb", "300"), ("--d-img", "2048"), ("--patience", "5")]:
            assert flag in text and f"(default: {default})" in text, flag
    assert text.count("default") >= 1


# ---------------------------------------------------------------- generate and evaluate

def test_generate_forced_token(capsys, synth_dir, tmp_path):
    ck, vocab = _forced_checkpoint(synth_dir, tmp_path, 5)
    code, out, _ = run(capsys, "generate", "--checkpoint", ck, "--features", synth_dir / "features.bin",
                       "--image-id", 0)
    assert code == 0 and out == " ".join([vocab.tokens[5]] * 6) + "\n"


def test_generate_eos_first_prints_empty_line(capsys, synth_dir, tmp_path):
    ck, _ = _forced_checkpoint(synth_dir, tmp_path, EOS)
    code, out, _ = run(capsys, "generate", "--checkpoint", ck, "--features", synth_dir / "features.bin",
                       "--image-id", 3)
    assert code == 0 and out == "\n"


def test_generate_unknown_image(capsys, synth_dir, tmp_path):
    ck, _ = _forced_checkpoint(synth_dir, tmp_path, 4)
    code, _, err = run(capsys, "generate", "--checkpoint", ck, "--features", synth_dir / "features.bin",
                       "--image-id", 12345)
    assert code == 1 and "12345" in err


def test_evaluate_copying_checkpoint(capsys, synth_dir, tmp_path):
    ck, vocab = _forced_checkpoint(synth_dir, tmp_path, 4)
    word = vocab.tokens[4]
    caps = tmp_path / "caps.json"
    caps.write_text(json.dumps({"images": [{"id": i} for i in range(3)],
                                "annotations": [{"image_id": i, "caption": " ".join([word] * 6)} for i in range(3)]}))
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ck, "--captions", caps,
                       "--features", synth_dir / "features.bin", "--out", tmp_path / "rows.jsonl")
    assert code == 0 and json.loads(out)["bleu4"] == 1.0
    assert len((tmp_path / "rows.jsonl").read_text().splitlines()) == 3


def test_evaluate_empty_checkpoint(capsys, synth_dir, tmp_path):
    ck, _ = _forced_checkpoint(synth_dir, tmp_path, EOS)
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ck, "--captions", synth_dir / "val.json",
                       "--features", synth_dir / "features.bin")
    assert code == 0 and json.loads(out)["bleu4"] == 0.0


def test_evaluate_matches_in_process(capsys, converged_run):
    ck = converged_run.run_dir / "best"
    p = converged_run.paths
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ck, "--captions", p["val"], "--features", p["features"])
    G, _, vocab, meta = load_checkpoint(ck)
    feats = load_features(p["features"])
    direct = evaluate(G, load_captions(p["val"], vocab, feats), feats, vocab)
    assert code == 0 and json.loads(out)["bleu4"] == direct.bleu4


def test_generate_from_trained_checkpoint_follows_template(capsys, converged_run):
    ck = converged_run.run_dir / "best"
    train_ids = [r.image_id for r in converged_run.data.train[:10]]
    matches = 0
    for image_id in train_ids:
        code, out, _ = run(capsys, "generate", "--checkpoint", ck, "--features",
                           converged_run.paths["features"], "--image-id", image_id)
        assert code == 0
        matches += bool(GRAMMAR.match(out.strip()))
    assert matches >= 8


# ---------------------------------------------------------------- sweep

def test_sweep_one_cell(capsys, synth_dir, tmp_path):
    code, out, _ = run(capsys, "sweep", "--config", synth_dir / "synth.json", "--rates-emb", "0.25",
                       "--rates-hid", "0.5", "--budget-epochs", 1, "--out-dir", tmp_path, *FAST)
    assert code == 0 and out.strip() == str(tmp_path / "sweep.csv")
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 2


def test_sweep_three_by_three(capsys, synth_dir, tmp_path):
    code, _, _ = run(capsys, "sweep", "--config", synth_dir / "synth.json", "--budget-epochs", 1,
                     "--out-dir", tmp_path, *FAST)
    rows = list(csv.reader(open(tmp_path / "sweep.csv", newline="")))
    assert code == 0 and len(rows) == 4
    assert sum(len(r) - 1 for r in rows[1:]) == 9


def test_sweep_rejects_bad_rates(capsys, synth_dir, tmp_path):
    code, _, err = run(capsys, "sweep", "--config", synth_dir / "synth.json", "--rates-emb", "0,1.2",
                       "--out-dir", tmp_path, *FAST)
    assert code == 1 and "1.2" in err


def test_unknown_command(capsys):
    assert run(capsys, "fly")[0] == 1
