import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from capgan import autograd as ag
from capgan.data import EOS, SyntheticSpec, generate_synthetic, make_batch
from capgan.model import build_models


def tiny_models(seed=0, vocab_size=6, d_emb=5, d_h=4, d_img=8, scale=1.0, **kw):
    rng = np.random.default_rng(seed)
    G, D = build_models(rng, vocab_size, d_emb, d_h, d_img, **kw)
    if scale != 1.0:
        for model in (G, D):
            for t in model.params().values():
                t.data = t.data * scale
    return G, D


def tiny_batch(seed=0, B=2, T=3, vocab_size=6, d_img=8, ragged=False):
    """Random token sequences ending in <eos>; ``ragged`` shortens the last one."""
    rng = np.random.default_rng(1000 + seed)
    seqs = []
    for b in range(B):
        length = T - 1 if (ragged and b == B - 1) else T
        body = rng.integers(3, vocab_size, size=length - 1).tolist()
        seqs.append(body + [EOS])
    return make_batch(seqs, rng.normal(size=(B, d_img)), vocab_size)


def fd_errors(loss_fn, params: dict, h=1e-5, floor=1e-6, per_tensor=None, rng=None):
    """Max element-wise relative error of analytic vs central-difference gradients.

    ``loss_fn()`` rebuilds the scalar loss from the current parameter data;
    it must be deterministic.  The error is |a - n| / max(|a|, |n|, floor).
    ``per_tensor`` limits the check to that many random coordinates of each
    parameter tensor.
    """
    names = list(params)
    analytic = ag.grad(loss_fn(), [params[k] for k in names])
    worst = 0.0
    for k, g in zip(names, analytic):
        p = params[k]
        base = p.data.copy()
        flat = base.reshape(-1)
        coords = range(flat.size)
        if per_tensor is not None and flat.size > per_tensor:
            coords = rng.choice(flat.size, size=per_tensor, replace=False)
        for i in coords:
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            with ag.no_grad():
                p.data = plus.reshape(base.shape)
                fp = loss_fn().item()
                p.data = minus.reshape(base.shape)
                fm = loss_fn().item()
            numeric = (fp - fm) / (2 * h)
            a = g.data.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        p.data = base
    return worst


@pytest.fixture(scope="session")
def synth_small():
    return generate_synthetic(SyntheticSpec(n_train=40, n_val=12, seed=3))


@pytest.fixture(scope="session")
def synth_full():
    return generate_synthetic(SyntheticSpec())


# settings for the end-to-end synthetic run; lr and critic ratio are free
# choices there and these converge well inside the epoch budget
CONVERGE_CFG = dict(batch_size=64, lambda_gp=9.0, p_embedding=0.0, p_hidden=0.5,
                    objective="wgan_gp", lr=1e-3, critic_ratio=1, patience=60,
                    max_epochs=200, seed=0)
CONVERGE_DIMS = dict(d_emb=32, d_h=64, d_img=64)


@pytest.fixture(scope="session")
def converged_run(tmp_path_factory):
    """One full synthetic training run shared by the CLI and acceptance tests."""
    from capgan.data import write_synthetic
    from capgan.training import ModelDims, TrainConfig, TrainingData, TrainingError, build_and_train

    data = generate_synthetic(SyntheticSpec())
    root = tmp_path_factory.mktemp("converged")
    paths = write_synthetic(data, root / "data")
    cfg = TrainConfig(**CONVERGE_CFG)
    t0 = time.perf_counter()
    try:
        result, error = build_and_train(cfg, TrainingData(data.train, data.val, data.features, data.vocab),
                                        ModelDims(**CONVERGE_DIMS), run_dir=root / "run"), None
    except TrainingError as exc:
        result, error = None, exc
    return SimpleNamespace(result=result, error=error, elapsed=time.perf_counter() - t0, data=data,
                           paths=paths, run_dir=root / "run", cfg=cfg)
