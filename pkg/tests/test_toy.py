import json

import numpy as np
import pytest

from tubekit import tbf
from tubekit import tensor as T
from tubekit import toy
from tubekit.config import RunConfig
from tubekit.toy import TrainingAborted, Variant, learning_rate, run_experiment, synthetic_splits, train_run

SMALL = dict(size=16, n_train=12, n_val=4, channels=4, hidden=4, batch_size=4)


def test_lr_schedule():
    lrs = [learning_rate(s, 300, 0.01) for s in range(300)]
    assert lrs[0] == pytest.approx(0.01 / 30)
    assert lrs[29] == pytest.approx(0.01)
    assert max(lrs) == pytest.approx(0.01)
    assert lrs[-1] == 1e-6 and min(lrs) >= 1e-6
    assert all(a >= b for a, b in zip(lrs[29:], lrs[30:]))
    assert min(learning_rate(s, 2000, 0.01) for s in range(2000)) == 1e-6
    assert learning_rate(99, 2000, 0.01) == pytest.approx(0.01)


def test_short_run_learns_and_writes_outputs(tmp_path):
    cfg = RunConfig(seeds=(0,), steps=40, stride=("dynamic", "5"), **SMALL)
    results = run_experiment(cfg, tmp_path)
    assert [r.variant.name for r in results] == ["dsu-dynamic-bswl", "dsu-5-bswl", "bilinear---bswl"]
    for r in results:
        assert r.final_train_loss < r.initial_loss
        assert len(r.losses) == 40 and np.isfinite(r.val_loss)
    for name in ("config.txt", "train_log.csv", "results.csv", "comparison.csv", "comparison.json"):
        assert (tmp_path / name).is_file()
    rows = json.loads((tmp_path / "comparison.json").read_text())["comparison"]
    assert [r["variant"] for r in rows] == ["dsu-dynamic-bswl", "dsu-5-bswl", "bilinear---bswl"]
    assert (tmp_path / "checkpoints" / "dsu-dynamic-bswl-seed0.ckpt").is_file()
    dsu, bil = results[0], results[2]
    assert dsu.strides and not bil.strides
    assert dsu.params > bil.params


def test_same_seed_reproducible():
    cfg = RunConfig(seeds=(3,), steps=5, **SMALL)
    tr, va = synthetic_splits(cfg, 3)
    a, pa = train_run(cfg, Variant("dsu", "dynamic", "bswl"), 3, tr, va)
    b, pb = train_run(cfg, Variant("dsu", "dynamic", "bswl"), 3, tr, va)
    assert a.losses == b.losses
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_nonfinite_loss_aborts_with_dump(tmp_path, monkeypatch):
    real = toy.forward

    def poisoned(*args, **kw):
        return T.mul(real(*args, **kw), float("nan"))

    monkeypatch.setattr(toy, "forward", poisoned)
    cfg = RunConfig(seeds=(0,), steps=3, **SMALL)
    tr, va = synthetic_splits(cfg, 0)
    with pytest.raises(TrainingAborted, match="step 0"):
        train_run(cfg, Variant("bilinear", "-", "bswl"), 0, tr, va, tmp_path)
    dumped = list((tmp_path / "diagnostic").iterdir())
    assert len(dumped) == 1
    assert tbf.load(dumped[0] / "inputs.tbf").shape == (4, 1, 8, 8)
