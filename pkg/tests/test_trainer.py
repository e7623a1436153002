import json

import numpy as np
import pytest

from sslfgvc import tensor as T
from sslfgvc.config import ConfigError, TrainConfig
from sslfgvc.dataset import Dataset, SplitSpec, generate_synthetic
from sslfgvc.losses import GceConfig
from sslfgvc.trainer import (
    CSV_HEADER,
    LrSchedule,
    _Run,
    build_model,
    evaluate,
    loss_schedule,
    read_metrics,
    sgd_step,
    topk_accuracy,
    train,
    write_metrics,
)


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(4, 5, 3, 16, seed=0)


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr=0.01, rcm=TrainConfig().rcm)
    base.update(kw)
    return TrainConfig(**base)


# -- optimiser ----------------------------------------------------------

def _param(value, grad):
    p = T.Parameter(np.array([value], dtype=np.float64), name="w")
    p.grad = np.array([grad], dtype=np.float64)
    return p


def test_sgd_without_momentum_is_plain_descent():
    p = _param(1.0, 2.0)
    sgd_step([p], 0.1, 0.0)
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_momentum_two_steps():
    # buf 1 → 1.9; w 3 → 2.9 → 2.71
    p = _param(3.0, 1.0)
    sgd_step([p], 0.1, 0.9)
    assert p.data[0] == pytest.approx(2.9, abs=1e-15)
    sgd_step([p], 0.1, 0.9)
    assert p.data[0] == pytest.approx(2.71, abs=1e-14)


def test_sgd_zero_gradient_is_fixed_point():
    p = _param(5.0, 0.0)
    for _ in range(3):
        sgd_step([p], 1.0, 0.9)
    assert p.data[0] == 5.0


def test_sgd_needs_some_gradient():
    p = T.Parameter(np.ones(2), name="w")
    with pytest.raises(ValueError):
        sgd_step([p], 0.1, 0.9)


def test_sgd_skips_parameters_without_grad():
    a, b = _param(1.0, 1.0), T.Parameter(np.ones(1), name="b")
    sgd_step([a, b], 0.5, 0.0)
    assert a.data[0] == 0.5 and b.data[0] == 1.0


def test_lr_schedule_boundary():
    s = LrSchedule(0.01, 0.1, 20)
    assert s(19) == 0.01 and s(20) == pytest.approx(0.001)


def test_loss_schedule_switches_after_warmup():
    g = GceConfig(k=3, warmup_epochs=2)
    assert loss_schedule(1, g) == {"use_ce": True, "use_gce": False}
    assert loss_schedule(2, g) == {"use_ce": False, "use_gce": True}


# -- evaluation ----------------------------------------------------------

def test_topk_examples():
    scores = np.array([[0.1, 0.9, 0.0], [0.5, 0.4, 0.1], [0.2, 0.3, 0.5]])
    labels = np.array([1, 1, 0])
    assert topk_accuracy(scores, labels, 1) == pytest.approx(100 / 3)
    assert topk_accuracy(scores, labels, 2) == pytest.approx(200 / 3)
    assert topk_accuracy(scores, labels, 3) == 100.0


class _Oracle:
    def __init__(self, table, constant=False):
        self.table, self.constant = table, constant

    def logits(self, x):
        out = np.zeros((len(x), 4))
        if self.constant:
            return out
        # images differ by class; look up the label through the mean intensity
        for r, img in enumerate(x):
            out[r, self.table[round(float(img.mean()), 6)]] = 1.0
        return out


def test_evaluate_oracle_and_constant(tiny):
    _, test = tiny
    from sslfgvc.trainer import eval_inputs
    xs = eval_inputs(test, 1.125)
    table = {round(float(x.astype(np.float32).mean()), 6): s.label for x, s in zip(xs, test.samples)}
    assert len(table) == len(test)
    assert evaluate(_Oracle(table), test, batch_size=5) == (100.0, 100.0)
    top1, top2 = evaluate(_Oracle(table, constant=True), test)
    assert top1 == pytest.approx(100 * np.mean(test.labels == 0))
    assert top2 == pytest.approx(100 * np.mean(test.labels <= 1))


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(_Oracle({}), Dataset([], 4, "test"))


# -- training ------------------------------------------------------------

def test_steps_per_epoch(tiny):
    tr, _ = tiny
    sub = Dataset(tr.samples[:10], tr.num_classes)
    cfg = small_cfg(batch_size=2)
    with T.default_dtype(np.float32):
        run = _Run(cfg, sub, build_model(cfg, 4))
        *_, steps = run.run_epoch(0, 0.01)
    assert steps == 5


def _trajectory(cfg, data):
    snaps = []
    train(cfg, *data, on_epoch=lambda row, run: snaps.append(
        {p.name: p.data.copy() for p in run.model.parameters() if not p.name.startswith("heads.rot")}))
    return snaps


def test_rotation_lambda_zero_matches_baseline(tiny):
    kw = dict(epochs=3, dtype="float64", seed=5)
    base = _trajectory(small_cfg(mode="baseline", **kw), tiny)
    rot = _trajectory(small_cfg(mode="rotation", rotation_lambda=0.0, **kw), tiny)
    worst = max(np.abs(a[k] - b[k]).max() for a, b in zip(base, rot) for k in a)
    assert worst <= 1e-12


def test_dcl_ablation_cls_only_reports_cls_loss(tiny):
    cfg = small_cfg(mode="dcl", dcl_ablation=("cls",), epochs=1)
    _, hist = train(cfg, *tiny)
    assert hist[0].train_ssl_loss == pytest.approx(hist[0].train_total_loss, rel=1e-12)


def test_training_is_deterministic(tiny):
    cfg = small_cfg(mode="dcl")
    _, a = train(cfg, *tiny)
    _, b = train(cfg, *tiny)
    assert a == b


def test_pirl_bank_touches_only_batch_ids(tiny):
    tr, _ = tiny
    cfg = small_cfg(mode="pirl", batch_size=2)
    cfg = cfg.with_overrides(pirl=type(cfg.pirl)(negatives=5, resize=24, patch_size=8))
    with T.default_dtype(np.float32):
        run = _Run(cfg, tr, build_model(cfg, 4))
        before = run.bank.reps.copy()
        run.train = Dataset(tr.samples[:2], tr.num_classes)
        run.run_epoch(0, 0.01)
    changed = np.flatnonzero((run.bank.reps != before).any(axis=1))
    assert set(run.bank.ids[changed]) == {tr.samples[0].id, tr.samples[1].id}
    assert np.allclose(np.linalg.norm(run.bank.reps, axis=1), 1, atol=1e-6)


def test_rotation_batch_composition(tiny, monkeypatch):
    import sslfgvc.trainer as tr_mod
    seen = {}
    real = tr_mod.cross_entropy

    def spy(scores, labels):
        if scores.shape[-1] == 4 and len(labels) == 16:
            seen["labels"] = np.asarray(labels)
        return real(scores, labels)

    monkeypatch.setattr(tr_mod, "cross_entropy", spy)
    train(small_cfg(mode="rotation", epochs=1, batch_size=4), *tiny)
    assert list(seen["labels"]) == [0] * 4 + [1] * 4 + [2] * 4 + [3] * 4


@pytest.mark.parametrize("mode", ["baseline", "rotation", "pirl", "dcl", "db_gce"])
def test_every_mode_runs(tiny, mode):
    cfg = small_cfg(mode=mode, epochs=1, gce=GceConfig(k=2, warmup_epochs=0))
    if mode == "pirl":
        cfg = cfg.with_overrides(pirl=type(cfg.pirl)(negatives=5, resize=24, patch_size=8))
    _, hist = train(cfg, *tiny)
    assert len(hist) == 1 and np.isfinite(hist[0].train_total_loss)


def test_semi_supervised_fraction_shrinks_epoch(tiny):
    cfg = small_cfg(split=SplitSpec(0.4, 0), batch_size=1)
    with T.default_dtype(np.float32):
        from sslfgvc.dataset import split_semi_supervised
        sub = split_semi_supervised(tiny[0], cfg.split)
    assert len(sub) == 8 and sorted(np.bincount(sub.labels)) == [2, 2, 2, 2]


def test_gce_k_too_large(tiny):
    with pytest.raises(ValueError):
        train(small_cfg(mode="db_gce", gce=GceConfig(k=4)), *tiny)


def test_invalid_config():
    with pytest.raises(ConfigError):
        small_cfg(rotation_lambda=1.5).validate()


# -- metrics files -------------------------------------------------------

def test_metrics_files(tiny, tmp_path):
    cfg = small_cfg(epochs=3)
    _, hist = train(cfg, *tiny)
    write_metrics(hist, tmp_path / "m.csv", tmp_path / "s.json", cfg)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].split(",") == CSV_HEADER
    assert read_metrics(tmp_path / "m.csv") == hist
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["best_top1"] == max(r.test_top1 for r in hist)
    assert summary["config"]["epochs"] == 3
    with pytest.raises(ValueError):
        write_metrics([], tmp_path / "x.csv", tmp_path / "x.json")
