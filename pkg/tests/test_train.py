import csv

import numpy as np
import pytest

from gdcaf import autodiff as ad
from gdcaf.data import WindowSet, WindowTask, gen_synthetic, split
from gdcaf.model import GDCAF, ModelConfig
from gdcaf.nn import Module
from gdcaf.train import (
    AdamState,
    EarlyStopping,
    NumericAbort,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    evaluate_loss,
    fit,
    mse_loss,
)


def test_defaults():
    c = TrainConfig()
    assert (c.max_epochs, c.early_stop_patience, c.lr, c.plateau_patience, c.plateau_factor) == (150, 15, 1e-3, 4, 0.1)
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.5)


def test_mse_loss_values():
    assert mse_loss(np.ones(4), np.ones(4)).value[0] == 0
    assert mse_loss(np.ones(4), np.zeros(4)).value[0] == 1


# -- optimizer ---------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = ad.Parameter(np.array([1.0, -2.0]), "p")
    adam_step([p], AdamState(), 1e-3)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = ad.Parameter(np.zeros(3), "p")
    p.grad = np.array([0.5, -3.0, 1e-3])
    adam_step([p], AdamState(), 1e-3)
    # m_hat / sqrt(v_hat) == sign(g) after bias correction; eps shrinks it slightly
    expected = -1e-3 * np.sign(p.grad) * np.abs(p.grad) / (np.abs(p.grad) + 1e-8)
    np.testing.assert_allclose(p.value, expected, rtol=1e-12)


def test_adam_constant_gradient_drifts_monotonically():
    p = ad.Parameter(np.zeros(1), "p")
    state, trace = AdamState(), []
    for _ in range(10):
        p.grad = np.array([0.2])
        adam_step([p], state, 1e-2)
        trace.append(p.value[0])
    assert np.all(np.diff(trace) < 0)


# -- scheduler / stopper -------------------------------------------------------


def test_flat_validation_protocol():
    sched, stop = PlateauScheduler(1e-3), EarlyStopping()
    cuts, stopped_at = [], None
    for epoch in range(1, 100):
        if sched.step(0.5):
            cuts.append(epoch)
        if stop.step(epoch, 0.5):
            stopped_at = epoch
            break
    assert cuts == [5, 9, 13]
    assert stopped_at == 16
    assert sched.lr == pytest.approx(1e-6)


def test_improvement_resets_plateau_count():
    sched = PlateauScheduler(1.0)
    seq = [1.0, 1.0, 1.0, 1.0, 0.9, 1.0, 1.0, 1.0, 1.0]
    cuts = [e for e, v in enumerate(seq, 1) if sched.step(v)]
    assert cuts == [9]


class _Frozen(Module):
    """Model stub with one unused parameter: constant predictions, flat loss."""

    def __init__(self):
        self.w = ad.Parameter(np.zeros(1, np.float32), "w")

    def __call__(self, x):
        zero = ad.scale(ad.sum_all(self.w), 0.0)
        return ad.add(ad.constant(np.zeros(x.shape[:2] + x.shape[3:], np.float32)), zero)

    def predict(self, x):
        return self(x).value


def _windows(n_nodes=2, hours=300, hw=8):
    ds = gen_synthetic(0, hours, n_nodes, hw, hw)
    task = WindowTask(6, 1, n_nodes)
    sp = split(ds, task, 0)
    return WindowSet(ds.frames, sp.train[:8], task), WindowSet(ds.frames, sp.val[:4], task)


def test_fit_follows_protocol_on_frozen_model(tmp_path):
    train, val = _windows()
    res = fit(_Frozen(), train, val, TrainConfig(max_epochs=150), log_path=tmp_path / "log.csv")
    assert res.stopped_early and len(res.log) == 16 and res.best_epoch == 1
    lrs = [r.lr for r in res.log]
    # a cut after epoch e takes effect from epoch e + 1
    assert lrs[:5] == [1e-3] * 5 and lrs[5] == pytest.approx(1e-4)
    assert lrs[9] == pytest.approx(1e-5) and lrs[13] == pytest.approx(1e-6)
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [int(r["epoch"]) for r in rows] == list(range(1, 17))
    assert set(rows[0]) == {"epoch", "train_mse", "val_mse", "lr", "seconds"}


def test_fit_is_deterministic_and_restores_best():
    train, val = _windows()
    cfg = ModelConfig.for_case(4, n_nodes=2, t_in=6, heads=1, blocks=1, height=8, width=8)
    tc = TrainConfig(max_epochs=3, batch_size=4, seed=1)
    a, b = GDCAF(cfg, seed=0), GDCAF(cfg, seed=0)
    ra, rb = fit(a, train, val, tc), fit(b, train, val, tc)
    assert [(r.train_mse, r.val_mse) for r in ra.log] == [(r.train_mse, r.val_mse) for r in rb.log]
    assert evaluate_loss(a, val) == pytest.approx(ra.best_val, rel=1e-12)


def test_nan_aborts_with_context():
    train, val = _windows()
    cfg = ModelConfig.for_case(4, n_nodes=2, t_in=6, heads=1, blocks=1, height=8, width=8)
    model = GDCAF(cfg, seed=0)
    model.expand.stage1.pointwise.value[0, 0, 0] = np.nan
    with pytest.raises(NumericAbort, match="epoch 1, batch 0"):
        fit(model, train, val, TrainConfig(max_epochs=1))


def test_empty_sets_rejected():
    train, val = _windows()
    empty = WindowSet(train.frames, [], train.task)
    with pytest.raises(ValueError):
        fit(_Frozen(), empty, val, TrainConfig())
