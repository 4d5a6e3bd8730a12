import csv
import math

import pytest
import torch

from conftest import small_model
from picircuits.data import synthetic_mixture
from picircuits.train import (HISTORY_COLUMNS, AdamState, TrainConfig, adam_step, backward, lr_at, mean_nll, train)


@pytest.mark.parametrize("step,expected", [(0, 5e-3), (250, 2.55e-3), (500, 5e-3), (1000, 5e-3)])
def test_lr_schedule(step, expected):
    assert lr_at(step) == pytest.approx(expected, rel=1e-12)


def test_lr_schedule_bounds():
    assert all(1e-4 <= lr_at(s) <= 5e-3 for s in range(0, 1500, 7))
    assert lr_at(499) == pytest.approx(1e-4, rel=1e-3)


def test_adam_first_step_moves_by_lr():
    p = torch.ones(3, dtype=torch.float64)
    g = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    adam_step([p], [g], AdamState.zeros_like([p]), lr=0.1)
    torch.testing.assert_close(p, torch.tensor([0.9, 1.1, 0.9], dtype=torch.float64), rtol=0, atol=1e-6)


def test_adam_zero_gradient_is_noop():
    p = torch.randn(4, dtype=torch.float64)
    before = p.clone()
    adam_step([p], [torch.zeros(4, dtype=torch.float64)], AdamState.zeros_like([p]), lr=0.1)
    assert torch.equal(p, before)


def test_adam_weight_decay_and_clamp():
    p = torch.full((2,), 2.0, dtype=torch.float64)
    adam_step([p], [torch.zeros(2, dtype=torch.float64)], AdamState.zeros_like([p]), lr=0.1, weight_decay=0.5)
    torch.testing.assert_close(p, torch.full((2,), 1.9, dtype=torch.float64))
    q = torch.full((2,), 1e-30, dtype=torch.float64)
    adam_step([q], [torch.zeros(2, dtype=torch.float64)], AdamState.zeros_like([q]), lr=0.1, clamp_min=1e-19)
    assert torch.all(q == 1e-19)


def test_adam_shape_mismatch():
    p = torch.ones(2, dtype=torch.float64)
    with pytest.raises(ValueError):
        adam_step([p], [torch.ones(3, dtype=torch.float64)], AdamState.zeros_like([p]), lr=0.1)


def test_backward_values_and_errors():
    a = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    b = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    ga, gb = backward((a * a).sum(), [a, b])
    assert ga.tolist() == [2.0, 4.0] and gb.item() == 0.0
    with pytest.raises(ValueError):
        backward(a * 2, [a])


def test_config_validation():
    for bad in (dict(cycle_steps=0), dict(patience=0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def toy():
    ds = synthetic_mixture(300, height=2, width=2, seed=0)
    return ds.pixels[:240], ds.pixels[240:]


def test_mean_nll_rejects_empty(toy):
    with pytest.raises(ValueError):
        mean_nll(small_model(2, 2, False, "cp", 3, 2), toy[0][:0])


def test_train_rejects_empty(toy):
    with pytest.raises(ValueError):
        train(small_model(2, 2, False, "cp", 3, 2), toy[0][:0], toy[1])


def test_infinite_delta_stops_after_patience(toy):
    cfg = TrainConfig(batch_size=32, cycle_steps=2, delta=math.inf, patience=5, max_steps=1000)
    hist = train(small_model(2, 2, False, "cp", 3, 2), *toy, cfg)
    assert hist.stopped_early
    assert len(hist.records) == 1 + 5
    assert hist.records[-1].step == 10


def test_max_steps_and_records(toy):
    cfg = TrainConfig(batch_size=32, cycle_steps=4, max_steps=10)
    seen = []
    hist = train(small_model(2, 2, False, "cp", 3, 2), *toy, cfg, progress=seen.append)
    assert [r.step for r in hist.records] == [0, 4, 8, 10]
    assert seen == hist.records
    assert math.isnan(hist.records[0].train_nll)


def test_restores_best_state(toy):
    model = small_model(2, 2, False, "cp", 3, 2)
    hist = train(model, *toy, TrainConfig(batch_size=32, cycle_steps=3, max_steps=15))
    assert mean_nll(model, toy[1]) == pytest.approx(hist.best_valid_nll, rel=1e-12)
    assert hist.best_valid_nll == min(hist.valid_nll)


@pytest.mark.parametrize("mode", ["pic", "pc"])
def test_training_is_deterministic(toy, mode):
    cfg = TrainConfig(batch_size=32, cycle_steps=3, max_steps=9, seed=7)
    runs = [train(small_model(2, 2, False, "cp", 3, 2, mode=mode), *toy, cfg).valid_nll for _ in range(2)]
    assert runs[0] == runs[1]


def test_pc_training_keeps_floor(toy):
    model = small_model(2, 2, False, "tucker", 2, 2, mode="pc")
    train(model, *toy, TrainConfig(batch_size=32, cycle_steps=5, max_steps=10))
    assert all(float(p.detach().min()) >= 1e-19 for p in model.parameters())


def test_history_csv(toy, tmp_path):
    hist = train(small_model(2, 2, False, "cp", 3, 2), *toy, TrainConfig(batch_size=32, cycle_steps=2, max_steps=4))
    path = tmp_path / "h.csv"
    hist.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == 1 + len(hist.records)
