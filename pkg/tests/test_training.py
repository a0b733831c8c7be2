import io
import math
from dataclasses import replace

import numpy as np
import pytest

from cassnat.data import SyntheticTaskSpec, generate_synthetic
from cassnat.errors import ConfigError
from cassnat.gradsuite import toy_config
from cassnat.losses import LossConfig
from cassnat.model import ATBaseline, CassNat
from cassnat.tensor import Tensor
from cassnat.training import (
    Adam, TrainConfig, average_params, clip_grads, edit_distance, evaluate, noam_lr, train,
)

SPEC = SyntheticTaskSpec(vocab_size=4, feat_dim=8, len_min=1, len_max=3, dur_min=4, dur_max=6)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(SPEC, 24, stream=1), generate_synthetic(SPEC, 8, stream=2)


def fresh(kind="nat", seed=0):
    cfg = toy_config(vocab=5, dropout=0.1)
    return CassNat(cfg, seed=seed) if kind == "nat" else ATBaseline(cfg, seed=seed)


def test_noam_schedule():
    assert noam_lr(400, 2e-3, 400) == pytest.approx(2e-3)
    assert noam_lr(200, 2e-3, 400) == pytest.approx(1e-3)
    assert noam_lr(1600, 2e-3, 400) == pytest.approx(1e-3)
    assert noam_lr(0, 2e-3, 400) == noam_lr(1, 2e-3, 400) > 0
    lrs = [noam_lr(s, 1.0, 50) for s in range(1, 200)]
    assert np.argmax(lrs) == 49


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 0.0])
    opt = Adam({"p": p})
    opt.step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)
    assert opt.t == 1


def test_clip_grads():
    a, b = Tensor(np.zeros(2)), Tensor(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grads({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    assert clip_grads({"a": a, "b": b}, 10.0) == pytest.approx(1.0)


@pytest.mark.parametrize("a,b,d", [([], [], 0), ([1, 2, 3], [], 3), ([1, 2, 3], [1, 3], 1),
                                   ([1, 2], [2, 1], 2), ([4, 5, 6], [4, 7, 6, 8], 2)])
def test_edit_distance(a, b, d):
    assert edit_distance(a, b) == d == edit_distance(b, a)


def test_average_params():
    avg = average_params([{"w": np.array([1.0, 2.0])}, {"w": np.array([3.0, 6.0])}])
    np.testing.assert_allclose(avg["w"], [2.0, 4.0])


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(peak_lr=-1)


def test_zero_lr_leaves_params(tiny_data):
    m = fresh()
    before = {k: p.data.copy() for k, p in m.params.items()}
    res = train(m, *tiny_data, TrainConfig(epochs=1, batch_size=8, peak_lr=0.0, n_average=1), LossConfig())
    for k, a in before.items():
        np.testing.assert_array_equal(res.params[k].data, a)


@pytest.mark.parametrize("kind", ["nat", "at"])
def test_loss_decreases(tiny_data, kind):
    m = fresh(kind)
    res = train(m, tiny_data[0], tiny_data[1][:2], TrainConfig(epochs=3, batch_size=8, peak_lr=5e-3, warmup=4),
                LossConfig())
    losses = [r[1] for r in res.loss_log]
    assert len(losses) == 9 and all(math.isfinite(v) for v in losses)
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_log_rows_and_history(tiny_data):
    buf = io.StringIO()
    res = train(fresh(), *tiny_data, TrainConfig(epochs=2, batch_size=12), LossConfig(), log_file=buf)
    rows = [line.split("\t") for line in buf.getvalue().splitlines()]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4] and all(len(r) == 6 for r in rows)
    assert [h["epoch"] for h in res.history] == [1, 2]
    assert len(res.state.best) == 2


def test_same_seed_is_bit_identical(tiny_data):
    cfg = TrainConfig(epochs=1, batch_size=8)
    a = train(fresh(), *tiny_data, cfg, LossConfig())
    b = train(fresh(), *tiny_data, cfg, LossConfig())
    assert a.loss_log == b.loss_log
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_resume_matches_uninterrupted(tiny_data):
    full = train(fresh(), *tiny_data, TrainConfig(epochs=2, batch_size=8, n_average=1), LossConfig())
    half = train(fresh(), *tiny_data, TrainConfig(epochs=1, batch_size=8, n_average=1), LossConfig())
    rest = train(fresh(), *tiny_data, TrainConfig(epochs=2, batch_size=8, n_average=1), LossConfig(),
                 resume=half.state)
    assert half.loss_log + rest.loss_log == full.loss_log
    for k in full.params:
        np.testing.assert_array_equal(rest.params[k].data, full.params[k].data)


def test_best_snapshots_are_averaged(tiny_data):
    res = train(fresh(), *tiny_data, TrainConfig(epochs=3, batch_size=12, n_average=2), LossConfig())
    best = res.state.best
    assert len(best) == 2 and best[0][0] >= best[1][0]
    expect = average_params([b[2] for b in best])
    for k, a in expect.items():
        np.testing.assert_array_equal(res.params[k].data, a)


def test_evaluate_counts(tiny_data):
    class Echo:
        cfg = None

        def decode_greedy(self, feats):
            from types import SimpleNamespace
            return [SimpleNamespace(tokens=[1]) for _ in feats]

    data = [(np.zeros((4, 8)), [1]), (np.zeros((4, 8)), [2, 3])]
    ev = evaluate(Echo(), data)
    assert ev.token_accuracy == pytest.approx(1 - 2 / 3) and ev.sequence_error == 0.5


def test_loss_strictly_decreases_on_fixed_batch():
    from cassnat.cli import load_split
    from cassnat.io import load_run_config, shipped_config

    rc = load_run_config(shipped_config())
    batch = load_split(rc, "train", 32)
    m = CassNat(replace(rc.model, dropout=0.0), seed=0)
    res = train(m, batch, batch[:4], TrainConfig(epochs=10, batch_size=32, peak_lr=1e-3, warmup=10), rc.loss)
    losses = [r[1] for r in res.loss_log]
    assert len(losses) == 10
    assert all(a > b for a, b in zip(losses, losses[1:])), losses


def test_encoder_from_at_speeds_up_training():
    from cassnat.model import init_encoder_from_at

    spec = SyntheticTaskSpec(vocab_size=4, feat_dim=8, len_min=1, len_max=3, dur_min=4, dur_max=6)
    tr, va = generate_synthetic(spec, 96, stream=1), generate_synthetic(spec, 8, stream=2)
    cfg = toy_config(vocab=5)
    sched = TrainConfig(epochs=2, batch_size=16, peak_lr=5e-3, warmup=20)
    at = train(ATBaseline(cfg, seed=1), tr, va, replace(sched, epochs=6), LossConfig())
    mean_loss = {}
    for init in (False, True):
        m = CassNat(cfg, seed=2)
        if init:
            m.params = init_encoder_from_at(at.params, m.params)
        mean_loss[init] = np.mean([r[1] for r in train(m, tr, va, sched, LossConfig()).loss_log])
    assert mean_loss[True] < mean_loss[False]



def test_validation_is_never_masked(tiny_data):
    from cassnat.data import SpecMaskConfig

    cfg = TrainConfig(epochs=1, batch_size=8, n_average=1, spec=SpecMaskConfig(2, 3, 2, 2))
    res = train(fresh(), *tiny_data, cfg, LossConfig())
    m = fresh()
    m.params = res.params
    assert evaluate(m, tiny_data[1]).token_accuracy == res.history[-1]["val_token_acc"]
