import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awdlm.autodiff import ShapeMismatch, Tensor
from awdlm.optim import (AdamState, AsgdAverager, GroupOptimizer, NotTriggered, NtAsgdMonitor, adam_step,
                         apply_weight_decay, asgd_average, nt_asgd_observe, sgd_step)


def test_sgd_examples():
    assert sgd_step(np.array(1.0), np.array(0.0), 0.1) == 1.0
    assert sgd_step(np.array(1.0), np.array(2.0), 0.1) == pytest.approx(0.8, abs=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        sgd_step(np.zeros(3), np.zeros(2), 0.1)


@pytest.mark.parametrize("lr", [0.1, 1.0, 1.9])
def test_sgd_contracts_on_quadratic(lr):
    x = np.array(3.0)
    for _ in range(500):
        x = sgd_step(x, x, lr)  # gradient of x^2 / 2
    # closed form: x_n = (1 - lr)^n x_0
    assert abs(x) < 1e-6
    assert x == pytest.approx(3.0 * (1 - lr) ** 500, abs=1e-12)


def test_adam_zero_gradient_is_identity():
    p = np.array([1.0, -2.0])
    s = AdamState.like(p)
    for _ in range(5):
        p = adam_step(p, np.zeros(2), s, 0.1)
    assert np.array_equal(p, [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.01])
def test_adam_first_step_is_signed_lr(g):
    s = AdamState.like(np.zeros(1))
    p = adam_step(np.zeros(1), np.array([g]), s, 0.1)
    assert p[0] == pytest.approx(-0.1 * math.copysign(1, g), rel=1e-6)


def test_adam_matches_scalar_hand_computation():
    grads = [0.5, -1.0, 2.0]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p, s = np.array([1.0]), AdamState.like(np.zeros(1))
    for g in grads:
        p = adam_step(p, np.array([g]), s, lr, b1, b2, eps)
    assert p[0] == pytest.approx(x, abs=1e-15)
    assert s.t == 3


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=1, max_size=8))
def test_adam_first_step_bounded_by_lr(g):
    g = np.array(g)
    p = adam_step(np.zeros_like(g), g, AdamState.like(g), 0.05)
    assert (np.abs(p) <= 0.05 * (1 + 1e-9)).all()


def test_weight_decay_examples():
    assert apply_weight_decay(np.array(1.0), 0.1, 0.1) == pytest.approx(0.99, abs=1e-15)
    p = np.array([1.5, -2.0])
    assert apply_weight_decay(p, 0.1, 0.0) is p
    with pytest.raises(ValueError):
        apply_weight_decay(p, 0.1, -1.0)


def test_weight_decay_compounds():
    p = np.array([2.0])
    for _ in range(25):
        p = apply_weight_decay(p, 0.05, 0.3)
    assert p[0] == pytest.approx(2.0 * (1 - 0.05 * 0.3) ** 25, rel=1e-13)


def test_nt_asgd_insufficient_history():
    m = NtAsgdMonitor(patience=5)
    for loss in [5, 4, 3]:
        m.observe(loss)
    assert not m.triggered


def test_nt_asgd_crafted_sequence():
    # rule trace: index 3 compares 3.5 to min(5, 4) = 4 (no); index 4 compares 3.6 to min(5, 4, 3) = 3
    m = NtAsgdMonitor(patience=2)
    fired = [m.observe(x) for x in [5, 4, 3, 3.5, 3.6]]
    assert fired == [False, False, False, False, True]
    assert m.trigger_step == 4


@settings(max_examples=50)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=60, unique=True), st.integers(1, 8))
def test_nt_asgd_never_fires_on_strictly_decreasing(losses, n):
    m = NtAsgdMonitor(patience=n)
    for x in sorted(losses, reverse=True):
        nt_asgd_observe(m, x)
    assert not m.triggered


def test_nt_asgd_trigger_is_sticky():
    m = NtAsgdMonitor(patience=1)
    for x in [1.0, 2.0, 0.5, 0.1, 0.01]:
        m.observe(x)
    assert m.triggered and m.trigger_step == 1


def test_averager_examples():
    avg = AsgdAverager()
    with pytest.raises(NotTriggered):
        avg.update([np.ones(2)])
    avg.start()
    assert asgd_average([np.array([1.0])], avg)[0][0] == 1.0
    assert asgd_average([np.array([3.0])], avg)[0][0] == 2.0


def test_averager_matches_batch_mean():
    rng = np.random.default_rng(0)
    iterates = [[rng.normal(size=(3, 4)), rng.normal(size=5)] for _ in range(137)]
    avg = AsgdAverager()
    avg.start()
    for it in iterates:
        avg.update(it)
    for k, got in enumerate(avg.average()):
        ref = np.mean([it[k] for it in iterates], axis=0)
        assert np.max(np.abs(got - ref)) < 1e-12


def test_averager_copies_its_inputs():
    avg = AsgdAverager()
    avg.start()
    p = np.array([1.0])
    avg.update([p])
    p[0] = 100.0
    assert avg.average()[0][0] == 1.0


def _params(rng):
    return [[Tensor(rng.normal(size=(2, 3)), requires_grad=True)],
            [Tensor(rng.normal(size=4), requires_grad=True), Tensor(rng.normal(size=2), requires_grad=True)]]


@pytest.mark.parametrize("mode", ["adam", "sgd"])
def test_group_optimizer_skips_frozen_groups(mode):
    rng = np.random.default_rng(1)
    groups = _params(rng)
    opt = GroupOptimizer(groups, mode, weight_decay=0.1, clip=0.5)
    before = [p.data.copy() for g in groups for p in g]
    for _ in range(10):
        for g in groups:
            for p in g:
                p.grad = rng.normal(size=p.data.shape)
        opt.step([0.1, 0.1], frozen=[True, False])
    after = [p.data for g in groups for p in g]
    assert before[0].tobytes() == after[0].tobytes()
    assert not np.array_equal(before[1], after[1])
    assert opt.adam[0][0].t == 0


def test_group_optimizer_all_frozen_changes_nothing():
    rng = np.random.default_rng(2)
    groups = _params(rng)
    opt = GroupOptimizer(groups, "adam", weight_decay=0.1)
    before = [p.data.tobytes() for g in groups for p in g]
    for g in groups:
        for p in g:
            p.grad = np.ones_like(p.data)
    opt.step([1.0, 1.0], frozen=[True, True])
    assert [p.data.tobytes() for g in groups for p in g] == before


def test_group_optimizer_clips_global_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = GroupOptimizer([[p]], "sgd", clip=1.0)
    p.grad = np.array([3.0, 4.0])
    opt.step([1.0])
    assert np.allclose(p.data, [-0.6, -0.8], atol=1e-15)


def test_group_optimizer_state_roundtrip():
    rng = np.random.default_rng(3)
    groups = _params(rng)
    opt = GroupOptimizer(groups, "adam")
    for g in groups:
        for p in g:
            p.grad = np.ones_like(p.data)
    opt.step([0.1, 0.1])
    saved = opt.state_dict()
    opt.step([0.1, 0.1])
    opt.load_state_dict(saved)
    assert opt.adam[1][0].t == 1
    assert np.array_equal(opt.adam[1][0].m, saved["adam"][1][0][0])
