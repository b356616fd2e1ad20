import numpy as np
import pytest

from histoformer.autograd import Tape, Tensor, backward
from histoformer.errors import ConfigError, StateError
from histoformer.losses import total_loss
from histoformer.model import ModelConfig, ParameterStore, init_store, model_forward
from histoformer.optim import TrainConfig, adamw_step, cosine_lr


def scalar_store(value, grad=None):
    st = ParameterStore()
    st.add("p", np.array([value]))
    if grad is not None:
        st["p"].grad = np.array([grad])
    return st


def test_zero_gradient_without_decay_leaves_parameters(rng):
    st = ParameterStore()
    st.add("w", rng.standard_normal((3, 4)))
    before = st["w"].data.copy()
    st["w"].grad = np.zeros((3, 4))
    adamw_step(st, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(st["w"].data, before)


def test_first_step_moves_by_learning_rate():
    st = scalar_store(1.0, grad=1.0)
    adamw_step(st, lr=0.1, weight_decay=0.0)
    assert st["p"].data[0] == pytest.approx(0.9, abs=1e-8)
    assert st.step == 1


def test_first_step_update_is_sign_of_gradient_for_any_scale():
    # |g| >> eps, so the bias-corrected ratio m/sqrt(v) is sign(g)
    for g in (0.01, -3.0, 250.0):
        st = scalar_store(0.0, grad=g)
        adamw_step(st, lr=0.01, weight_decay=0.0)
        assert st["p"].data[0] == pytest.approx(-0.01 * np.sign(g), rel=1e-5)


def test_decay_is_decoupled_from_the_gradient():
    st = scalar_store(2.0, grad=0.0)
    adamw_step(st, lr=0.1, weight_decay=0.5)
    assert st["p"].data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_moments_follow_the_update_formulas():
    st = scalar_store(1.0, grad=2.0)
    adamw_step(st, lr=0.1, weight_decay=0.0)
    st["p"].grad = np.array([-1.0])
    adamw_step(st, lr=0.1, weight_decay=0.0)
    m = 0.9 * (0.1 * 2.0) + 0.1 * -1.0
    v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0
    got_m, got_v = st.moments["p"]
    assert got_m[0] == pytest.approx(m, abs=1e-15) and got_v[0] == pytest.approx(v, abs=1e-15)
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    p1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
    assert st["p"].data[0] == pytest.approx(p1 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-15)


def test_step_before_backward_is_a_state_error():
    with pytest.raises(StateError, match="backward"):
        adamw_step(scalar_store(1.0), lr=0.1)


def test_parameters_without_gradient_still_decay():
    st = scalar_store(1.0, grad=1.0)
    st.add("q", np.array([4.0]))
    adamw_step(st, lr=0.1, weight_decay=0.5)
    assert st["q"].data[0] == pytest.approx(4.0 * 0.95)


def _one_step(seed):
    cfg = ModelConfig.tiny()
    st = init_store(cfg, seed=seed)
    x = np.random.default_rng(seed).random((2, 3, 16, 16)).astype(np.float32)
    y = np.clip(x * 0.9 + 0.05, 0, 1)
    with Tape() as tape:
        loss = total_loss(model_forward(Tensor(x), cfg, st), y)
    backward(tape, loss)
    adamw_step(st, lr=3e-4)
    return st


def test_one_training_step_is_bitwise_reproducible():
    a, b = _one_step(4), _one_step(4)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a["out.w"].data, 0)


# ------------------------------------------------------------- schedule

def test_schedule_endpoints_and_midpoint():
    cfg = TrainConfig(iterations=101, lr_init=3e-4, lr_final=1e-6)
    assert cosine_lr(0, cfg) == 3e-4
    assert abs(cosine_lr(100, cfg) - 1e-6) <= 1e-12
    assert cosine_lr(50, cfg) == pytest.approx((3e-4 + 1e-6) / 2, abs=1e-15)


def test_schedule_is_constant_through_the_warm_span_then_non_increasing():
    cfg = TrainConfig(iterations=60, warm_iters=20)
    lrs = [cosine_lr(s, cfg) for s in range(60)]
    assert set(lrs[:20]) == {cfg.lr_init}
    assert all(a >= b for a, b in zip(lrs[19:], lrs[20:]))
    assert lrs[-1] == cfg.lr_final


def test_degenerate_schedules():
    assert cosine_lr(0, TrainConfig(iterations=1)) == 1e-6
    assert cosine_lr(4, TrainConfig(iterations=5, warm_iters=5)) == 3e-4


@pytest.mark.parametrize("kw,match", [
    (dict(iterations=0), "iterations"),
    (dict(lr_init=1e-6, lr_final=1e-4), "lr_final"),
    (dict(patch_size=60), "multiple of 8"),
    (dict(warm_iters=600), "warm_iters"),
    (dict(batch_size=0), "batch_size"),
    (dict(alpha=-1.0), "alpha"),
])
def test_invalid_training_configs(kw, match):
    with pytest.raises(ConfigError, match=match):
        TrainConfig(**kw)
