import numpy as np
import pytest

from ape.errors import ConfigError, NumericError
from ape.optim import AdamW, Schedule
from ape.tensor import Tensor, precision


class TestSchedule:
    def test_exact_anchor_points(self):
        eta, w, t = 3e-4, 100, 1100
        sched = Schedule(eta, w, t)
        assert sched.lr_at(0) == 0.0
        assert sched.lr_at(w) == pytest.approx(eta, rel=1e-12)
        assert sched.lr_at(w + (t - w) // 2) == pytest.approx(eta / 2, rel=1e-12)
        assert sched.lr_at(t) == pytest.approx(0.0, abs=1e-18)

    def test_linear_during_warmup(self):
        sched = Schedule(1.0, 10, 20)
        for s in range(10):
            assert sched.lr_at(s) == pytest.approx(s / 10, rel=1e-12)

    def test_continuous_at_warmup_boundary(self):
        sched = Schedule(1e-3, 50, 500)
        before = sched.lr_at(49)
        at = sched.lr_at(50)
        after = sched.lr_at(51)
        assert before < at and after < at
        assert at - before < 2.5e-5 and at - after < 2.5e-7

    def test_out_of_range_step(self):
        sched = Schedule(1e-3, 5, 10)
        with pytest.raises(ConfigError):
            sched.lr_at(11)
        with pytest.raises(ConfigError):
            sched.lr_at(-1)

    def test_warmup_must_be_below_total(self):
        with pytest.raises(ConfigError):
            Schedule(1e-3, 10, 10)


def single_param(value, name="p"):
    t = Tensor(np.asarray([value]), requires_grad=True, name=name)
    return {name: t}


class TestAdamW:
    def test_first_step_hand_case(self):
        # m_hat = v_hat = 1 at t = 1, so the update is lr / (1 + eps) ~ 0.1
        params = single_param(1.0)
        opt = AdamW(params, weight_decay=0.0)
        opt.step({"p": np.asarray([1.0], dtype=np.float32)}, lr=0.1)
        assert params["p"].data[0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_grad_fresh_state_no_change(self):
        params = single_param(1.0)
        opt = AdamW(params, weight_decay=0.0)
        opt.step({"p": np.zeros(1, dtype=np.float32)}, lr=0.1)
        assert params["p"].data[0] == 1.0

    def test_pure_decoupled_decay(self):
        # theta - lr * wd * theta = 1 - 0.1 * 0.01
        params = single_param(1.0)
        opt = AdamW(params, weight_decay=0.01)
        opt.step({"p": np.zeros(1, dtype=np.float32)}, lr=0.1)
        assert params["p"].data[0] == pytest.approx(0.999, rel=1e-6)

    def test_temperature_exempt_from_decay(self):
        params = {"log_scale": Tensor(np.asarray([2.0]), requires_grad=True, name="log_scale")}
        opt = AdamW(params, weight_decay=0.5)
        opt.step({"log_scale": np.zeros(1, dtype=np.float32)}, lr=0.1)
        assert params["log_scale"].data[0] == 2.0

    def test_non_finite_gradient_rejected(self):
        params = single_param(1.0)
        opt = AdamW(params)
        with pytest.raises(NumericError, match="non-finite"):
            opt.step({"p": np.asarray([np.nan], dtype=np.float32)}, lr=0.1)

    def test_negative_lr_rejected(self):
        opt = AdamW(single_param(1.0))
        with pytest.raises(ConfigError):
            opt.step({"p": np.zeros(1, dtype=np.float32)}, lr=-1.0)


def reference_adam(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain Adam, written independently as the oracle."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta


class TestEquivalences:
    def test_zero_decay_equals_plain_adam_bitwise_in_float64(self):
        with precision(np.float64):
            rng = np.random.default_rng(3)
            theta0 = rng.normal(size=8)
            grads = [rng.normal(size=8) for _ in range(20)]
            params = {"p": Tensor(theta0.copy(), requires_grad=True, name="p")}
            opt = AdamW(params, weight_decay=0.0)
            for g in grads:
                opt.step({"p": g.astype(np.float64)}, lr=0.01)
            expected = reference_adam(theta0, grads, lr=0.01)
            np.testing.assert_array_equal(params["p"].data, expected)

    def test_decay_displacement_is_lr_wd_theta(self):
        # same state and gradient: the only difference is -lr * wd * theta
        with precision(np.float64):
            rng = np.random.default_rng(5)
            theta0 = rng.normal(size=6)
            g_hist = [rng.normal(size=6) for _ in range(7)]
            p_decay = {"p": Tensor(theta0.copy(), requires_grad=True, name="p")}
            p_plain = {"p": Tensor(theta0.copy(), requires_grad=True, name="p")}
            o_decay = AdamW(p_decay, weight_decay=0.1)
            o_plain = AdamW(p_plain, weight_decay=0.0)
            lr = 0.02
            for g in g_hist:
                g64 = g.astype(np.float64)
                before = p_decay["p"].data.copy()
                m_before = o_decay.m["p"].copy()
                v_before = o_decay.v["p"].copy()
                t_before = o_decay.t
                o_decay.step({"p": g64}, lr=lr)
                # replay the same step without decay from identical state
                o_plain.m["p"] = m_before
                o_plain.v["p"] = v_before
                o_plain.t = t_before
                p_plain["p"].data = before.copy()
                o_plain.step({"p": g64}, lr=lr)
                displacement = p_decay["p"].data - p_plain["p"].data
                np.testing.assert_allclose(displacement, -lr * 0.1 * before, rtol=1e-9)
