"""Schedule, corruption, reverse steps, guidance: checked against direct
product oracles, closed-form inversions, and Monte-Carlo statistics."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointdiff.diffusion import (DiffusionState, cfg_predict, corrupt,
                                 ddim_step, ddim_timesteps, ddim_update,
                                 ddpm_step, joint_loss, make_schedule,
                                 posterior_sigma, sample_noise_with_offset)


def cumprod_oracle(num_steps, beta_start, beta_end):
    """Direct running product over python floats, no numpy."""
    out = []
    prod = 1.0
    for i in range(num_steps):
        beta = beta_start + (beta_end - beta_start) * i / (num_steps - 1)
        prod *= 1.0 - beta
        out.append(prod)
    return out


class TestSchedule:
    def test_default_schedule_terminal_alpha_bar(self):
        sched = make_schedule(1000, 1e-4, 0.02)
        oracle = cumprod_oracle(1000, 1e-4, 0.02)
        assert abs(sched.alpha_bars[-1] - oracle[-1]) < 1e-12
        # frozen magnitude from the oracle: ~4.04e-5 at T=1000
        assert abs(sched.alpha_bars[-1] - 4.04e-5) < 2e-7
        assert np.abs(sched.alpha_bars - np.asarray(oracle)).max() < 1e-12

    def test_two_step_hand_product(self):
        sched = make_schedule(2, 0.5, 0.5)
        assert np.allclose(sched.betas, [0.5, 0.5])
        assert np.allclose(sched.alpha_bars, [0.5, 0.25])

    def test_monotone_decreasing(self):
        sched = make_schedule(100, 1e-3, 0.05)
        assert np.all(np.diff(sched.alpha_bars) < 0)
        assert sched.alpha_bars[0] == 1.0 - sched.betas[0]

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            make_schedule(1)
        with pytest.raises(ValueError):
            make_schedule(10, 0.0, 0.1)
        with pytest.raises(ValueError):
            make_schedule(10, 0.2, 0.1)
        with pytest.raises(ValueError):
            make_schedule(10, 0.1, 1.0)

    @given(st.integers(2, 500), st.floats(1e-6, 0.01), st.floats(0.011, 0.5))
    @settings(max_examples=30, deadline=None)
    def test_property_consistent_with_oracle(self, n, bs, be):
        sched = make_schedule(n, bs, be)
        oracle = cumprod_oracle(n, bs, be)
        assert np.abs(sched.alpha_bars - np.asarray(oracle)).max() < 1e-7
        assert np.all(sched.alpha_bars > 0)
        assert np.all(np.diff(sched.alpha_bars) < 0)


class TestCorrupt:
    def test_t0_nearly_clean(self):
        sched = make_schedule(1000, 1e-4, 0.02)
        x0 = np.random.default_rng(0).standard_normal((1, 3, 8, 8)).astype(np.float32)
        eps = np.random.default_rng(1).standard_normal(x0.shape).astype(np.float32)
        x_t = corrupt(x0, 0, eps, sched)
        # at t=0 the mix is sqrt(1-1e-4) x0 + 1e-2 eps
        assert np.abs(x_t - x0).max() < 0.05

    def test_terminal_mostly_noise(self):
        sched = make_schedule(1000, 1e-4, 0.02)
        x0 = np.full((1, 1, 4, 4), 10.0, dtype=np.float32)
        eps = np.zeros_like(x0)
        x_t = corrupt(x0, 999, eps, sched)
        assert np.abs(x_t).max() < 0.07  # sqrt(4e-5) * 10

    def test_exact_mix_formula(self):
        sched = make_schedule(10, 0.1, 0.2)
        x0 = np.ones((1, 1, 2, 2), dtype=np.float32)
        eps = np.full_like(x0, 2.0)
        t = 4
        ab = sched.alpha_bars[t]
        want = math.sqrt(ab) * 1.0 + math.sqrt(1 - ab) * 2.0
        assert np.allclose(corrupt(x0, t, eps, sched), want, atol=1e-6)

    def test_out_of_range_t_rejected(self):
        sched = make_schedule(10, 0.1, 0.2)
        x0 = np.zeros((1, 1, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError):
            corrupt(x0, 10, x0, sched)
        with pytest.raises(ValueError):
            corrupt(x0, -1, x0, sched)

    def test_shape_mismatch_rejected(self):
        sched = make_schedule(10, 0.1, 0.2)
        with pytest.raises(ValueError):
            corrupt(np.zeros((1, 1, 2, 2), np.float32), 0, np.zeros((1, 1, 2, 3), np.float32), sched)


class TestNoiseOffset:
    def test_zero_offset_is_standard_normal(self):
        rng = np.random.default_rng(5)
        eps = sample_noise_with_offset((2000, 1, 8, 8), 0.0, rng)
        assert abs(eps.mean()) < 0.01
        assert abs(eps.std() - 1.0) < 0.01

    def test_channel_mean_std_matches_closed_form(self):
        # per-image channel mean = mean(N(0,1) over HW) + offset*scalar,
        # so std across draws is sqrt(1/(H*W) + offset^2)
        offset, h = 0.05, 8
        rng = np.random.default_rng(7)
        eps = sample_noise_with_offset((10000, 2, h, h), offset, rng)
        means = eps.mean(axis=(2, 3))
        want = math.sqrt(1.0 / (h * h) + offset ** 2)
        got = means.std()
        assert abs(got - want) / want < 0.10

    def test_offset_shifts_whole_channel_uniformly(self):
        rng = np.random.default_rng(9)
        base_rng = np.random.default_rng(9)
        shape = (3, 2, 4, 4)
        eps = sample_noise_with_offset(shape, 0.5, rng)
        plain = base_rng.standard_normal(shape).astype(np.float32)
        shift = eps - plain
        # the residual is constant within each (image, channel) plane
        assert np.abs(shift - shift[:, :, :1, :1]).max() < 1e-6


class StubEpsModel:
    """Predicts a fixed eps; used to exercise samplers without a UNet."""
    null_class_id = 8
    joint_channels = 1
    image_size = 8

    def __init__(self, eps_x, eps_y):
        self.eps_x, self.eps_y = eps_x, eps_y
        self.calls = []

    def predict(self, x_t, y_t, class_ids, t, cond=None):
        self.calls.append(np.asarray(class_ids).copy())
        return self.eps_x.astype(np.float32), self.eps_y.astype(np.float32)


class TestReverseSteps:
    def setup_method(self):
        self.sched = make_schedule(100, 1e-4, 0.05)
        rng = np.random.default_rng(3)
        self.x0 = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        self.y0 = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
        self.eps_x = rng.standard_normal(self.x0.shape).astype(np.float32)
        self.eps_y = rng.standard_normal(self.y0.shape).astype(np.float32)

    def test_ddim_single_step_inversion_recovers_x0(self):
        # with the true eps, one eta=0 step from any t to clean is exact algebra
        model = StubEpsModel(self.eps_x, self.eps_y)
        for t in [0, 1, 17, 50, 99]:
            state = DiffusionState(x=corrupt(self.x0, t, self.eps_x, self.sched),
                                   y=corrupt(self.y0, t, self.eps_y, self.sched), t=t)
            out = ddim_step(model, state, self.sched, t_prev=-1)
            assert np.abs(out.x - self.x0).max() < 1e-4, f"t={t}"
            assert np.abs(out.y - self.y0).max() < 1e-4
            assert out.t == -1

    def test_ddim_two_hops_equal_one_hop_for_true_eps(self):
        model = StubEpsModel(self.eps_x, self.eps_y)
        t = 60
        state = DiffusionState(x=corrupt(self.x0, t, self.eps_x, self.sched),
                               y=corrupt(self.y0, t, self.eps_y, self.sched), t=t)
        via = ddim_step(model, state, self.sched, t_prev=20)
        via = ddim_step(model, via, self.sched, t_prev=-1)
        direct = ddim_step(model, state, self.sched, t_prev=-1)
        assert np.abs(via.x - direct.x).max() < 1e-4

    def test_ddpm_posterior_formula_and_final_sigma(self):
        # sigma^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t); zero at the last step
        for t in [1, 5, 99]:
            ab, ab_prev = self.sched.alpha_bars[t], self.sched.alpha_bars[t - 1]
            want = math.sqrt(self.sched.betas[t] * (1 - ab_prev) / (1 - ab))
            assert abs(posterior_sigma(self.sched, t) - want) < 1e-12
        assert posterior_sigma(self.sched, 0) == 0.0

    def test_ddpm_chain_deterministic_for_fixed_seed(self):
        model = StubEpsModel(self.eps_x, self.eps_y)

        def run():
            rng = np.random.default_rng(11)
            state = DiffusionState(x=self.x0.copy(), y=self.y0.copy(), t=20)
            while state.t >= 0:
                state = ddpm_step(model, state, self.sched, rng)
            return state

        a, b = run(), run()
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        assert a.t == -1

    def test_ddpm_final_step_injects_no_noise(self):
        model = StubEpsModel(self.eps_x, self.eps_y)
        state = DiffusionState(x=corrupt(self.x0, 0, self.eps_x, self.sched),
                               y=corrupt(self.y0, 0, self.eps_y, self.sched), t=0)

        class Boom:
            def standard_normal(self, *a, **k):
                raise AssertionError("final step drew noise")

        out = ddpm_step(model, state, self.sched, Boom())
        # and with the true eps the final step inverts exactly
        assert np.abs(out.x - self.x0).max() < 1e-4

    def test_ddim_step_range_check(self):
        model = StubEpsModel(self.eps_x, self.eps_y)
        state = DiffusionState(x=self.x0, y=self.y0, t=10)
        with pytest.raises(ValueError):
            ddim_step(model, state, self.sched, t_prev=10)
        with pytest.raises(ValueError):
            ddim_step(model, state, self.sched, t_prev=-2)

    def test_ddim_timesteps_cover_endpoints(self):
        ts = ddim_timesteps(1000, 50)
        assert ts[0] == 999 and ts[-1] == 0
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert ddim_timesteps(100, 100) == list(range(99, -1, -1))


class RecordingModel(StubEpsModel):
    """Returns class-dependent eps so guidance arithmetic is visible."""

    def predict(self, x_t, y_t, class_ids, t, cond=None):
        ids = np.asarray(class_ids, dtype=np.float32)
        self.calls.append(ids.copy())
        scale = ids[:, None, None, None]
        return (self.eps_x * (1 + scale)).astype(np.float32), (self.eps_y * (1 + scale)).astype(np.float32)


class TestGuidance:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.ex = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        self.ey = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)

    def test_scale_one_is_exactly_conditional(self):
        model = RecordingModel(self.ex, self.ey)
        ids = np.array([2, 3])
        gx, gy = cfg_predict(model, self.ex, self.ey, ids, 5, scale=1.0)
        cx, cy = model.predict(self.ex, self.ey, ids, 5)
        assert np.array_equal(gx, cx) and np.array_equal(gy, cy)
        # scale=1 takes the single-forward shortcut: one cfg call + one reference call
        assert len(model.calls) == 2

    def test_scale_zero_is_exactly_null(self):
        model = RecordingModel(self.ex, self.ey)
        gx, _ = cfg_predict(model, self.ex, self.ey, np.array([2, 3]), 5, scale=0.0)
        nx, _ = model.predict(self.ex, self.ey, np.array([8, 8]), 5)
        assert np.array_equal(gx, nx)

    def test_linear_extrapolation_formula(self):
        model = RecordingModel(self.ex, self.ey)
        ids = np.array([1, 1])
        s = 3.0
        gx, gy = cfg_predict(model, self.ex, self.ey, ids, 5, scale=s)
        cx, _ = model.predict(self.ex, self.ey, ids, 5)
        nx, _ = model.predict(self.ex, self.ey, np.array([8, 8]), 5)
        want = nx + np.float32(s) * (cx - nx)
        assert np.abs(gx - want).max() < 1e-6


class MicroJointModel:
    """4-parameter linear model for loss gradient checks.

    eps_x_hat = a * x_t + b * y_t broadcast over RGB channels,
    eps_y_hat = c * y_t + d * mean(x_t over channels).
    """
    null_class_id = 8
    joint_channels = 1
    image_size = 4

    def __init__(self):
        from jointdiff.tensor import Tensor
        self.params = {
            "a": Tensor(np.float32(0.7), requires_grad=True),
            "b": Tensor(np.float32(-0.3), requires_grad=True),
            "c": Tensor(np.float32(1.2), requires_grad=True),
            "d": Tensor(np.float32(0.4), requires_grad=True),
        }

    def predict_tensors(self, x_t, y_t, class_ids, t, cond=None):
        from jointdiff import tensor as T
        from jointdiff.tensor import Tensor
        n, _, h, w = x_t.shape
        xt = Tensor(x_t)
        yt = Tensor(y_t)
        y3 = T.concat([yt, yt, yt], axis=1)
        xm = T.mul_scalar(T.add(T.add(T.slice_channels(xt, 0, 1), T.slice_channels(xt, 1, 2)),
                                T.slice_channels(xt, 2, 3)), 1.0 / 3.0)
        # scalar params broadcast via a 1x1 linear: p * flat(t)
        def smul(t_, p):
            flat = T.reshape(t_, (1, -1))
            row = T.linear(T.reshape(p, (1, 1)), T.permute(flat, (1, 0)))
            return T.reshape(row, t_.shape)
        ex = T.add(smul(xt, self.params["a"]), smul(y3, self.params["b"]))
        ey = T.add(smul(yt, self.params["c"]), smul(xm, self.params["d"]))
        return ex, ey


class TestJointLoss:
    def setup_method(self):
        self.sched = make_schedule(50, 1e-3, 0.05)
        rng = np.random.default_rng(8)
        self.x0 = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        self.y0 = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
        self.ex = rng.standard_normal(self.x0.shape).astype(np.float32)
        self.ey = rng.standard_normal(self.y0.shape).astype(np.float32)

    def _elementwise_oracle(self, model, t):
        x_t = corrupt(self.x0, t, self.ex, self.sched)
        y_t = corrupt(self.y0, t, self.ey, self.sched)
        px, py = model.predict_tensors(x_t, y_t, np.array([0, 1]), t)
        lx = np.mean((px.data - self.ex) ** 2)
        ly = np.mean((py.data - self.ey) ** 2)
        return lx + ly, lx, ly

    def test_value_matches_elementwise_oracle(self):
        model = MicroJointModel()
        t = 7
        loss, parts = joint_loss(model, self.x0, self.y0, np.array([0, 1]), t,
                                 self.ex, self.ey, self.sched)
        want, wx, wy = self._elementwise_oracle(model, t)
        assert abs(float(loss.data) - want) < 1e-6
        assert abs(parts["loss_x"] - wx) < 1e-6
        assert abs(parts["loss_y"] - wy) < 1e-6

    def test_perfect_prediction_gives_zero(self):
        class Perfect(MicroJointModel):
            def __init__(self, ex, ey):
                self.ex, self.ey = ex, ey

            def predict_tensors(self, x_t, y_t, class_ids, t, cond=None):
                from jointdiff.tensor import Tensor
                return Tensor(self.ex), Tensor(self.ey)

        loss, _ = joint_loss(Perfect(self.ex, self.ey), self.x0, self.y0,
                             np.array([0, 1]), 3, self.ex, self.ey, self.sched)
        assert float(loss.data) == 0.0

    def test_gradients_match_finite_differences(self):
        from jointdiff.tensor import GradTape, backward
        model = MicroJointModel()
        t = 11

        with GradTape():
            loss, _ = joint_loss(model, self.x0, self.y0, np.array([0, 1]), t,
                                 self.ex, self.ey, self.sched)
            backward(loss)
        analytic = {k: float(p.grad) for k, p in model.params.items()}

        h = 1e-3
        for name, p in model.params.items():
            orig = float(p.data)
            for sign, store in ((+1, "fp"), (-1, "fm")):
                p.data = np.float32(orig + sign * h)
                val, _ = joint_loss(model, self.x0.astype(np.float64), self.y0.astype(np.float64),
                                    np.array([0, 1]), t,
                                    self.ex.astype(np.float64), self.ey.astype(np.float64), self.sched)
                if sign > 0:
                    fp = float(val.data)
                else:
                    fm = float(val.data)
            p.data = np.float32(orig)
            numeric = (fp - fm) / (2 * h)
            rel = abs(analytic[name] - numeric) / max(abs(numeric), 1e-8)
            assert rel < 1e-3, f"param {name}: analytic {analytic[name]} vs numeric {numeric}"
