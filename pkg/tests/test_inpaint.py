"""Inpainting tests: blend oracles, preservation invariants, wrappers."""

import numpy as np
import pytest

from jointdiff.diffusion import corrupt, ddim_timesteps, make_schedule
from jointdiff.inpaint import (
    ModalityMask,
    box_mask,
    full_masks,
    generate_from_depth,
    inpaint,
    predict_depth,
    repaint_blend,
)

SCHED = make_schedule(200)


class StubModel:
    """Deterministic linear eps predictor, enough to drive the pipeline."""

    null_class_id = 8
    joint_channels = 1
    masked_cond = False
    image_size = 8

    def predict(self, x_t, y_t, class_ids, t, cond=None):
        return (0.1 * x_t).astype(np.float32), (0.2 * y_t).astype(np.float32)


class RecordingModel(StubModel):
    def __init__(self, masked_cond=False):
        self.masked_cond = masked_cond
        self.calls = []

    def predict(self, x_t, y_t, class_ids, t, cond=None):
        self.calls.append({"t": t, "cond": cond, "ids": np.array(class_ids)})
        return super().predict(x_t, y_t, class_ids, t, cond=cond)


def _probe(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


class TestRepaintBlend:
    def test_all_ones_mask_returns_partial_unchanged(self):
        x = _probe((2, 3, 8, 8), 0)
        out = repaint_blend(x, np.zeros_like(x), np.ones((1, 8, 8), np.float32),
                            50, SCHED, np.random.default_rng(1))
        assert np.array_equal(out, x)

    def test_all_zeros_mask_equals_corrupt_at_same_level(self):
        x0 = _probe((2, 3, 8, 8), 2)
        t = 120
        out = repaint_blend(np.zeros_like(x0), x0, np.zeros((1, 8, 8), np.float32),
                            t, SCHED, np.random.default_rng(5))
        eps = np.random.default_rng(5).standard_normal(x0.shape).astype(np.float32)
        assert np.array_equal(out, corrupt(x0, t, eps, SCHED))

    def test_checkerboard_matches_elementwise_oracle(self):
        x = _probe((1, 3, 8, 8), 3)
        x0 = _probe((1, 3, 8, 8), 4)
        ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        mask = (((ii + jj) % 2).astype(np.float32))[None]
        t = 77
        out = repaint_blend(x, x0, mask, t, SCHED, np.random.default_rng(6))
        eps = np.random.default_rng(6).standard_normal(x0.shape).astype(np.float32)
        want = mask * x + (1.0 - mask) * corrupt(x0, t, eps, SCHED)
        assert np.array_equal(out, want.astype(np.float32))

    def test_nonbinary_mask_rejected(self):
        x = np.zeros((1, 3, 8, 8), np.float32)
        with pytest.raises(ValueError, match="0 or 1"):
            repaint_blend(x, x, np.full((1, 8, 8), 0.5, np.float32), 10, SCHED,
                          np.random.default_rng(0))

    def test_negative_level_rejected(self):
        x = np.zeros((1, 3, 8, 8), np.float32)
        with pytest.raises(ValueError):
            repaint_blend(x, x, np.ones((1, 8, 8), np.float32), -1, SCHED,
                          np.random.default_rng(0))


class TestModalityMask:
    def test_binary_validation(self):
        ones = np.ones((1, 4, 4), np.float32)
        with pytest.raises(ValueError, match="0 or 1"):
            ModalityMask(mask_x=0.3 * ones, mask_y=ones)
        with pytest.raises(ValueError, match="1,H,W"):
            ModalityMask(mask_x=np.ones((4, 4), np.float32), mask_y=ones)

    def test_box_mask_bounds(self):
        m = box_mask(8, 8, 2, 3, 4, 2)
        assert m.sum() == 8
        assert m[0, 2:6, 3:5].min() == 1.0
        with pytest.raises(ValueError, match="bounds"):
            box_mask(8, 8, 6, 0, 4, 4)


class TestInpaint:
    def test_keep_everything_returns_inputs_exactly(self):
        x0, y0 = _probe((2, 3, 8, 8), 7), _probe((2, 1, 8, 8), 8)
        masks = full_masks(8, 8, regen_x=False, regen_y=False)
        x, y = inpaint(StubModel(), SCHED, x0, y0, masks, num_steps=6,
                       rng=np.random.default_rng(0))
        assert np.array_equal(x, x0)
        assert np.array_equal(y, y0)

    def test_depth_conditioned_generation_preserves_depth(self):
        x0, y0 = np.zeros((1, 3, 8, 8), np.float32), _probe((1, 1, 8, 8), 9)
        masks = full_masks(8, 8, regen_x=True, regen_y=False)
        x, y = inpaint(StubModel(), SCHED, x0, y0, masks, num_steps=6,
                       rng=np.random.default_rng(1))
        assert np.array_equal(y, y0)
        assert not np.array_equal(x, x0)

    def test_depth_estimation_preserves_image(self):
        x0, y0 = _probe((1, 3, 8, 8), 10), np.zeros((1, 1, 8, 8), np.float32)
        masks = full_masks(8, 8, regen_x=False, regen_y=True)
        x, y = inpaint(StubModel(), SCHED, x0, y0, masks, num_steps=6,
                       rng=np.random.default_rng(2))
        assert np.array_equal(x, x0)
        assert not np.array_equal(y, y0)

    def test_region_preservation_bit_exact_for_random_boxes(self):
        x0, y0 = _probe((2, 3, 8, 8), 11), _probe((2, 1, 8, 8), 12)
        masks = ModalityMask(mask_x=box_mask(8, 8, 1, 2, 4, 3),
                             mask_y=box_mask(8, 8, 3, 0, 2, 6))
        x, y = inpaint(StubModel(), SCHED, x0, y0, masks, num_steps=8,
                       rng=np.random.default_rng(3))
        keep_x = masks.mask_x[0] < 0.5
        keep_y = masks.mask_y[0] < 0.5
        assert np.array_equal(x[:, :, keep_x], x0[:, :, keep_x])
        assert np.array_equal(y[:, :, keep_y], y0[:, :, keep_y])
        assert not np.array_equal(x[:, :, ~keep_x], x0[:, :, ~keep_x])

    def test_symmetric_masks_edit_both_modalities_together(self):
        x0, y0 = _probe((1, 3, 8, 8), 13), _probe((1, 1, 8, 8), 14)
        shared = box_mask(8, 8, 2, 2, 4, 4)
        x, y = inpaint(StubModel(), SCHED, x0, y0,
                       ModalityMask(mask_x=shared, mask_y=shared),
                       num_steps=6, rng=np.random.default_rng(4))
        keep = shared[0] < 0.5
        assert np.array_equal(x[:, :, keep], x0[:, :, keep])
        assert np.array_equal(y[:, :, keep], y0[:, :, keep])
        assert not np.array_equal(x[:, :, ~keep], x0[:, :, ~keep])
        assert not np.array_equal(y[:, :, ~keep], y0[:, :, ~keep])

    def test_model_sees_sampler_levels_in_order(self):
        model = RecordingModel()
        x0, y0 = _probe((1, 3, 8, 8), 15), _probe((1, 1, 8, 8), 16)
        inpaint(model, SCHED, x0, y0, full_masks(8, 8, True, True),
                num_steps=10, rng=np.random.default_rng(5))
        assert [c["t"] for c in model.calls] == ddim_timesteps(200, 10)

    def test_default_class_is_null(self):
        model = RecordingModel()
        x0, y0 = _probe((2, 3, 8, 8), 17), _probe((2, 1, 8, 8), 18)
        inpaint(model, SCHED, x0, y0, full_masks(8, 8, True, True),
                num_steps=2, rng=np.random.default_rng(6))
        assert np.all(model.calls[0]["ids"] == model.null_class_id)

    def test_mask_conditioned_model_receives_masks_and_content(self):
        model = RecordingModel(masked_cond=True)
        x0, y0 = _probe((2, 3, 8, 8), 19), _probe((2, 1, 8, 8), 20)
        masks = ModalityMask(mask_x=box_mask(8, 8, 0, 0, 4, 8),
                             mask_y=np.ones((1, 8, 8), np.float32))
        inpaint(model, SCHED, x0, y0, masks, num_steps=3,
                rng=np.random.default_rng(7))
        mx, cx, my, cy = model.calls[0]["cond"]
        assert mx.shape == (2, 1, 8, 8) and my.shape == (2, 1, 8, 8)
        assert np.array_equal(mx[0, 0], masks.mask_x[0])
        assert np.array_equal(cx, (1.0 - masks.mask_x) * x0)
        assert np.array_equal(cy, np.zeros_like(y0))  # everything regenerated

    def test_plain_model_gets_no_cond(self):
        model = RecordingModel(masked_cond=False)
        x0, y0 = _probe((1, 3, 8, 8), 21), _probe((1, 1, 8, 8), 22)
        inpaint(model, SCHED, x0, y0, full_masks(8, 8, True, False),
                num_steps=2, rng=np.random.default_rng(8))
        assert all(c["cond"] is None for c in model.calls)


class TestWrappers:
    def test_predict_depth_keeps_image_bit_exact(self):
        image = _probe((2, 3, 8, 8), 23)
        x, y = predict_depth(StubModel(), SCHED, image, num_steps=6,
                             rng=np.random.default_rng(9))
        assert np.array_equal(x, image)
        assert y.shape == (2, 1, 8, 8)

    def test_generate_from_depth_keeps_depth_bit_exact(self):
        depth = _probe((1, 1, 8, 8), 24)
        x, y = generate_from_depth(StubModel(), SCHED, depth, num_steps=6,
                                   rng=np.random.default_rng(10))
        assert np.array_equal(y, depth)
        assert x.shape == (1, 3, 8, 8)
