"""Dual-branch joint denoiser and the widened single-backbone baseline.

The joint model couples a frozen copy of a pretrained RGB backbone with
a trainable second branch (a deep copy adapted to the joint modality's
channel count).  The branches exchange information through 1x1
convolutions that start at exactly zero: at build time each branch's
output is therefore bit-identical to running its backbone alone, so
fine-tuning starts from the pretrained behaviour instead of destroying
it.

The baseline (``build_direct_extend``) instead widens the first and
last convs of a single backbone to carry both modalities at once; none
of its last-conv init choices preserve the pretrained output, which is
the failure the dual-branch design exists to avoid.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .backbone import (BackboneConfig, Params, backbone_forward, copy_params,
                       down_pass, embed_time_and_class, init_backbone_params,
                       merge_activations, up_pass, zero_conv)
from .tensor import Tensor

JOINT_CHANNEL_CHOICES = (1, 3)   # depth/disparity or normal map


def _zero_conv_params(c_out: int, c_in: int) -> tuple[Tensor, Tensor]:
    return (Tensor(np.zeros((c_out, c_in, 1, 1), np.float32), requires_grad=True),
            Tensor(np.zeros(c_out, np.float32), requires_grad=True))


def _init_exchange(cfg: BackboneConfig, input_channels: int) -> Params:
    """Zero 1x1 convs: one for the raw input, one per skip, one for mid."""
    ex: Params = {}
    w = cfg.widths
    ex["input.w"], ex["input.b"] = _zero_conv_params(w[0], input_channels)
    for i, c in enumerate(w):
        ex[f"skip{i}.w"], ex[f"skip{i}.b"] = _zero_conv_params(c, c)
    ex["mid.w"], ex["mid.b"] = _zero_conv_params(w[-1], w[-1])
    return ex


# -- single backbone (the pretrained base, also usable standalone) -----

@dataclass
class BackboneDenoiser:
    cfg: BackboneConfig
    params: Params

    @property
    def null_class_id(self) -> int:
        return self.cfg.null_class_id

    @property
    def image_size(self) -> int:
        return 32

    @property
    def kind(self) -> str:
        return "backbone"

    def frozen_prefixes(self, stage: str) -> tuple[str, ...]:
        return ()

    def forward_tensors(self, x_t, class_ids, t):
        eps, _ = backbone_forward(self.params, self.cfg, x_t, class_ids, t)
        return eps

    def forward(self, x_t, class_ids, t) -> np.ndarray:
        return self.forward_tensors(x_t, class_ids, t).data

    def named_params(self) -> Params:
        return dict(self.params)


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> BackboneDenoiser:
    return BackboneDenoiser(cfg=cfg, params=init_backbone_params(cfg, rng))


# -- dual-branch joint model -------------------------------------------

@dataclass
class JointDenoiser:
    cfg: BackboneConfig          # interior config; per-branch in/out convs differ
    joint_channels: int
    rgb: Params                  # frozen pretrained branch (stage 1)
    joint: Params                # trainable copy adapted to the joint modality
    ex_x2j: Params               # rgb activations -> joint branch
    ex_j2x: Params               # joint activations -> rgb branch
    masked_cond: bool = False

    @property
    def null_class_id(self) -> int:
        return self.cfg.null_class_id

    @property
    def image_size(self) -> int:
        return 32

    @property
    def kind(self) -> str:
        return "jointnet"

    def named_params(self) -> Params:
        out: Params = {}
        for prefix, sub in (("rgb", self.rgb), ("joint", self.joint),
                            ("ex.x2j", self.ex_x2j), ("ex.j2x", self.ex_j2x)):
            for k, v in sub.items():
                out[f"{prefix}.{k}"] = v
        return out

    def frozen_prefixes(self, stage: str) -> tuple[str, ...]:
        return ("rgb.",) if stage == "1" else ()

    def _assemble_input(self, z_t, cond_pair, channels):
        """Stack (noisy, mask, kept clean content) when mask-conditioned."""
        if not self.masked_cond:
            return Tensor(z_t)
        n, _, h, w = z_t.shape
        if cond_pair is None:
            mask = np.ones((n, 1, h, w), np.float32)
            content = np.zeros((n, channels, h, w), np.float32)
        else:
            mask, content = cond_pair
            if mask.shape != (n, 1, h, w) or content.shape != z_t.shape:
                raise ValueError(f"conditioning shapes {mask.shape}/{content.shape} do not match input {z_t.shape}")
        return Tensor(np.concatenate([z_t, mask, content], axis=1))

    def predict_tensors(self, x_t, y_t, class_ids, t, cond=None):
        """cond, when given, is (mask_x, content_x, mask_y, content_y);
        content is the clean map with regenerate regions zeroed."""
        x_t = np.asarray(x_t)
        y_t = np.asarray(y_t)
        n = x_t.shape[0]
        if cond is not None:
            cx, cy = (cond[0], cond[1]), (cond[2], cond[3])
        else:
            cx = cy = None
        x_in = self._assemble_input(x_t, cx, 3)
        y_in = self._assemble_input(y_t, cy, self.joint_channels)

        temb_x, cemb_x = embed_time_and_class(self.rgb, self.cfg, t, class_ids, n)
        temb_y, cemb_y = embed_time_and_class(self.joint, self.cfg, t, class_ids, n)
        # raw inputs cross over through the zero input convs
        inj_x = zero_conv(self.ex_j2x, "input", Tensor(y_t))
        inj_y = zero_conv(self.ex_x2j, "input", Tensor(x_t))
        acts_x = down_pass(self.rgb, self.cfg, x_in, temb_x, cemb_x, inj_x)
        acts_y = down_pass(self.joint, self.cfg, y_in, temb_y, cemb_y, inj_y)
        eps_x = up_pass(self.rgb, self.cfg, merge_activations(acts_x, acts_y, self.ex_j2x), temb_x)
        eps_y = up_pass(self.joint, self.cfg, merge_activations(acts_y, acts_x, self.ex_x2j), temb_y)
        return eps_x, eps_y

    def predict(self, x_t, y_t, class_ids, t, cond=None):
        ex, ey = self.predict_tensors(x_t, y_t, class_ids, t, cond=cond)
        return ex.data, ey.data


def adapt_first_conv(w: np.ndarray, joint_channels: int) -> np.ndarray:
    """3-channel first-conv weights adapted to the joint channel count.

    For 1 channel the three input slices are summed, which keeps the
    response identical on gray inputs (r=g=b); for 3 channels the copy
    is kept as is.
    """
    if joint_channels == 3:
        return w.copy()
    return w.sum(axis=1, keepdims=True)


def build_jointnet(base: BackboneDenoiser, joint_channels: int) -> JointDenoiser:
    """Couple a frozen copy of `base` with a joint-modality copy.

    Deterministic: no RNG involved.  The joint branch's first conv is
    channel-adapted from the base weights; its last conv is
    re-instantiated at zero for non-matching channel counts, so the
    fresh model's joint output starts as the base copy's (or zero) and
    all exchange convs start at exactly zero.
    """
    if joint_channels not in JOINT_CHANNEL_CHOICES:
        raise ValueError(f"joint_channels must be one of {JOINT_CHANNEL_CHOICES}, got {joint_channels}")
    cfg = base.cfg
    rgb = copy_params(base.params)
    joint = copy_params(base.params)
    joint["conv_in.w"] = Tensor(adapt_first_conv(base.params["conv_in.w"].data, joint_channels),
                                requires_grad=True)
    if joint_channels != cfg.out_channels:
        w0 = base.params["out.conv.w"].data
        joint["out.conv.w"] = Tensor(np.zeros((joint_channels,) + w0.shape[1:], np.float32),
                                     requires_grad=True)
        joint["out.conv.b"] = Tensor(np.zeros(joint_channels, np.float32), requires_grad=True)
    return JointDenoiser(cfg=cfg, joint_channels=joint_channels,
                         rgb=rgb, joint=joint,
                         ex_x2j=_init_exchange(cfg, 3),
                         ex_j2x=_init_exchange(cfg, joint_channels))


def joint_branch_config(model: JointDenoiser) -> BackboneConfig:
    return replace(model.cfg, in_channels=model.joint_channels, out_channels=model.joint_channels)


def extend_for_masked_conditioning(model: JointDenoiser) -> JointDenoiser:
    """Widen each branch's first conv with zero-init channels accepting
    (mask, kept clean content) for its own modality.  Output is
    bit-identical to the unextended model until the new slices train."""
    if model.masked_cond:
        raise ValueError("model is already mask-conditioned")

    def extend(params: Params, extra: int) -> Params:
        out = copy_params(params)
        w = out["conv_in.w"].data
        widened = np.concatenate([w, np.zeros((w.shape[0], extra) + w.shape[2:], np.float32)], axis=1)
        out["conv_in.w"] = Tensor(widened, requires_grad=True)
        return out

    return JointDenoiser(cfg=model.cfg, joint_channels=model.joint_channels,
                         rgb=extend(model.rgb, 1 + 3),
                         joint=extend(model.joint, 1 + model.joint_channels),
                         ex_x2j={k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.ex_x2j.items()},
                         ex_j2x={k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.ex_j2x.items()},
                         masked_cond=True)


# -- widened-backbone baseline ----------------------------------------

INIT_MODES = ("zeros", "random", "copy")


@dataclass
class DirectExtendDenoiser:
    cfg: BackboneConfig          # interior config of the original backbone
    joint_channels: int
    init_mode: str
    params: Params

    @property
    def null_class_id(self) -> int:
        return self.cfg.null_class_id

    @property
    def image_size(self) -> int:
        return 32

    @property
    def kind(self) -> str:
        return "direct_extend"

    def named_params(self) -> Params:
        return dict(self.params)

    def frozen_prefixes(self, stage: str) -> tuple[str, ...]:
        return ()

    def predict_tensors(self, x_t, y_t, class_ids, t, cond=None):
        if cond is not None:
            raise ValueError("the widened baseline has no mask conditioning")
        z = np.concatenate([np.asarray(x_t), np.asarray(y_t)], axis=1)
        eps, _ = backbone_forward(self.params, self.cfg, z, class_ids, t)
        return T.slice_channels(eps, 0, 3), T.slice_channels(eps, 3, 3 + self.joint_channels)

    def predict(self, x_t, y_t, class_ids, t, cond=None):
        ex, ey = self.predict_tensors(x_t, y_t, class_ids, t, cond=cond)
        return ex.data, ey.data


def build_direct_extend(base: BackboneDenoiser, joint_channels: int, init_mode: str,
                        rng: np.random.Generator | None = None) -> DirectExtendDenoiser:
    """Widen the base's first/last convs for the extra channels.

    New input slices are zero (RGB output is preserved at build); new
    output rows follow init_mode: zeros, small random (needs rng), or a
    cyclic copy of the RGB rows -- the copied rows make the joint output
    literally repeat the RGB noise prediction, which is the documented
    flaw of this construction.
    """
    if joint_channels not in JOINT_CHANNEL_CHOICES:
        raise ValueError(f"joint_channels must be one of {JOINT_CHANNEL_CHOICES}, got {joint_channels}")
    if init_mode not in INIT_MODES:
        raise ValueError(f"init_mode must be one of {INIT_MODES}, got {init_mode!r}")
    if init_mode == "random" and rng is None:
        raise ValueError("init_mode='random' needs an rng")
    cfg = base.cfg
    params = copy_params(base.params)

    w_in = params["conv_in.w"].data
    zeros_in = np.zeros((w_in.shape[0], joint_channels) + w_in.shape[2:], np.float32)
    params["conv_in.w"] = Tensor(np.concatenate([w_in, zeros_in], axis=1), requires_grad=True)

    w_out = params["out.conv.w"].data
    b_out = params["out.conv.b"].data
    if init_mode == "zeros":
        rows_w = np.zeros((joint_channels,) + w_out.shape[1:], np.float32)
        rows_b = np.zeros(joint_channels, np.float32)
    elif init_mode == "random":
        std = np.sqrt(2.0 / (w_out.shape[1] * 9))
        rows_w = (rng.standard_normal((joint_channels,) + w_out.shape[1:]) * std).astype(np.float32)
        rows_b = np.zeros(joint_channels, np.float32)
    else:  # copy, cycling through the RGB rows
        idx = [i % 3 for i in range(joint_channels)]
        rows_w = w_out[idx].copy()
        rows_b = b_out[idx].copy()
    params["out.conv.w"] = Tensor(np.concatenate([w_out, rows_w], axis=0), requires_grad=True)
    params["out.conv.b"] = Tensor(np.concatenate([b_out, rows_b], axis=0), requires_grad=True)
    return DirectExtendDenoiser(cfg=cfg, joint_channels=joint_channels,
                                init_mode=init_mode, params=params)
