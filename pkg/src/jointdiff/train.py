"""Training loop: staged recipe, fixed-seed validation, progression tracking.

Stages:
  base     pretrain the RGB backbone alone (the stand-in for a big
           pretrained model; everything downstream builds on it)
  1        train the joint branch and exchange convs, RGB branch frozen
  2        unfreeze everything at a lower lr with heavier class drop,
           so the branches learn mutual conditioning
  mask_ft  fine-tune a mask-conditioned model on a mix of mask setups
           (regenerate everything / keep one modality / shared box)

Validation losses are measured on a probe batch with noise and levels
frozen at construction, so two models trained on identical batch
streams have directly comparable curves.  Stage-1 runs snapshot the RGB
branch at entry and verify bit-equality at exit.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import (
    NoiseSchedule,
    ddim_timesteps,
    ddim_update,
    joint_loss,
    make_schedule,
    sample_joint,
    sample_noise_with_offset,
)
from . import tensor as T
from .optim import Adam
from .scenes import SceneSample
from .tensor import GradTape, Tensor, backward

STAGES = ("base", "1", "2", "mask_ft")
MASK_FT_MODES = ("regen_both", "keep_y", "keep_x", "shared_box")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "1"
    learning_rate: float = 1e-4
    steps: int = 3000
    warmup_steps: int = 300
    batch_size: int = 16
    cond_drop_prob: float = 0.15
    noise_offset: float = 0.05
    seed: int = 0
    snapshot_every: int = 500
    val_every: int = 50
    val_size: int = 8
    snapshot_classes: tuple[int, ...] = (0, 1, 2, 3)
    snapshot_steps: int = 20
    dataset: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError(f"cond_drop_prob must be in [0, 1], got {self.cond_drop_prob}")


def desk_config(stage: str, **overrides) -> TrainConfig:
    """Laptop-scale defaults: 32x32, batch 16, 3000 + 1000 steps."""
    base = {
        "base": TrainConfig(stage="base", learning_rate=1e-4, steps=3000,
                            warmup_steps=300),
        "1": TrainConfig(stage="1", learning_rate=1e-4, steps=3000,
                         warmup_steps=300, cond_drop_prob=0.15),
        "2": TrainConfig(stage="2", learning_rate=1e-5, steps=1000,
                         warmup_steps=100, cond_drop_prob=0.50),
        "mask_ft": TrainConfig(stage="mask_ft", learning_rate=1e-5, steps=1000,
                               warmup_steps=100, cond_drop_prob=0.50),
    }[stage]
    return replace(base, **overrides)


def paper_config(stage: str, **overrides) -> TrainConfig:
    """The published recipe, kept as a preset rather than a default."""
    base = {
        "1": TrainConfig(stage="1", learning_rate=1e-4, steps=10_000,
                         warmup_steps=1000, cond_drop_prob=0.15,
                         noise_offset=0.05),
        "2": TrainConfig(stage="2", learning_rate=1e-5, steps=10_000,
                         warmup_steps=1000, cond_drop_prob=0.50,
                         noise_offset=0.05),
    }[stage]
    return replace(base, **overrides)


# -- dataset container --------------------------------------------------

@dataclass(frozen=True)
class TrainData:
    rgb: np.ndarray        # (N, 3, H, W) float32 in [-1, 1]
    y: np.ndarray          # (N, 1, H, W) float32, normalized disparity
    class_ids: np.ndarray  # (N,) int64

    def __post_init__(self):
        n = len(self.class_ids)
        if self.rgb.shape[:2] != (n, 3) or self.y.shape[:2] != (n, 1):
            raise ValueError("rgb/y/class_ids lengths or channel counts disagree")

    def __len__(self) -> int:
        return len(self.class_ids)

    @classmethod
    def from_samples(cls, samples: list[SceneSample]) -> "TrainData":
        return cls(rgb=np.stack([s.rgb for s in samples]),
                   y=np.stack([s.disparity for s in samples]),
                   class_ids=np.array([s.class_id for s in samples], np.int64))


def split_data(data: TrainData, n_val: int, seed: int = 0) -> tuple[TrainData, TrainData]:
    """Deterministic shuffled split; the last n_val shuffled rows validate."""
    if not 0 < n_val < len(data):
        raise ValueError(f"n_val must be in (0, {len(data)}), got {n_val}")
    order = np.random.default_rng(seed).permutation(len(data))
    tr, va = order[:-n_val], order[-n_val:]
    pick = lambda idx: TrainData(data.rgb[idx], data.y[idx], data.class_ids[idx])
    return pick(tr), pick(va)


# -- mask-conditioning batches ------------------------------------------

def sample_mask_cond(x0: np.ndarray, y0: np.ndarray, rng: np.random.Generator):
    """Per-sample mask setup drawn uniformly from the four training modes.

    Returns (mask_x, content_x, mask_y, content_y); mask 1 = regenerate,
    content is the clean map with regenerate regions zeroed.
    """
    n, _, h, w = x0.shape
    mask_x = np.ones((n, 1, h, w), np.float32)
    mask_y = np.ones((n, 1, h, w), np.float32)
    for i in range(n):
        mode = MASK_FT_MODES[rng.integers(len(MASK_FT_MODES))]
        if mode == "keep_y":
            mask_y[i] = 0.0
        elif mode == "keep_x":
            mask_x[i] = 0.0
        elif mode == "shared_box":
            bh = int(rng.integers(h // 4, 3 * h // 4 + 1))
            bw = int(rng.integers(w // 4, 3 * w // 4 + 1))
            top = int(rng.integers(0, h - bh + 1))
            left = int(rng.integers(0, w - bw + 1))
            mask_x[i] = 0.0
            mask_y[i] = 0.0
            mask_x[i, :, top:top + bh, left:left + bw] = 1.0
            mask_y[i, :, top:top + bh, left:left + bw] = 1.0
    return mask_x, (1.0 - mask_x) * x0, mask_y, (1.0 - mask_y) * y0


# -- losses --------------------------------------------------------------

def rgb_loss(model, x0: np.ndarray, class_ids, t: int, eps: np.ndarray,
             sched: NoiseSchedule):
    """Single-branch MSE for backbone pretraining."""
    from .diffusion import corrupt
    x_t = corrupt(x0, t, eps, sched)
    pred = model.forward_tensors(x_t, class_ids, t)
    r = T.sub(pred, Tensor(eps))
    loss = T.mean_all(T.mul(r, r))
    return loss, {"loss": float(loss.data), "loss_x": float(loss.data)}


# -- fixed validation probes ----------------------------------------------

@dataclass(frozen=True)
class ValProbe:
    x0: np.ndarray
    y0: np.ndarray
    class_ids: np.ndarray
    levels: tuple[int, ...]
    eps_x: np.ndarray      # (len(levels),) + x0.shape
    eps_y: np.ndarray


def make_val_probe(val: TrainData, sched: NoiseSchedule, size: int,
                   seed: int) -> ValProbe:
    rng = np.random.default_rng(seed)
    size = min(size, len(val))
    levels = tuple(int(f * sched.num_steps) for f in (0.25, 0.5, 0.75))
    x0, y0 = val.rgb[:size], val.y[:size]
    return ValProbe(
        x0=x0, y0=y0, class_ids=val.class_ids[:size], levels=levels,
        eps_x=rng.standard_normal((len(levels),) + x0.shape).astype(np.float32),
        eps_y=rng.standard_normal((len(levels),) + y0.shape).astype(np.float32))


def eval_probe(model, probe: ValProbe, sched: NoiseSchedule) -> dict:
    """Mean branch losses over the probe's frozen (level, noise) pairs."""
    from .diffusion import corrupt
    lx, ly = [], []
    for i, t in enumerate(probe.levels):
        if model.kind == "backbone":
            x_t = corrupt(probe.x0, t, probe.eps_x[i], sched)
            pred = model.forward(x_t, probe.class_ids, t)
            lx.append(float(np.mean((pred - probe.eps_x[i]) ** 2)))
        else:
            x_t = corrupt(probe.x0, t, probe.eps_x[i], sched)
            y_t = corrupt(probe.y0, t, probe.eps_y[i], sched)
            px, py = model.predict(x_t, y_t, probe.class_ids, t)
            lx.append(float(np.mean((px - probe.eps_x[i]) ** 2)))
            ly.append(float(np.mean((py - probe.eps_y[i]) ** 2)))
    out = {"val_loss_x": float(np.mean(lx))}
    if ly:
        out["val_loss_y"] = float(np.mean(ly))
    return out


# -- snapshots -------------------------------------------------------------

def _sample_rgb_only(model, sched: NoiseSchedule, class_ids, num_steps: int,
                     rng: np.random.Generator, size: int) -> np.ndarray:
    n = len(class_ids)
    x = rng.standard_normal((n, model.cfg.in_channels, size, size)).astype(np.float32)
    ts = ddim_timesteps(sched.num_steps, num_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        x = ddim_update(x, model.forward(x, class_ids, t), t, t_prev, sched)
    return x


def make_snapshot(model, sched: NoiseSchedule, config: TrainConfig):
    """Fixed-seed fixed-class validation grid; comparable across steps."""
    ids = np.array(config.snapshot_classes)
    rng = np.random.default_rng(config.seed + 9999)
    if model.kind == "backbone":
        return _sample_rgb_only(model, sched, ids, config.snapshot_steps, rng,
                                model.image_size), None
    x, y = sample_joint(model, sched, len(ids), ids, config.snapshot_steps,
                        1.0, rng, size=model.image_size)
    return x, y


# -- the loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    config: TrainConfig
    history: list = field(default_factory=list)       # per-step loss dicts
    val_history: list = field(default_factory=list)   # probe losses
    snapshots: list = field(default_factory=list)     # (step, x, y)
    rgb_frozen_ok: bool | None = None
    optimizer: Adam | None = None


def _check_stage(model, stage: str):
    if stage == "base" and model.kind != "backbone":
        raise ValueError("stage 'base' trains the plain backbone")
    if stage != "base" and model.kind == "backbone":
        raise ValueError(f"stage {stage!r} needs a joint or widened model")
    if stage == "mask_ft" and not getattr(model, "masked_cond", False):
        raise ValueError("stage 'mask_ft' needs a mask-conditioned model")


def train(model, data: TrainData, config: TrainConfig,
          sched: NoiseSchedule | None = None,
          val: TrainData | None = None,
          optimizer: Adam | None = None) -> TrainResult:
    """Run one stage; returns histories, snapshots, and the optimizer.

    The batch stream is a pure function of (config.seed, dataset, model
    kind-independent draw order), so two models trained with the same
    config and data see identical batches, levels, and noise.
    """
    _check_stage(model, config.stage)
    sched = sched or make_schedule(200)
    if val is None:
        data, val = split_data(data, max(config.val_size, 1), seed=config.seed)
    probe = make_val_probe(val, sched, config.val_size, config.seed + 1)
    params = model.named_params()
    opt = optimizer or Adam(params, lr=config.learning_rate,
                            warmup_steps=config.warmup_steps)
    frozen = model.frozen_prefixes(config.stage)
    rgb_before = None
    if frozen:
        rgb_before = {k: v.data.copy() for k, v in params.items()
                      if any(k.startswith(p) for p in frozen)}

    rng = np.random.default_rng(config.seed)
    result = TrainResult(config=config, optimizer=opt)
    result.val_history.append({"step": 0, **eval_probe(model, probe, sched)})
    if config.snapshot_every:
        x, y = make_snapshot(model, sched, config)
        result.snapshots.append((0, x, y))

    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(data), config.batch_size)
        t = int(rng.integers(0, sched.num_steps))
        x0 = data.rgb[idx]
        y0 = data.y[idx]
        ids = data.class_ids[idx].copy()
        drop = rng.random(config.batch_size) < config.cond_drop_prob
        ids[drop] = model.null_class_id
        eps_x = sample_noise_with_offset(x0.shape, config.noise_offset, rng)
        eps_y = sample_noise_with_offset(y0.shape, config.noise_offset, rng)
        cond = None
        if config.stage == "mask_ft":
            cond = sample_mask_cond(x0, y0, rng)

        opt.zero_grad()
        with GradTape():
            if model.kind == "backbone":
                loss, parts = rgb_loss(model, x0, ids, t, eps_x, sched)
            else:
                loss, parts = joint_loss(model, x0, y0, ids, t, eps_x, eps_y,
                                         sched, cond=cond)
            backward(loss)
        opt.step(frozen_prefixes=frozen)
        result.history.append({"step": step, "lr": opt.current_lr(), **parts})

        if config.val_every and step % config.val_every == 0:
            result.val_history.append({"step": step,
                                       **eval_probe(model, probe, sched)})
        if config.snapshot_every and step % config.snapshot_every == 0:
            x, y = make_snapshot(model, sched, config)
            result.snapshots.append((step, x, y))

    if rgb_before is not None:
        result.rgb_frozen_ok = all(
            np.array_equal(rgb_before[k], params[k].data) for k in rgb_before)
    return result
