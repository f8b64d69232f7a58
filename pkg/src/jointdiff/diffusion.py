"""Denoising-diffusion machinery: linear beta schedule, forward corruption
with optional low-frequency noise offset, DDPM/DDIM reverse steps,
classifier-free guidance, and the two-branch joint training loss.

Timestep convention: arrays are 0-indexed, so level t uses
``alpha_bars[t]`` and the virtual level -1 is clean data (alpha_bar 1).
The final reverse step therefore targets t_prev = -1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray          # (T,) float64
    alphas: np.ndarray         # 1 - betas
    alpha_bars: np.ndarray     # cumulative products

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at level t; t == -1 is clean data."""
        if t == -1:
            return 1.0
        return float(self.alpha_bars[t])


def make_schedule(num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if num_steps < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def sample_noise_with_offset(shape, offset: float, rng: np.random.Generator) -> np.ndarray:
    """Standard normal plus a per-image per-channel scalar shift.

    The shift moves each channel's mean jointly, giving the model
    gradient signal about global brightness without changing the
    per-pixel marginal much.  shape is (N, C, H, W).
    """
    n, c = shape[0], shape[1]
    eps = rng.standard_normal(shape)
    if offset:
        eps = eps + offset * rng.standard_normal((n, c, 1, 1))
    return eps.astype(np.float32)


def corrupt(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not (0 <= t < sched.num_steps):
        raise ValueError(f"t={t} outside schedule with {sched.num_steps} steps")
    if eps.shape != x0.shape:
        raise ValueError(f"corrupt: eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar(t)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


# -- guidance ----------------------------------------------------------

def cfg_predict(model, x_t, y_t, class_ids, t, scale: float = 1.0, cond=None):
    """eps_hat = eps_null + scale * (eps_cond - eps_null), per branch.

    scale 1 returns the conditional prediction itself and 0 the null
    prediction, each with a single forward pass.
    """
    class_ids = np.asarray(class_ids)
    null_ids = np.full_like(class_ids, model.null_class_id)
    if scale == 1.0:
        return model.predict(x_t, y_t, class_ids, t, cond=cond)
    if scale == 0.0:
        return model.predict(x_t, y_t, null_ids, t, cond=cond)
    ex_c, ey_c = model.predict(x_t, y_t, class_ids, t, cond=cond)
    ex_n, ey_n = model.predict(x_t, y_t, null_ids, t, cond=cond)
    s = np.float32(scale)
    return ex_n + s * (ex_c - ex_n), ey_n + s * (ey_c - ey_n)


# -- reverse steps (plain numpy; states carry both modalities) ---------

@dataclass
class DiffusionState:
    x: np.ndarray              # RGB-side noisy map (N,3,H,W)
    y: np.ndarray              # joint-modality noisy map (N,Cy,H,W)
    t: int                     # current level; -1 means clean


def posterior_sigma(sched: NoiseSchedule, t: int) -> float:
    """DDPM posterior std at level t; zero on the final step."""
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    var = sched.betas[t] * (1.0 - ab_prev) / (1.0 - ab_t)
    return float(np.sqrt(var))


def _ddpm_update(z_t, eps_hat, t, sched, noise):
    beta = sched.betas[t]
    alpha = sched.alphas[t]
    ab = sched.alpha_bar(t)
    mean = (z_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    sigma = posterior_sigma(sched, t)
    out = mean if sigma == 0.0 else mean + sigma * noise
    return out.astype(np.float32, copy=False)


def ddpm_step(model, state: DiffusionState, sched: NoiseSchedule, rng: np.random.Generator,
              class_ids=None, guidance: float = 1.0, cond=None) -> DiffusionState:
    """One ancestral step t -> t-1; injects no noise on the final step."""
    t = state.t
    if t < 0:
        raise ValueError("ddpm_step: state already clean")
    ids = class_ids if class_ids is not None else np.full(state.x.shape[0], model.null_class_id)
    eps_x, eps_y = cfg_predict(model, state.x, state.y, ids, t, guidance, cond=cond)
    sig = posterior_sigma(sched, t)
    zx = rng.standard_normal(state.x.shape) if sig else 0.0
    zy = rng.standard_normal(state.y.shape) if sig else 0.0
    return DiffusionState(x=_ddpm_update(state.x, eps_x, t, sched, zx),
                          y=_ddpm_update(state.y, eps_y, t, sched, zy),
                          t=t - 1)


def ddim_update(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
                sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta=0) DDIM: reproject the predicted x0 to t_prev."""
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
    return out.astype(np.float32, copy=False)


def ddim_step(model, state: DiffusionState, sched: NoiseSchedule, t_prev: int,
              class_ids=None, guidance: float = 1.0, cond=None) -> DiffusionState:
    t = state.t
    if not (-1 <= t_prev < t):
        raise ValueError(f"ddim_step: t_prev={t_prev} must lie in [-1, {t})")
    ids = class_ids if class_ids is not None else np.full(state.x.shape[0], model.null_class_id)
    eps_x, eps_y = cfg_predict(model, state.x, state.y, ids, t, guidance, cond=cond)
    return DiffusionState(x=ddim_update(state.x, eps_x, t, t_prev, sched),
                          y=ddim_update(state.y, eps_y, t, t_prev, sched),
                          t=t_prev)


def ddim_timesteps(num_train_steps: int, num_sample_steps: int) -> list[int]:
    """Descending levels for a shortened DDIM chain, always ending at 0."""
    if not (1 <= num_sample_steps <= num_train_steps):
        raise ValueError(f"need 1 <= sample steps <= {num_train_steps}")
    ts = np.linspace(num_train_steps - 1, 0, num_sample_steps)
    ts = sorted(set(int(round(v)) for v in ts), reverse=True)
    return ts


def sample_joint(model, sched: NoiseSchedule, n: int, class_ids=None, num_steps: int = 50,
                 guidance: float = 1.0, rng: np.random.Generator | None = None,
                 size: int | None = None, cond=None):
    """Full DDIM chain from pure noise; returns (rgb, joint) arrays."""
    rng = rng or np.random.default_rng(0)
    size = size or model.image_size
    state = DiffusionState(
        x=rng.standard_normal((n, 3, size, size)).astype(np.float32),
        y=rng.standard_normal((n, model.joint_channels, size, size)).astype(np.float32),
        t=sched.num_steps - 1)
    ts = ddim_timesteps(sched.num_steps, num_steps)
    state.t = ts[0]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        state = ddim_step(model, state, sched, t_prev, class_ids, guidance, cond=cond)
    return state.x, state.y


# -- training loss -----------------------------------------------------

def joint_loss(model, x0: np.ndarray, y0: np.ndarray, class_ids, t: int,
               eps_x: np.ndarray, eps_y: np.ndarray, sched: NoiseSchedule,
               cond=None):
    """Sum of the two branch MSEs (mean per element each).

    Returns (loss Tensor, dict of float parts).  Gradient flows into the
    model parameters only; inputs are data.
    """
    x_t = corrupt(x0, t, eps_x, sched)
    y_t = corrupt(y0, t, eps_y, sched)
    pred_x, pred_y = model.predict_tensors(x_t, y_t, class_ids, t, cond=cond)
    rx = T.sub(pred_x, Tensor(eps_x))
    ry = T.sub(pred_y, Tensor(eps_y))
    loss_x = T.mean_all(T.mul(rx, rx))
    loss_y = T.mean_all(T.mul(ry, ry))
    loss = T.add(loss_x, loss_y)
    return loss, {"loss": float(loss.data), "loss_x": float(loss_x.data), "loss_y": float(loss_y.data)}
