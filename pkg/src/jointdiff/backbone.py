"""Toy UNet denoiser backbone.

Three resolution levels (one residual block each), self- plus
class-conditioning cross-attention at the lowest resolution, GroupNorm,
SiLU, sinusoidal time embedding through a 2-layer MLP, and a learned
class-embedding table with one extra null row for classifier-free
guidance.

The down pass captures one activation per level plus the middle-block
output; the up pass consumes them.  A second branch can inject its own
activations at exactly those points (plus the raw input right after the
first conv), each through a 1x1 convolution supplied by the caller --
the coupling mechanism lives in jointnet.py, this module only exposes
the seams.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    groups: int = 8
    heads: int = 4
    num_classes: int = 8     # scene classes; a null row is appended for guidance
    attn_lowest: bool = True

    @property
    def emb_dim(self) -> int:
        return 4 * self.base_width

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    @property
    def null_class_id(self) -> int:
        return self.num_classes


@dataclass
class BackboneActivations:
    """Own skip/mid tensors captured by the down pass (pre-injection)."""
    skips: list[Tensor]
    mid: Tensor


# -- parameter init ----------------------------------------------------

def _conv_init(rng, c_out, c_in, k):
    std = np.sqrt(2.0 / (c_in * k * k))
    return Tensor((rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32), requires_grad=True)


def _linear_init(rng, c_out, c_in):
    std = np.sqrt(1.0 / c_in)
    return Tensor((rng.standard_normal((c_out, c_in)) * std).astype(np.float32), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape, np.float32), requires_grad=True)


def _res_params(p: Params, prefix: str, rng, c_in: int, c_out: int, emb: int):
    p[f"{prefix}.gn1.g"] = _ones(c_in)
    p[f"{prefix}.gn1.b"] = _zeros(c_in)
    p[f"{prefix}.conv1.w"] = _conv_init(rng, c_out, c_in, 3)
    p[f"{prefix}.conv1.b"] = _zeros(c_out)
    p[f"{prefix}.temb.w"] = _linear_init(rng, c_out, emb)
    p[f"{prefix}.temb.b"] = _zeros(c_out)
    p[f"{prefix}.gn2.g"] = _ones(c_out)
    p[f"{prefix}.gn2.b"] = _zeros(c_out)
    p[f"{prefix}.conv2.w"] = _conv_init(rng, c_out, c_out, 3)
    p[f"{prefix}.conv2.b"] = _zeros(c_out)
    if c_in != c_out:
        p[f"{prefix}.skip.w"] = _conv_init(rng, c_out, c_in, 1)
        p[f"{prefix}.skip.b"] = _zeros(c_out)


def _attn_params(p: Params, prefix: str, rng, c: int, emb: int):
    p[f"{prefix}.sa.gn.g"] = _ones(c)
    p[f"{prefix}.sa.gn.b"] = _zeros(c)
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.sa.{name}.w"] = _linear_init(rng, c, c)
    p[f"{prefix}.sa.o.b"] = _zeros(c)
    p[f"{prefix}.ca.gn.g"] = _ones(c)
    p[f"{prefix}.ca.gn.b"] = _zeros(c)
    p[f"{prefix}.ca.q.w"] = _linear_init(rng, c, c)
    p[f"{prefix}.ca.k.w"] = _linear_init(rng, c, emb)
    p[f"{prefix}.ca.v.w"] = _linear_init(rng, c, emb)
    p[f"{prefix}.ca.o.w"] = _linear_init(rng, c, c)
    p[f"{prefix}.ca.o.b"] = _zeros(c)


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    w = cfg.widths
    emb = cfg.emb_dim
    p["conv_in.w"] = _conv_init(rng, w[0], cfg.in_channels, 3)
    p["conv_in.b"] = _zeros(w[0])
    p["temb.fc1.w"] = _linear_init(rng, emb, cfg.base_width)
    p["temb.fc1.b"] = _zeros(emb)
    p["temb.fc2.w"] = _linear_init(rng, emb, emb)
    p["temb.fc2.b"] = _zeros(emb)
    p["cond.table"] = Tensor(rng.standard_normal((cfg.num_classes + 1, emb)).astype(np.float32),
                             requires_grad=True)
    levels = len(w)
    for i in range(levels):
        c_in = w[i - 1] if i else w[0]
        _res_params(p, f"down{i}", rng, c_in, w[i], emb)
    if cfg.attn_lowest:
        _attn_params(p, f"down{levels - 1}.attn", rng, w[-1], emb)
    _res_params(p, "mid.res1", rng, w[-1], w[-1], emb)
    if cfg.attn_lowest:
        _attn_params(p, "mid.attn", rng, w[-1], emb)
    _res_params(p, "mid.res2", rng, w[-1], w[-1], emb)
    for i in reversed(range(levels)):
        c_above = w[i + 1] if i + 1 < levels else w[-1]
        _res_params(p, f"up{i}", rng, w[i] + c_above, w[i], emb)
    p["out.gn.g"] = _ones(w[0])
    p["out.gn.b"] = _zeros(w[0])
    p["out.conv.w"] = _conv_init(rng, cfg.out_channels, w[0], 3)
    p["out.conv.b"] = _zeros(cfg.out_channels)
    return p


def copy_params(p: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in p.items()}


# -- forward pieces ----------------------------------------------------

def _conv(p: Params, prefix: str, x, stride=1, padding=1):
    return T.conv2d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], stride=stride, padding=padding)


def _res_block(p: Params, prefix: str, x, temb_silu, groups: int):
    h = T.group_norm(x, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"], groups)
    h = _conv(p, f"{prefix}.conv1", T.silu(h))
    h = T.add_channel_bias(h, T.linear(temb_silu, p[f"{prefix}.temb.w"], p[f"{prefix}.temb.b"]))
    h = T.group_norm(h, p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"], groups)
    h = _conv(p, f"{prefix}.conv2", T.silu(h))
    if f"{prefix}.skip.w" in p:
        x = T.conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
    return T.add(h, x)


def _split_heads(x, heads):
    n, l, c = x.shape
    return T.permute(T.reshape(x, (n, l, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    n, h, l, d = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (n, l, h * d))


def _attn_block(p: Params, prefix: str, x, cemb, groups: int, heads: int):
    n, c, hh, ww = x.shape
    # self-attention over spatial tokens
    h = T.group_norm(x, p[f"{prefix}.sa.gn.g"], p[f"{prefix}.sa.gn.b"], groups)
    tokens = T.permute(T.reshape(h, (n, c, hh * ww)), (0, 2, 1))
    q = _split_heads(T.linear(tokens, p[f"{prefix}.sa.q.w"]), heads)
    k = _split_heads(T.linear(tokens, p[f"{prefix}.sa.k.w"]), heads)
    v = _split_heads(T.linear(tokens, p[f"{prefix}.sa.v.w"]), heads)
    att = _merge_heads(T.scaled_dot_product_attention(q, k, v))
    att = T.linear(att, p[f"{prefix}.sa.o.w"], p[f"{prefix}.sa.o.b"])
    x = T.add(x, T.reshape(T.permute(att, (0, 2, 1)), (n, c, hh, ww)))
    # cross-attention against the class embedding (a single context token)
    h = T.group_norm(x, p[f"{prefix}.ca.gn.g"], p[f"{prefix}.ca.gn.b"], groups)
    tokens = T.permute(T.reshape(h, (n, c, hh * ww)), (0, 2, 1))
    q = _split_heads(T.linear(tokens, p[f"{prefix}.ca.q.w"]), heads)
    k = _split_heads(T.linear(cemb, p[f"{prefix}.ca.k.w"]), heads)
    v = _split_heads(T.linear(cemb, p[f"{prefix}.ca.v.w"]), heads)
    att = _merge_heads(T.scaled_dot_product_attention(q, k, v))
    att = T.linear(att, p[f"{prefix}.ca.o.w"], p[f"{prefix}.ca.o.b"])
    return T.add(x, T.reshape(T.permute(att, (0, 2, 1)), (n, c, hh, ww)))


def embed_time_and_class(p: Params, cfg: BackboneConfig, t, class_ids, n: int):
    """Returns (silu(time MLP) (N,emb), cross-attn context (N,2,emb)).

    The context holds two tokens -- class embedding and the time MLP
    output -- so the cross-attention softmax is non-degenerate.
    """
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    temb = T.sinusoidal_embedding(ts, cfg.base_width)
    temb = T.linear(temb, p["temb.fc1.w"], p["temb.fc1.b"])
    temb = T.linear(T.silu(temb), p["temb.fc2.w"], p["temb.fc2.b"])
    ids = np.asarray(class_ids)
    if ids.shape != (n,):
        raise ShapeError(f"class_ids shape {ids.shape} != ({n},)")
    if ids.min() < 0 or ids.max() > cfg.num_classes:
        raise ShapeError(f"class id out of range [0, {cfg.num_classes}]")
    cemb = T.embedding(p["cond.table"], ids)
    ctx = T.concat([T.reshape(cemb, (n, 1, cfg.emb_dim)),
                    T.reshape(temb, (n, 1, cfg.emb_dim))], axis=1)
    return T.silu(temb), ctx


def down_pass(p: Params, cfg: BackboneConfig, x, temb, cemb, inj_input=None) -> BackboneActivations:
    """Stem + down levels + middle block; inj_input (already projected to
    base_width) is added right after the first conv."""
    h = _conv(p, "conv_in", x)
    if inj_input is not None:
        h = T.add(h, inj_input)
    levels = len(cfg.channel_mults)
    skips = []
    for i in range(levels):
        h = _res_block(p, f"down{i}", h, temb, cfg.groups)
        if i == levels - 1 and cfg.attn_lowest:
            h = _attn_block(p, f"down{i}.attn", h, cemb, cfg.groups, cfg.heads)
        skips.append(h)
        if i < levels - 1:
            h = T.avg_pool(h, 2)
    m = _res_block(p, "mid.res1", skips[-1], temb, cfg.groups)
    if cfg.attn_lowest:
        m = _attn_block(p, "mid.attn", m, cemb, cfg.groups, cfg.heads)
    m = _res_block(p, "mid.res2", m, temb, cfg.groups)
    return BackboneActivations(skips=skips, mid=m)


def up_pass(p: Params, cfg: BackboneConfig, acts: BackboneActivations, temb):
    h = acts.mid
    for i in reversed(range(len(cfg.channel_mults))):
        h = T.concat([h, acts.skips[i]], axis=1)
        h = _res_block(p, f"up{i}", h, temb, cfg.groups)
        if i > 0:
            h = T.nearest_upsample(h, 2)
    h = T.group_norm(h, p["out.gn.g"], p["out.gn.b"], cfg.groups)
    return _conv(p, "out.conv", T.silu(h))


def zero_conv(ex: Params, key: str, x):
    return T.conv2d(x, ex[f"{key}.w"], ex[f"{key}.b"])


def merge_activations(own: BackboneActivations, other: BackboneActivations, ex: Params) -> BackboneActivations:
    """own + zero-conv(other) at every skip and the mid; own is unchanged."""
    skips = [T.add(s, zero_conv(ex, f"skip{i}", o)) for i, (s, o) in enumerate(zip(own.skips, other.skips))]
    return BackboneActivations(skips=skips, mid=T.add(own.mid, zero_conv(ex, "mid", other.mid)))


def backbone_forward(p: Params, cfg: BackboneConfig, x, class_ids, t,
                     injected: BackboneActivations | None = None,
                     injected_input=None, exchange: Params | None = None):
    """Full denoiser forward.

    injected: the other branch's captured activations, each passed
    through its 1x1 exchange conv and added to this branch's own
    capture before the up pass.  injected_input: the other branch's raw
    input, projected by the input exchange conv and added after the
    first conv.  Returns (eps_prediction, own raw activations).
    """
    if (injected is not None or injected_input is not None) and exchange is None:
        raise ValueError("injection requires the exchange conv parameters")
    x = x if isinstance(x, Tensor) else Tensor(x)
    n = x.shape[0]
    temb, cemb = embed_time_and_class(p, cfg, t, class_ids, n)
    inj_in = zero_conv(exchange, "input", injected_input if isinstance(injected_input, Tensor)
                       else Tensor(injected_input)) if injected_input is not None else None
    acts = down_pass(p, cfg, x, temb, cemb, inj_in)
    used = merge_activations(acts, injected, exchange) if injected is not None else acts
    eps = up_pass(p, cfg, used, temb)
    return eps, acts


def expected_param_count(cfg: BackboneConfig) -> int:
    """Closed-form parameter count for one backbone."""
    w = cfg.widths
    emb = cfg.emb_dim

    def res(c_in, c_out):
        n = 2 * c_in                      # gn1
        n += c_out * c_in * 9 + c_out     # conv1
        n += c_out * emb + c_out          # temb proj
        n += 2 * c_out                    # gn2
        n += c_out * c_out * 9 + c_out    # conv2
        if c_in != c_out:
            n += c_out * c_in + c_out     # 1x1 skip
        return n

    def attn(c):
        n = 2 * c + 4 * c * c + c                            # self: gn, qkvo, o bias
        n += 2 * c + 2 * c * c + 2 * c * emb + c             # cross
        return n

    n = w[0] * cfg.in_channels * 9 + w[0]
    n += emb * cfg.base_width + emb + emb * emb + emb
    n += (cfg.num_classes + 1) * emb
    levels = len(w)
    for i in range(levels):
        n += res(w[i - 1] if i else w[0], w[i])
    if cfg.attn_lowest:
        n += 2 * attn(w[-1])   # lowest down level + mid
    n += res(w[-1], w[-1]) * 2
    for i in range(levels):
        c_above = w[i + 1] if i + 1 < levels else w[-1]
        n += res(w[i] + c_above, w[i])
    n += 2 * w[0]
    n += cfg.out_channels * w[0] * 9 + cfg.out_channels
    return n
