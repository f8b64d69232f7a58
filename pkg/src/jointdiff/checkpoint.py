"""Binary checkpoints: config digest, parameter table, optimizer, RNG.

Layout (little-endian throughout):

  magic b"JNCKPT" | version u32 | config_len u32 | config json utf8 |
  sha256(config json) 32 bytes | global step u64 |
  rng flag u8 [+ len u32 + state json] |
  parameter table | optimizer flag u8 [+ step u64 + m table + v table]

A table is: count u32, then per entry name (u16 len + utf8), ndim u8,
dims u32 each, raw float32 payload.  The config json is canonical
(sorted keys, no spaces), so its digest is stable; a digest mismatch on
read means the file was corrupted or edited and loading refuses.
Writes go to a temp file in the same directory and are renamed into
place, so a crash never leaves a half-written checkpoint at the target
path.  Restoring copies parameter bytes verbatim: a loaded model's
forward outputs are bit-identical to the saved model's.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig
from .jointnet import (
    build_backbone,
    build_direct_extend,
    build_jointnet,
    extend_for_masked_conditioning,
)
from .optim import Adam

MAGIC = b"JNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Raised on malformed, truncated, or tampered checkpoint files."""


def model_config(model) -> dict:
    """Everything needed to rebuild the model's skeleton."""
    cfg = model.cfg
    out = {
        "kind": model.kind,
        "backbone": {
            "in_channels": cfg.in_channels,
            "out_channels": cfg.out_channels,
            "base_width": cfg.base_width,
            "channel_mults": list(cfg.channel_mults),
            "groups": cfg.groups,
            "heads": cfg.heads,
            "num_classes": cfg.num_classes,
            "attn_lowest": cfg.attn_lowest,
        },
    }
    if model.kind == "jointnet":
        out["joint_channels"] = model.joint_channels
        out["masked_cond"] = model.masked_cond
    elif model.kind == "direct_extend":
        out["joint_channels"] = model.joint_channels
        out["init_mode"] = model.init_mode
    return out


def build_from_config(config: dict):
    """Model skeleton per the config; parameters are placeholders."""
    cfg = BackboneConfig(**{**config["backbone"],
                            "channel_mults": tuple(config["backbone"]["channel_mults"])})
    base = build_backbone(cfg, np.random.default_rng(0))
    kind = config["kind"]
    if kind == "backbone":
        return base
    if kind == "jointnet":
        model = build_jointnet(base, config["joint_channels"])
        if config.get("masked_cond"):
            model = extend_for_masked_conditioning(model)
        return model
    if kind == "direct_extend":
        return build_direct_extend(base, config["joint_channels"],
                                   config["init_mode"], np.random.default_rng(0))
    raise CheckpointError(f"unknown model kind {kind!r}")


def _canonical(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode()


def config_digest(config: dict) -> str:
    return hashlib.sha256(_canonical(config)).hexdigest()


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def save_checkpoint(path: str, model, step: int = 0,
                    optimizer: Adam | None = None,
                    rng: np.random.Generator | None = None):
    config = model_config(model)
    cjson = _canonical(config)
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(cjson)), cjson,
             hashlib.sha256(cjson).digest(),
             struct.pack("<Q", step)]
    if rng is not None:
        sjson = json.dumps(rng.bit_generator.state).encode()
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<I", len(sjson)))
        parts.append(sjson)
    else:
        parts.append(struct.pack("<B", 0))
    parts.append(_pack_table({k: v.data for k, v in model.named_params().items()}))
    if optimizer is not None:
        state = optimizer.state_dict()
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<Q", state["step_count"]))
        parts.append(_pack_table(state["m"]))
        parts.append(_pack_table(state["v"]))
    else:
        parts.append(struct.pack("<B", 0))
    blob = b"".join(parts)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


@dataclass
class CheckpointBundle:
    model: object
    config: dict
    step: int
    rng: np.random.Generator | None
    optimizer_state: dict | None

    def make_optimizer(self, lr: float, warmup_steps: int = 0) -> Adam:
        opt = Adam(self.model.named_params(), lr=lr, warmup_steps=warmup_steps)
        if self.optimizer_state is not None:
            opt.load_state_dict(self.optimizer_state)
        return opt


def _read_table(r: _Reader) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode()
        ndim = r.u8()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    return out


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cjson = r.take(r.u32())
    digest = r.take(32)
    if hashlib.sha256(cjson).digest() != digest:
        raise CheckpointError("config digest mismatch; checkpoint corrupted")
    config = json.loads(cjson)
    step = r.u64()
    rng = None
    if r.u8():
        state = json.loads(r.take(r.u32()))
        rng = np.random.default_rng(0)
        rng.bit_generator.state = state
    table = _read_table(r)

    model = build_from_config(config)
    params = model.named_params()
    if set(table) != set(params):
        raise CheckpointError("parameter names do not match the model config")
    for name, arr in table.items():
        if params[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"{arr.shape} vs {params[name].data.shape}")
        params[name].data = arr.copy()

    opt_state = None
    if r.u8():
        opt_state = {"step_count": r.u64(), "m": _read_table(r),
                     "v": _read_table(r)}
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return CheckpointBundle(model=model, config=config, step=step, rng=rng,
                            optimizer_state=opt_state)
