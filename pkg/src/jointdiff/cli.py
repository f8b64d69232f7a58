"""Command-line surface: data synthesis, staged training, sampling,
inpainting, depth prediction and refinement, panoramas, evaluation.

Every command is seed-driven and writes a ``run_manifest.json`` next to
its outputs recording the seed, arguments, git revision, and wall time;
the artifact files themselves are byte-reproducible given the same seed
(the manifest is not, since it contains the wall time).  The
``JOINTDIFF_SEED`` environment variable overrides any seed argument or
config value.  Failures print a single ``error: <Kind>: <detail>`` line
to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, read_config, write_config
from .diffusion import make_schedule, sample_joint
from .images import (
    ImageFormatError,
    read_depth_png,
    read_mask_png,
    read_rgb_png,
    write_depth_png,
    write_rgb_png,
)
from .inpaint import ModalityMask, inpaint, predict_depth
from .jointnet import (
    build_backbone,
    build_direct_extend,
    build_jointnet,
    extend_for_masked_conditioning,
)
from .metrics import (
    abs_rel,
    align_scale_shift,
    disparity_to_depth,
    panorama_to_points,
    rmse_disparity,
    tile_coherence,
    write_ply,
)
from .scenes import DatasetError, make_sample, read_dataset, write_dataset
from .tiles import (
    TileStrategy,
    full_strategy,
    generate_panorama,
    independent_strategy,
    plain_strategy,
    sdedit_refine,
)
from .train import TrainData, desk_config, train

SCHEDULE_STEPS = 200
SEED_ENV = "JOINTDIFF_SEED"

_ERRORS = (ValueError, OSError, DatasetError, CheckpointError, ConfigError,
           ImageFormatError)


# -- plumbing -------------------------------------------------------------

def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _seed(value: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env else int(value)


def _write_manifest(out_dir: str, command: str, args: dict, seed: int,
                    outputs: list[str], t0: float):
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in args.items()
                      if k not in ("fn", "command") and not k.startswith("_")},
        "seed": seed,
        "git": _git_describe(),
        "wall_time_s": round(time.time() - t0, 3),
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _strategy(name: str, tile_size: int) -> TileStrategy:
    if name == "full":
        return full_strategy(tile_size // 2)
    if name == "plain":
        return plain_strategy(tile_size // 2)
    if name == "independent":
        return independent_strategy(tile_size)
    raise ValueError(f"unknown strategy {name!r}")


def _load_model(path: str):
    return load_checkpoint(path).model


def _write_joint_pair(out_dir: str, stem: str, x: np.ndarray, y: np.ndarray) -> list[str]:
    p_rgb = os.path.join(out_dir, f"{stem}_rgb.png")
    p_y = os.path.join(out_dir, f"{stem}_depth.png")
    write_rgb_png(p_rgb, np.clip(x, -1, 1))
    write_depth_png(p_y, y[0])
    return [p_rgb, p_y]


# -- commands ---------------------------------------------------------------

def cmd_synth_data(args) -> list[str]:
    seed = _seed(args.seed)
    child = np.random.default_rng(seed).integers(2**31, size=args.n)
    samples = [make_sample(int(child[i]), args.size) for i in range(args.n)]
    _ensure_dir(os.path.dirname(os.path.abspath(args.out)) or ".")
    write_dataset(samples, args.out)
    return [args.out]


def _build_for_stage(args, config):
    if args.stage == "base":
        cfg = BackboneConfig(base_width=args.base_width,
                             channel_mults=tuple(int(v) for v in args.channel_mults.split(",")),
                             groups=args.groups, heads=args.heads)
        return build_backbone(cfg, np.random.default_rng(config.seed))
    if not args.init_from:
        raise ValueError(f"stage {args.stage!r} needs --init-from")
    bundle = load_checkpoint(args.init_from)
    model = bundle.model
    if args.stage == "1":
        if model.kind != "backbone":
            raise ValueError(f"stage 1 starts from a backbone checkpoint, got {model.kind}")
        return build_jointnet(model, args.joint_channels)
    if model.kind == "backbone":
        raise ValueError(f"stage {args.stage!r} starts from a joint checkpoint")
    if args.stage == "mask_ft" and not getattr(model, "masked_cond", False):
        model = extend_for_masked_conditioning(model)
    return model


def _dump_history(path: str, result) -> str:
    with open(path, "w") as f:
        json.dump({"history": result.history, "val_history": result.val_history,
                   "rgb_frozen_ok": result.rgb_frozen_ok}, f)
        f.write("\n")
    return path


def cmd_train(args) -> list[str]:
    out_dir = _ensure_dir(args.out)
    config = read_config(args.config) if args.config else desk_config(args.stage)
    overrides = {}
    for key in ("steps", "learning_rate", "batch_size", "warmup_steps",
                "snapshot_every", "val_every", "seed"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    config = replace(config, stage=args.stage, dataset=args.dataset, **overrides)
    config = replace(config, seed=_seed(config.seed))

    data = TrainData.from_samples(read_dataset(args.dataset))
    sched = make_schedule(SCHEDULE_STEPS)
    model = _build_for_stage(args, config)
    result = train(model, data, config, sched=sched)
    if result.rgb_frozen_ok is False:
        raise ValueError("stage-1 freeze check failed: RGB branch changed")

    outputs = []
    ckpt = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(ckpt, model, step=config.steps, optimizer=result.optimizer)
    outputs.append(ckpt)
    cfg_path = os.path.join(out_dir, "train_config.cfg")
    write_config(cfg_path, config)
    outputs.append(cfg_path)
    outputs.append(_dump_history(os.path.join(out_dir, "history.json"), result))
    snap_dir = _ensure_dir(os.path.join(out_dir, "snapshots"))
    for step, x, y in result.snapshots:
        p = os.path.join(snap_dir, f"step_{step:05d}_rgb.png")
        write_rgb_png(p, np.clip(np.concatenate(list(x), axis=-1), -1, 1))
        outputs.append(p)
        if y is not None:
            p = os.path.join(snap_dir, f"step_{step:05d}_depth.png")
            write_depth_png(p, np.clip(np.concatenate(list(y), axis=-1), -1, 1)[0])
            outputs.append(p)

    if args.compare_direct_extend:
        if args.stage != "1":
            raise ValueError("--compare-direct-extend only applies to stage 1")
        base = load_checkpoint(args.init_from).model
        de = build_direct_extend(base, args.joint_channels, args.de_init,
                                 np.random.default_rng(config.seed))
        de_result = train(de, data, config, sched=sched)
        outputs.append(_dump_history(os.path.join(out_dir, "history_direct_extend.json"),
                                     de_result))
        prog = {"jointnet": result.val_history,
                "direct_extend": de_result.val_history}
        p = os.path.join(out_dir, "progression.json")
        with open(p, "w") as f:
            json.dump(prog, f)
            f.write("\n")
        outputs.append(p)
    return outputs


def cmd_sample(args) -> list[str]:
    out_dir = _ensure_dir(args.out)
    model = _load_model(args.ckpt)
    if model.kind == "backbone":
        raise ValueError("sample needs a joint checkpoint (train stage 1 first)")
    sched = make_schedule(SCHEDULE_STEPS)
    seed = _seed(args.seed)
    ids = None if args.class_id is None else np.full(args.n, args.class_id)
    x, y = sample_joint(model, sched, args.n, ids, args.steps, args.guidance,
                        np.random.default_rng(seed), size=model.image_size)
    outputs = []
    for i in range(args.n):
        outputs += _write_joint_pair(out_dir, f"sample_{i:03d}", x[i], y[i])
    return outputs


def cmd_inpaint(args) -> list[str]:
    out_dir = _ensure_dir(args.out)
    model = _load_model(args.ckpt)
    sched = make_schedule(SCHEDULE_STEPS)
    seed = _seed(args.seed)
    x0 = read_rgb_png(args.image)[None]
    y0 = read_depth_png(args.depth)[None, None]
    masks = ModalityMask(read_mask_png(args.mask_x), read_mask_png(args.mask_y))
    ids = None if args.class_id is None else np.array([args.class_id])
    x, y = inpaint(model, sched, x0, y0, masks, ids, args.steps, args.guidance,
                   np.random.default_rng(seed))
    return _write_joint_pair(out_dir, "inpainted", x[0], y[0])


def cmd_predict_depth(args) -> list[str]:
    out_dir = _ensure_dir(args.out)
    model = _load_model(args.ckpt)
    sched = make_schedule(SCHEDULE_STEPS)
    seed = _seed(args.seed)
    x0 = read_rgb_png(args.image)[None]
    _, y = predict_depth(model, sched, x0, args.steps, args.guidance,
                         np.random.default_rng(seed))
    p = os.path.join(out_dir, "predicted_depth.png")
    write_depth_png(p, np.clip(y[0, 0], -1, 1))
    return [p]


def cmd_refine_depth(args) -> list[str]:
    out_dir = _ensure_dir(args.out)
    model = _load_model(args.ckpt)
    sched = make_schedule(SCHEDULE_STEPS)
    seed = _seed(args.seed)
    x0 = read_rgb_png(args.image)
    y0 = read_depth_png(args.depth)[None]
    x, y = sdedit_refine(model, sched, x0, y0, args.strength,
                         num_steps=args.steps, rng=np.random.default_rng(seed),
                         hold_x=True)
    return _write_joint_pair(out_dir, "refined", x, y)


def cmd_panorama(args) -> list[str]:
    out_dir = _ensure_dir(args.out)
    model = _load_model(args.ckpt)
    sched = make_schedule(SCHEDULE_STEPS)
    seed = _seed(args.seed)
    tile = model.image_size
    strategy = _strategy(args.strategy, tile)
    x, y = generate_panorama(model, sched, args.width, args.class_id,
                             height=args.height, tile_size=tile,
                             strategy=strategy, num_steps=args.steps,
                             guidance=args.guidance,
                             rng=np.random.default_rng(seed))
    outputs = _write_joint_pair(out_dir, "panorama", x, y)
    if args.ply:
        disp01 = (np.clip(y[0], -1, 1) + 1.0) * 0.5
        points = panorama_to_points(np.clip(x, -1, 1), disparity_to_depth(disp01))
        p = os.path.join(out_dir, "panorama.ply")
        write_ply(points, p)
        outputs.append(p)
    return outputs


def depth_eval_report(samples, predict_fn) -> dict:
    """Affine-aligned depth metrics over scene samples.

    predict_fn(sample) returns predicted disparity (1, H, W) in [-1, 1];
    the prediction is affinely aligned to the sample's metric disparity
    (1 / depth, bounded away from zero), AbsRel is computed in metric
    depth space and RMSE in aligned disparity space.
    """
    per = []
    for s in samples:
        pred01 = (np.clip(predict_fn(s), -1.0, 1.0) + 1.0) * 0.5
        gt_disp = 1.0 / s.depth
        valid = s.valid_mask > 0.5
        align = align_scale_shift(pred01, gt_disp, valid)
        aligned = align.scale * pred01 + align.shift
        ok = valid & (aligned > 0)
        per.append({
            "class_id": int(s.class_id),
            "abs_rel": abs_rel(disparity_to_depth(np.clip(aligned, 1e-6, None)),
                               s.depth, ok),
            "rmse": rmse_disparity(aligned, gt_disp, valid),
            "scale": align.scale,
            "shift": align.shift,
        })
    return {
        "n": len(per),
        "abs_rel_mean": float(np.mean([r["abs_rel"] for r in per])),
        "rmse_mean": float(np.mean([r["rmse"] for r in per])),
        "per_sample": per,
    }


def cmd_eval_depth(args) -> list[str]:
    model = _load_model(args.ckpt)
    sched = make_schedule(SCHEDULE_STEPS)
    seed = _seed(args.seed)
    samples = read_dataset(args.dataset)
    if args.n:
        samples = samples[:args.n]
    rng = np.random.default_rng(seed)

    def predict_fn(s):
        _, y = predict_depth(model, sched, s.rgb[None], args.steps,
                             args.guidance, rng)
        return y[0]

    report = depth_eval_report(samples, predict_fn)
    out_dir = _ensure_dir(os.path.dirname(os.path.abspath(args.report)) or ".")
    with open(args.report, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    return [args.report]


def coherence_eval_report(model, sched, n_seeds: int, width: int,
                          num_steps: int = 50, seed_base: int = 0) -> dict:
    """Mean tile coherence per strategy over shared seeds (lower = better)."""
    tile = model.image_size
    scores = {}
    for name in ("full", "plain", "independent"):
        strat = _strategy(name, tile)
        vals = []
        for s in range(n_seeds):
            x, _ = generate_panorama(model, sched, width, tile_size=tile,
                                     strategy=strat, num_steps=num_steps,
                                     rng=np.random.default_rng(seed_base + s))
            vals.append(tile_coherence(x, n_tiles=max(2, width // tile)))
        scores[name] = {"mean": float(np.mean(vals)), "per_seed": vals}
    return {"n_seeds": n_seeds, "width": width, "scores": scores}


def cmd_eval_coherence(args) -> list[str]:
    model = _load_model(args.ckpt)
    sched = make_schedule(SCHEDULE_STEPS)
    report = coherence_eval_report(model, sched, args.n_seeds, args.width,
                                   args.steps, _seed(args.seed))
    out_dir = _ensure_dir(os.path.dirname(os.path.abspath(args.report)) or ".")
    with open(args.report, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    return [args.report]


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointdiff",
                                description="joint RGB + depth diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="render a synthetic RGBD dataset")
    sd.add_argument("--out", required=True)
    sd.add_argument("-n", type=int, default=256)
    sd.add_argument("--size", type=int, default=32, choices=(32, 64))
    sd.add_argument("--seed", type=int, default=0)
    sd.set_defaults(fn=cmd_synth_data)

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("--stage", required=True, choices=("base", "1", "2", "mask_ft"))
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", default=None, help="key=value config file")
    tr.add_argument("--init-from", default=None, help="checkpoint to continue from")
    tr.add_argument("--joint-channels", type=int, default=1, choices=(1, 3))
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--learning-rate", type=float, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--warmup-steps", type=int, default=None)
    tr.add_argument("--snapshot-every", type=int, default=None)
    tr.add_argument("--val-every", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--base-width", type=int, default=32)
    tr.add_argument("--channel-mults", default="1,2,4")
    tr.add_argument("--groups", type=int, default=8)
    tr.add_argument("--heads", type=int, default=4)
    tr.add_argument("--compare-direct-extend", action="store_true")
    tr.add_argument("--de-init", default="zeros", choices=("zeros", "random", "copy"))
    tr.set_defaults(fn=cmd_train)

    sa = sub.add_parser("sample", help="unconditional or class-conditional pairs")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("--out", required=True)
    sa.add_argument("-n", type=int, default=4)
    sa.add_argument("--class-id", type=int, default=None)
    sa.add_argument("--steps", type=int, default=50)
    sa.add_argument("--guidance", type=float, default=1.0)
    sa.add_argument("--seed", type=int, default=0)
    sa.set_defaults(fn=cmd_sample)

    ip = sub.add_parser("inpaint", help="regenerate masked regions of a pair")
    ip.add_argument("--ckpt", required=True)
    ip.add_argument("--image", required=True)
    ip.add_argument("--depth", required=True)
    ip.add_argument("--mask-x", required=True)
    ip.add_argument("--mask-y", required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--class-id", type=int, default=None)
    ip.add_argument("--steps", type=int, default=50)
    ip.add_argument("--guidance", type=float, default=1.0)
    ip.add_argument("--seed", type=int, default=0)
    ip.set_defaults(fn=cmd_inpaint)

    pd = sub.add_parser("predict-depth", help="depth from a single image")
    pd.add_argument("--ckpt", required=True)
    pd.add_argument("--image", required=True)
    pd.add_argument("--out", required=True)
    pd.add_argument("--steps", type=int, default=50)
    pd.add_argument("--guidance", type=float, default=1.0)
    pd.add_argument("--seed", type=int, default=0)
    pd.set_defaults(fn=cmd_predict_depth)

    rd = sub.add_parser("refine-depth", help="SDEdit-refine a depth map under its image")
    rd.add_argument("--ckpt", required=True)
    rd.add_argument("--image", required=True)
    rd.add_argument("--depth", required=True)
    rd.add_argument("--strength", type=float, default=0.4)
    rd.add_argument("--out", required=True)
    rd.add_argument("--steps", type=int, default=50)
    rd.add_argument("--seed", type=int, default=0)
    rd.set_defaults(fn=cmd_refine_depth)

    pa = sub.add_parser("panorama", help="wide wrapped generation")
    pa.add_argument("--ckpt", required=True)
    pa.add_argument("--width", type=int, required=True)
    pa.add_argument("--height", type=int, default=None)
    pa.add_argument("--class-id", type=int, default=None)
    pa.add_argument("--strategy", default="full",
                    choices=("full", "plain", "independent"))
    pa.add_argument("--steps", type=int, default=50)
    pa.add_argument("--guidance", type=float, default=1.0)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--ply", action="store_true", help="also export a point cloud")
    pa.add_argument("--out", required=True)
    pa.set_defaults(fn=cmd_panorama)

    ed = sub.add_parser("eval-depth", help="aligned AbsRel/RMSE over a dataset")
    ed.add_argument("--ckpt", required=True)
    ed.add_argument("--dataset", required=True)
    ed.add_argument("--report", required=True)
    ed.add_argument("-n", type=int, default=None)
    ed.add_argument("--steps", type=int, default=50)
    ed.add_argument("--guidance", type=float, default=1.0)
    ed.add_argument("--seed", type=int, default=0)
    ed.set_defaults(fn=cmd_eval_depth)

    ec = sub.add_parser("eval-coherence", help="tile coherence per strategy")
    ec.add_argument("--ckpt", required=True)
    ec.add_argument("--report", required=True)
    ec.add_argument("--n-seeds", type=int, default=32)
    ec.add_argument("--width", type=int, default=64)
    ec.add_argument("--steps", type=int, default=50)
    ec.add_argument("--seed", type=int, default=0)
    ec.set_defaults(fn=cmd_eval_coherence)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.time()
    try:
        outputs = args.fn(args)
    except _ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    out_dir = getattr(args, "out", None)
    if out_dir is None and getattr(args, "report", None):
        out_dir = args.report
    if out_dir is None and outputs:
        out_dir = outputs[0]
    if out_dir and not os.path.isdir(out_dir):
        out_dir = os.path.dirname(os.path.abspath(out_dir)) or "."
    if out_dir:
        seed_val = getattr(args, "seed", 0)
        _write_manifest(out_dir, args.command, dict(vars(args)), _seed(seed_val or 0), outputs, t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
