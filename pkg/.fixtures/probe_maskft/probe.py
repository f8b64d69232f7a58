import sys, time
import numpy as np
sys.path.insert(0, "/root/pkg/src")
from jointdiff.checkpoint import load_checkpoint, save_checkpoint
from jointdiff.jointnet import extend_for_masked_conditioning
from jointdiff.train import TrainData, desk_config, train
from jointdiff.diffusion import make_schedule
from jointdiff.scenes import read_dataset
from jointdiff.inpaint import inpaint, full_masks
from jointdiff.cli import depth_eval_report

sched = make_schedule(200)
data = TrainData.from_samples(read_dataset("/root/pkg/.fixtures/desk/train.bin"))
model = extend_for_masked_conditioning(load_checkpoint("/root/pkg/.fixtures/desk/s2/model.ckpt").model)
cfg = desk_config("mask_ft", learning_rate=1e-4, steps=1500, warmup_steps=100,
                  val_every=100, snapshot_every=0, seed=21)
t0 = time.time()
res = train(model, data, cfg, sched=sched)
print(f"train {time.time()-t0:.0f}s", flush=True)
for v in res.val_history:
    print("  val", v, flush=True)
save_checkpoint("/root/pkg/.fixtures/probe_maskft/model.ckpt", model, step=cfg.steps)

samples = read_dataset("/root/pkg/.fixtures/desk/heldout.bin")[:16]
x0 = np.stack([s.rgb for s in samples])
y0 = np.zeros((16, 1, 32, 32), np.float32)
gt = np.stack([s.disparity for s in samples])
for name, regen_x in (("cond", False), ("uncond", True)):
    masks = full_masks(32, 32, regen_x=regen_x, regen_y=True)
    _, y = inpaint(model, sched, x0, y0, masks, num_steps=50,
                   rng=np.random.default_rng(500))
    rep = depth_eval_report(samples, lambda s: y[samples.index(s)])
    cors = [np.corrcoef(y[i].ravel(), gt[i].ravel())[0, 1] for i in range(16)]
    print(f"{name}: abs_rel {rep['abs_rel_mean']:.4f} rmse {rep['rmse_mean']:.4f} "
          f"corr {np.mean(cors):.3f}", flush=True)
