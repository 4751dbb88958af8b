"""Train a small shadow-conditioned point-cloud diffusion model and run the full pipeline.

The defaults are a few minutes on one CPU core and give rough clouds; the
acceptance run uses 500 instances and 20k steps.

Run: python demos/shadow_diffusion.py [--instances 120] [--iters 1500]
"""
import argparse
import time

import numpy as np
import torch

from softshadow.diffusion import DatasetSpec, Trainer, TrainingConfig, generate_dataset, reverse_sample
from softshadow.geometry import SceneConfig
from softshadow.metrics import chamfer
from softshadow.pipeline import corrupt, evaluate, reconstruct

p = argparse.ArgumentParser()
p.add_argument("--instances", type=int, default=120)
p.add_argument("--iters", type=int, default=1500)
args = p.parse_args()
torch.set_num_threads(1)

cfg = SceneConfig(wall_width=1.0, wall_height=1.0, wall_res_x=64, wall_res_z=64, emitter_depth=1.0,
                  emitter_width=1.0, emitter_height=1.0, emitter_res_x=8, emitter_res_z=8,
                  voxel_nx=16, voxel_ny=8, voxel_nz=16)
spec = DatasetSpec()
t0 = time.perf_counter()
train = generate_dataset(args.instances, cfg, seed=0, spec=spec)
test = generate_dataset(3, cfg, seed=0, spec=spec, start=100_000)
print(f"generated {len(train)} training triples in {time.perf_counter() - t0:.0f}s")

trainer = Trainer(config=TrainingConfig(iterations=args.iters))
trainer.fit(np.stack([i.cloud.points for i in train]), np.stack([i.measurement for i in train]),
            callback=lambda s, l: print(f"step {s}: loss {np.mean(trainer.losses[-100:]):.3f}") if s % 500 == 0 else None)

for inst in test:
    cloud = reverse_sample(inst.measurement, trainer.ema, trainer.schedule, 256, seed=inst.index)
    print(f"{inst.cls:>8}: CD to truth {chamfer(cloud, inst.cloud):.4f}")
    for sbr in (30, 10):
        res = reconstruct(corrupt(inst.measurement, sbr_db=sbr), cfg, trainer.ema, trainer.schedule, spec)
        rep = evaluate(res, inst)
        print(f"          SBR {sbr} dB: emitter MSE {rep.mse_2d:.4f}, offset error "
              f"{np.linalg.norm(res.translation - inst.translation):.3f} m")
