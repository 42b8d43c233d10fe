import sys
import time

import numpy as np

import scenemotion.model as mod
from scenemotion import model as M, synthgen as sg, trainer as TR

t0 = time.time()
gen = sg.GenConfig(template="intersection", num_agents=(3, 3), interaction_rate=1.0, seed=424)
scenes = [sg.generate_scene(gen, i) for i in range(8)]
variant = sys.argv[1]
batch, lr, scale = {
    "a": (2, 7e-4, 10.0),
    "b": (2, 1e-3, 10.0),
    "c": (1, 7e-4, 5.0),
    "d": (2, 7e-4, 20.0),
}[variant]
mod.POSITION_OUTPUT_SCALE = scale
cfg = M.ModelConfig(feature_dim=64, num_heads=4, ff_multiplier=2, num_futures=6,
                    pos_embed_channels=16, time_embed_channels=16)
params = M.ModelParams.build(cfg, np.random.default_rng(0))
tc = TR.TrainConfig(batch_size=batch, lr=lr, seed=0, total_epochs=500, warmup_fraction=10.0,
                    loss_mode="joint", mask_mode="mp_only", dropout_prob=0.0, rotation_range=0.0)
state, step = None, 0
for chunk in range(10):
    res = TR.train(scenes, params, tc, steps=100, state=state, start_step=step)
    state = res.state
    step += 100
    rep = TR.evaluate(params, scenes, tasks=("mp",), loss_mode="joint")["mp"]
    print(f"[{variant} b={batch} lr={lr} s={scale}] step {step} loss {res.curve[-1][1]:8.2f} "
          f"minSADE {rep.min_sade['all']:.3f} ({time.time()-t0:.0f}s)", flush=True)
