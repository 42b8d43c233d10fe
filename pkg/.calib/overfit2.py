import time

import numpy as np

from scenemotion import model as M, synthgen as sg, trainer as TR

t_start = time.time()
cfg = M.ModelConfig(feature_dim=64, num_heads=4, ff_multiplier=2, num_futures=6,
                    pos_embed_channels=16, time_embed_channels=16)
params = M.ModelParams.build(cfg, np.random.default_rng(0))
gen = sg.GenConfig(template="intersection", num_agents=(3, 3), interaction_rate=1.0, seed=424)
scenes = [sg.generate_scene(gen, i) for i in range(8)]
tc = TR.TrainConfig(batch_size=3, lr=9e-4, seed=0, total_epochs=800, warmup_fraction=10.0,
                    loss_mode="joint", mask_mode="mp_only", dropout_prob=0.0, rotation_range=0.0)
state, step = None, 0
best = float("inf")
while step < 2000:
    res = TR.train(scenes, params, tc, steps=50, state=state, start_step=step)
    state = res.state
    step += 50
    rep = TR.evaluate(params, scenes, tasks=("mp",), loss_mode="joint")["mp"]
    sade = rep.min_sade["all"]
    best = min(best, sade)
    print(f"step {step:5d} loss {res.curve[-1][1]:9.2f} minSADE {sade:.3f} best {best:.3f} "
          f"elapsed {time.time()-t_start:.0f}s", flush=True)
    if sade < 0.3:
        print(f"TARGET reached at step {step} ({(time.time()-t_start)/60:.1f} min)", flush=True)
        break
print("done best=%.3f total %.1f min" % (best, (time.time() - t_start) / 60), flush=True)
